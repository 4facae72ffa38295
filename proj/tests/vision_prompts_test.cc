#include <gtest/gtest.h>

#include <cmath>

#include "misdd/model.h"
#include "misdd/prompts.h"
#include "misdd/vision_encoder.h"

namespace misdd {
namespace {

using nn::Matrix;

ModelConfig tiny_config() {
  ModelConfig c;
  c.encoder.image_size = 32;
  c.encoder.patch_size = 8;
  c.encoder.depth = 4;
  c.encoder.width = 16;
  c.encoder.heads = 2;
  c.encoder.mlp_hidden = 32;
  c.encoder.embed_dim = 16;
  c.encoder.prompt_depth = 3;
  c.encoder.feature_layers = {2, 4};
  c.prompts.l_ccp = 2;
  c.prompts.l_msp = 3;
  c.prompts.l_map = 4;
  c.text.width = 16;
  c.text.heads = 2;
  c.text.mlp_hidden = 32;
  return c;
}

Model tiny_model(bool prompts = true) {
  const ModelConfig c = tiny_config();
  Model m = Model::create(c, PromptTemplates{}, {"tile"}, 5);
  if (prompts) m.add_prompts(c.prompts, c.encoder.prompt_depth, 6);
  return m;
}

Image random_image(int size, int channels, std::uint64_t seed) {
  Rng rng(seed);
  Image img(size, size, channels);
  for (float& v : img.pixels) v = static_cast<float>(rng.uniform());
  return img;
}

TEST(VisionEncoder, PatchEmbedShapeAndDeterminism) {
  ModelConfig c = tiny_config();
  c.encoder.image_size = 64;
  Model m = Model::create(c, PromptTemplates{}, {"tile"}, 1);
  const Image img = random_image(64, 3, 2);
  nn::Tape t1, t2;
  const Matrix a = patch_embed(t1, m.vision(Branch::kRgb), img).value();
  const Matrix b = patch_embed(t2, m.vision(Branch::kRgb), img).value();
  EXPECT_EQ(a.rows(), 65);
  EXPECT_EQ(a, b);
}

TEST(VisionEncoder, ZeroImageEmbedsToPositionsPlusBias) {
  const Model m = tiny_model(false);
  const VisionEncoder& enc = m.vision(Branch::kRgb);
  nn::Tape tape;
  const Matrix e = patch_embed(tape, enc, Image(32, 32, 3)).value();
  const Matrix& pos = enc.pos->value;
  EXPECT_TRUE(e.row(0).isApprox(enc.cls->value.row(0) + pos.row(0), 1e-12));
  for (Eigen::Index r = 1; r < e.rows(); ++r) {
    const nn::RowVector expect = pos.row(r) + enc.patch.bias->value.row(0);
    EXPECT_TRUE(e.row(r).isApprox(expect, 1e-12)) << r;
  }
}

TEST(VisionEncoder, DepthCenteringKeepsZeroImageZero) {
  EXPECT_TRUE(patchify(Image(16, 16, 1), 8).isZero());
  Image flat(16, 16, 1, 0.4f);
  EXPECT_NEAR(patchify(flat, 8).cwiseAbs().maxCoeff(), 0.0, 1e-6);
  Image bump = flat;
  bump.at(3, 3) = 0.6f;
  const Matrix p = patchify(bump, 8);
  EXPECT_EQ(p.cols(), 8 * 8 * 3);
  EXPECT_GT(p.cwiseAbs().maxCoeff(), 0.5);
}

TEST(VisionEncoder, PooledIsUnitAndDeterministic) {
  const Model m = tiny_model(false);
  for (Branch b : kBranches) {
    const Image img = random_image(32, b == Branch::kRgb ? 3 : 1, 9);
    nn::Tape t1, t2;
    const EncodedBranch e1 = encode(t1, m.vision(b), img, nullptr);
    const EncodedBranch e2 = encode(t2, m.vision(b), img, nullptr);
    EXPECT_NEAR(e1.pooled.value().norm(), 1.0, 1e-6);
    EXPECT_EQ(e1.pooled.value(), e2.pooled.value());
    ASSERT_EQ(e1.per_layer.size(), 2u);
    for (const auto& [layer, v] : e1.per_layer) {
      EXPECT_EQ(v.rows(), 16);
      EXPECT_EQ(v.value(), e2.per_layer.at(layer).value());
    }
  }
}

TEST(VisionEncoder, ZeroImageGivesFiniteFeatures) {
  const Model m = tiny_model();
  for (Branch b : kBranches) {
    const BranchPrompts bp = m.branch_prompts(b);
    nn::Tape tape;
    const EncodedBranch e = encode(tape, m.vision(b), Image(32, 32, b == Branch::kRgb ? 3 : 1), &bp);
    EXPECT_TRUE(e.pooled.value().allFinite());
    for (const auto& [layer, v] : e.per_layer) EXPECT_TRUE(v.value().allFinite());
  }
}

TEST(VisionEncoder, SequenceLengthsFollowInjectionRule) {
  const Model m = tiny_model();
  const ModelConfig& c = m.config();
  const BranchPrompts bp = m.branch_prompts(Branch::kRgb);
  nn::Tape tape;
  const EncodedBranch e = encode(tape, m.vision(Branch::kRgb), random_image(32, 3, 1), &bp);
  const Eigen::Index n = 1 + c.encoder.num_patches();
  ASSERT_EQ(e.sequence_lengths.size(), static_cast<std::size_t>(c.encoder.depth));
  int mutated = 0;
  for (int j = 0; j < c.encoder.depth; ++j) {
    const Eigen::Index expect = j < c.encoder.prompt_depth ? n + c.prompts.total_len() : n;
    EXPECT_EQ(e.sequence_lengths[static_cast<std::size_t>(j)], expect) << j;
    mutated += e.sequence_lengths[static_cast<std::size_t>(j)] != n;
  }
  EXPECT_EQ(mutated, c.encoder.prompt_depth);
  EXPECT_EQ(e.refined_maps, c.encoder.prompt_depth);
  // Exported shapes do not depend on prompt lengths.
  for (const auto& [layer, v] : e.per_layer) EXPECT_EQ(v.rows(), c.encoder.num_patches());
}

TEST(VisionEncoder, FeatureMissingZeroesAbsentBranchIdempotently) {
  const Model m = tiny_model(false);
  auto feats = [&](Branch b) {
    nn::Tape tape;
    return detach(encode(tape, m.vision(b), random_image(32, b == Branch::kRgb ? 3 : 1, 4), nullptr));
  };
  VisualFeatures rgb = feats(Branch::kRgb), td = feats(Branch::kThreeD);
  const VisualFeatures rgb0 = rgb, td0 = td;
  apply_feature_missing(rgb, td, {true, true});
  EXPECT_EQ(rgb.pooled, rgb0.pooled);
  EXPECT_EQ(td.per_layer.at(2), td0.per_layer.at(2));
  apply_feature_missing(rgb, td, indicator_for(false, true));
  EXPECT_TRUE(td.pooled.isZero());
  for (const auto& [layer, v] : td.per_layer) EXPECT_TRUE(v.isZero());
  EXPECT_EQ(rgb.pooled, rgb0.pooled);
  VisualFeatures rgb2 = rgb, td2 = td;
  apply_feature_missing(rgb2, td2, indicator_for(false, true));
  EXPECT_EQ(td2.per_layer.at(4), td.per_layer.at(4));
  EXPECT_EQ(rgb2.pooled, rgb.pooled);
}

TEST(VisionEncoder, CompleteCaseIsLevelIndependent) {
  const Model m = tiny_model();
  const Image img = random_image(32, 3, 8);
  const BranchPrompts bp = m.branch_prompts(Branch::kRgb);
  nn::Tape t1, t2;
  VisualFeatures a = detach(encode(t1, m.vision(Branch::kRgb), img, &bp));
  VisualFeatures dummy;
  apply_feature_missing(a, dummy, {true, true});
  PairedSample s;
  s.rgb = img;
  s.depth = Image(32, 32, 1);
  const ModalityPair masked = apply_input_missing(s, {true, true});
  const VisualFeatures b = detach(encode(t2, m.vision(Branch::kRgb), masked.rgb, &bp));
  EXPECT_EQ(a.pooled, b.pooled);
}

// ------------------------------------------------------------------ prompts

TEST(Prompts, InitShapesAndDeterminism) {
  const Model a = tiny_model(), b = tiny_model();
  const ModelConfig& c = a.config();
  const PromptBundle& p = a.prompts();
  ASSERT_NE(p.ccp, nullptr);
  EXPECT_EQ(p.ccp->value.rows(), c.prompts.l_ccp);
  EXPECT_EQ(p.ccp->value.cols(), c.encoder.width);
  EXPECT_EQ(p.map_for(Branch::kRgb).size() + p.map_for(Branch::kThreeD).size(),
            2u * static_cast<std::size_t>(c.encoder.prompt_depth));
  EXPECT_EQ(a.prompts().ccp->value, b.prompts().ccp->value);
  EXPECT_EQ(a.prompts().map_for(Branch::kThreeD)[1]->value, b.prompts().map_for(Branch::kThreeD)[1]->value);
  // One CCP parameter serves both branches.
  EXPECT_EQ(a.branch_prompts(Branch::kRgb).ccp, a.branch_prompts(Branch::kThreeD).ccp);
}

TEST(Prompts, MspOfZeroInputHasEqualRows) {
  nn::ParameterStore store;
  Rng rng(1);
  const nn::Linear w = nn::Linear::init(store, "w", 8, 8, rng);
  store.at("w.bias").value.setRandom();
  nn::Tape tape;
  const Matrix p = generate_msp(tape, tape.constant(Matrix::Zero(10, 8)), w, 2, 3).value();
  ASSERT_EQ(p.rows(), 3);
  for (Eigen::Index r = 1; r < 3; ++r) EXPECT_TRUE(p.row(r).isApprox(p.row(0), 1e-12));
}

TEST(Prompts, MspSingleTokenSingleHeadIsProjection) {
  nn::ParameterStore store;
  Rng rng(2);
  const nn::Linear w = nn::Linear::init(store, "w", 4, 4, rng);
  const Matrix x = Matrix::Random(1, 4);
  nn::Tape tape;
  const Matrix p = generate_msp(tape, tape.constant(x), w, 1, 1).value();
  const Matrix expect = x * store.at("w.weight").value + store.at("w.bias").value;
  EXPECT_TRUE(p.isApprox(expect, 1e-12));
}

TEST(Prompts, MspInvariantToPermutationWithinPoolGroups) {
  nn::ParameterStore store;
  Rng rng(3);
  const nn::Linear w = nn::Linear::init(store, "w", 8, 8, rng);
  const Matrix x = Matrix::Random(12, 8);
  // l = 1: the whole sequence is one group, so any permutation is allowed.
  Matrix perm = x;
  perm.row(0).swap(perm.row(11));
  perm.row(3).swap(perm.row(7));
  nn::Tape t1, t2;
  const Matrix a = generate_msp(t1, t1.constant(x), w, 2, 1).value();
  const Matrix b = generate_msp(t2, t2.constant(perm), w, 2, 1).value();
  EXPECT_TRUE(a.isApprox(b, 1e-12));
  // l = 3: groups {0..3}, {4..7}, {8..11}; swap inside the first group only.
  Matrix inner = x;
  inner.row(0).swap(inner.row(2));
  nn::Tape t3, t4;
  const Matrix c = generate_msp(t3, t3.constant(x), w, 2, 3).value();
  const Matrix d = generate_msp(t4, t4.constant(inner), w, 2, 3).value();
  EXPECT_TRUE(c.isApprox(d, 1e-12));
}

TEST(Prompts, StridePoolMatrixRowsAverage) {
  const Matrix p = stride_pool_matrix(3, 7);
  for (Eigen::Index r = 0; r < 3; ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-12);
  EXPECT_NEAR(p.colwise().sum().sum(), 3.0, 1e-12);
  for (Eigen::Index c = 0; c < 7; ++c) EXPECT_EQ((p.col(c).array() > 0).count(), 1);
}

TEST(Prompts, RefineWithoutTokensIsSelfAttention) {
  const Matrix p = Matrix::Random(3, 4);
  nn::Tape tape;
  nn::Var pv = tape.constant(p);
  const Matrix a = refine_prompt(pv, tape.constant(Matrix(0, 4)), 2).value();
  const Matrix b = nn::consistent_attention(pv, 2).value();
  EXPECT_EQ(a, b);
}

TEST(Prompts, RefineSingleTokenHandEvaluation) {
  // l = 1, one token, d_k = 1: row 0 of softmax(S S^T) S with S = [p; x].
  const double p = 0.7, x = -0.4;
  const double w0 = std::exp(p * p), w1 = std::exp(p * x);
  const double expect = (w0 * p + w1 * x) / (w0 + w1);
  nn::Tape tape;
  const Matrix r = refine_prompt(tape.constant(Matrix::Constant(1, 1, p)), tape.constant(Matrix::Constant(1, 1, x)), 1)
                       .value();
  ASSERT_EQ(r.rows(), 1);
  EXPECT_NEAR(r(0, 0), expect, 1e-12);
}

TEST(Prompts, InjectLengthsAndEmptyIdentity) {
  nn::Tape tape;
  nn::Var tokens = tape.constant(Matrix::Random(5, 4));
  const InjectResult none = inject(tokens, {}, 2);
  EXPECT_EQ(none.extended.value(), tokens.value());
  EXPECT_EQ(none.prompt_rows, 0);
  InjectedPrompts ip;
  ip.ccp = tape.constant(Matrix::Random(2, 4));
  ip.msp = tape.constant(Matrix::Random(3, 4));
  ip.map = tape.constant(Matrix::Random(1, 4));
  const InjectResult r = inject(tokens, ip, 2);
  EXPECT_EQ(r.extended.rows(), 2 + 3 + 1 + 5);
  EXPECT_EQ(r.prompt_rows, 6);
  EXPECT_EQ(r.map_out.rows(), 1);
  EXPECT_EQ(Matrix(r.extended.value().bottomRows(5)), tokens.value());
}

// Scalar loss on both branches' pooled features.
double pooled_loss(const Model& m, nn::Tape& tape, bool rgb, bool td) {
  nn::Var total;
  for (Branch b : kBranches) {
    if ((b == Branch::kRgb && !rgb) || (b == Branch::kThreeD && !td)) continue;
    const BranchPrompts bp = m.branch_prompts(b);
    const EncodedBranch e = encode(tape, m.vision(b), random_image(32, b == Branch::kRgb ? 3 : 1, 21), &bp);
    nn::Var s = nn::sum_all(nn::mul(e.pooled, tape.constant(Matrix::Constant(1, e.pooled.cols(), 0.3))));
    total = total.valid() ? nn::add(total, s) : s;
  }
  tape.backward(total);
  return total.value()(0, 0);
}

TEST(Prompts, CcpGradientIsNonzeroAndAccumulatesOverBranches) {
  Model m = tiny_model();
  nn::Parameter& ccp = *m.prompts().ccp;
  auto grad_for = [&](bool rgb, bool td) {
    m.store().zero_grad();
    nn::Tape tape;
    pooled_loss(m, tape, rgb, td);
    return Matrix(ccp.grad);
  };
  const Matrix g_rgb = grad_for(true, false);
  const Matrix g_td = grad_for(false, true);
  const Matrix g_both = grad_for(true, true);
  EXPECT_GT(g_rgb.norm(), 0.0);
  EXPECT_GT(g_td.norm(), 0.0);
  EXPECT_TRUE(g_both.isApprox(g_rgb + g_td, 1e-10));

  // Central difference along the gradient direction.
  const double h = 1e-5;
  const Matrix dir = g_rgb / g_rgb.norm();
  const Matrix base = ccp.value;
  ccp.value = base + h * dir;
  nn::Tape tp;
  const double up = pooled_loss(m, tp, true, false);
  ccp.value = base - h * dir;
  nn::Tape tm;
  const double down = pooled_loss(m, tm, true, false);
  ccp.value = base;
  EXPECT_NEAR((up - down) / (2 * h), g_rgb.norm(), 1e-5 * std::max(1.0, g_rgb.norm()));
}

TEST(Prompts, RgbMapDoesNotAffectThreeDBranch) {
  Model m = tiny_model();
  const Image depth = random_image(32, 1, 5);
  auto pooled = [&] {
    const BranchPrompts bp = m.branch_prompts(Branch::kThreeD);
    nn::Tape tape;
    return nn::RowVector(encode(tape, m.vision(Branch::kThreeD), depth, &bp).pooled.value());
  };
  const nn::RowVector before = pooled();
  for (nn::Parameter* p : m.prompts().map_for(Branch::kRgb)) p->value.setZero();
  EXPECT_EQ(pooled(), before);
}

}  // namespace
}  // namespace misdd
