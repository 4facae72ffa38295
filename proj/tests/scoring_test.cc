#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include <unistd.h>

#include "misdd/scoring.h"

namespace misdd {
namespace {

using nn::Matrix;
using nn::RowVector;

RowVector random_unit(Rng& rng, int d) {
  RowVector v(d);
  for (int i = 0; i < d; ++i) v(i) = rng.normal();
  return v / v.norm();
}

Matrix random_unit_rows(Rng& rng, int n, int d) {
  Matrix m(n, d);
  for (int i = 0; i < n; ++i) m.row(i) = random_unit(rng, d);
  return m;
}

// Independent two-way softmax at temperature 0.07.
double softmax_abnormal(const RowVector& f, const TextEmbeddingPair& t) {
  const double zn = f.dot(t.normal) / 0.07, za = f.dot(t.abnormal) / 0.07;
  const double m = std::max(zn, za);
  return std::exp(za - m) / (std::exp(zn - m) + std::exp(za - m));
}

// ------------------------------------------------------------- image score

TEST(ImageScore, EquidistantIsHalf) {
  RowVector n(3), a(3), f(3);
  n << 1, 0, 0;
  a << 0, 1, 0;
  f << 0, 0, 1;
  EXPECT_NEAR(image_score(f, {n, a}), 0.5, 1e-15);
  f << std::sqrt(0.5), std::sqrt(0.5), 0;
  EXPECT_NEAR(image_score(f, {n, a}), 0.5, 1e-15);
}

TEST(ImageScore, SaturatesAtAbnormalRow) {
  RowVector n(4);
  n << 0.5, 0.5, 0.5, 0.5;
  EXPECT_NEAR(image_score(-n, {n, -n}), 1.0, 1e-6);
  EXPECT_NEAR(image_score(n, {n, -n}), 0.0, 1e-6);
}

TEST(ImageScore, MatchesSoftmaxOracle) {
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    const RowVector f = random_unit(rng, 4);
    const TextEmbeddingPair p{random_unit(rng, 4), random_unit(rng, 4)};
    EXPECT_NEAR(image_score(f, p), softmax_abnormal(f, p), 1e-12);
  }
}

// --------------------------------------------------------------- pixel map

TEST(PixelMap, TokensAtNormalTextScoreNearZero) {
  Rng rng(2);
  const RowVector n = random_unit(rng, 8);
  const TextEmbeddingPair text{n, -n};
  const Matrix tokens = n.replicate(4, 1);
  const ScoreMap m = pixel_map({{1, tokens}, {2, tokens}}, {1, 2}, text, 2, 8);
  for (double v : m.values) EXPECT_LT(v, 1e-3);
}

TEST(PixelMap, SingleLayerEqualsUpsampledTokenScores) {
  Rng rng(3);
  const TextEmbeddingPair text{random_unit(rng, 6), random_unit(rng, 6)};
  const Matrix tokens = random_unit_rows(rng, 9, 6);
  const ScoreMap m = pixel_map({{3, tokens}}, {3}, text, 3, 12);
  Eigen::VectorXd per_token(9);
  for (int i = 0; i < 9; ++i) per_token(i) = softmax_abnormal(tokens.row(i), text);
  const ScoreMap expect = upsample_bilinear(per_token, 3, 12);
  ASSERT_EQ(m.values.size(), expect.values.size());
  for (std::size_t i = 0; i < m.values.size(); ++i) EXPECT_NEAR(m.values[i], expect.values[i], 1e-12);
  EXPECT_THROW(pixel_map({{3, tokens}}, {4}, text, 3, 12), std::invalid_argument);
}

TEST(PixelMap, MultiLayerIsMeanOfTokenScores) {
  Rng rng(4);
  const TextEmbeddingPair text{random_unit(rng, 5), random_unit(rng, 5)};
  std::map<int, Matrix> layers{{2, random_unit_rows(rng, 4, 5)}, {4, random_unit_rows(rng, 4, 5)},
                               {6, random_unit_rows(rng, 4, 5)}};
  const ScoreMap m = pixel_map(layers, {2, 4, 6}, text, 2, 2);
  for (int i = 0; i < 4; ++i) {
    double mean = 0;
    for (const auto& [layer, tok] : layers) mean += softmax_abnormal(tok.row(i), text) / 3.0;
    EXPECT_NEAR(m.values[static_cast<std::size_t>(i)], mean, 1e-12);
  }
}

TEST(Upsample, ConstantAndEdgeClamp) {
  const ScoreMap c = upsample_bilinear(Eigen::VectorXd::Constant(4, 0.3), 2, 8);
  for (double v : c.values) EXPECT_NEAR(v, 0.3, 1e-15);
  Eigen::VectorXd g(4);
  g << 0, 1, 0, 1;  // columns 0 and 1
  const ScoreMap m = upsample_bilinear(g, 2, 4);
  // Half-pixel centers: output x = 0 and 1 map to source 0 (clamped) and 0.25.
  EXPECT_NEAR(m.at(0, 0), 0.0, 1e-15);
  EXPECT_NEAR(m.at(0, 1), 0.25, 1e-15);
  EXPECT_NEAR(m.at(0, 2), 0.75, 1e-15);
  EXPECT_NEAR(m.at(3, 3), 1.0, 1e-15);
}

// ----------------------------------------------------------------- fusion

TEST(Harmonic, Identities) {
  for (double a : {0.0, 0.5, 1.0}) EXPECT_EQ(harmonic(a, a), a);
  EXPECT_NEAR(harmonic(1.0, 1.0 / 3.0), 0.5, 1e-15);
  EXPECT_EQ(harmonic(0.0, 0.9), 0.0);
  EXPECT_EQ(harmonic(0.9, 0.0), 0.0);
  Rng rng(5);
  for (int t = 0; t < 500; ++t) {
    const double a = rng.uniform(), b = rng.uniform();
    EXPECT_EQ(harmonic(a, a), a);
    const double h = harmonic(a, b);
    EXPECT_LE(h, 2 * std::min(a, b) + 1e-15);
    EXPECT_LE(h, std::max(a, b) + 1e-15);
    EXPECT_GE(h, std::min(a, b) - 1e-15);
  }
  ScoreMap p(1, 3);
  p.values = {0.0, 1.0 / 3.0, 1.0};
  const ScoreMap f = harmonic_fuse(1.0, p);
  EXPECT_EQ(f.values[0], 0.0);
  EXPECT_NEAR(f.values[1], 0.5, 1e-15);
  EXPECT_NEAR(f.values[2], 1.0, 1e-15);
}

// ------------------------------------------------------------- memory bank

TEST(MemoryBank, ExactMatchAndClamp) {
  Rng rng(6);
  const Matrix bank = random_unit_rows(rng, 5, 4);
  const Eigen::VectorXd s = memory_bank_scores(bank.topRows(2), bank);
  EXPECT_NEAR(s(0), 0.0, 1e-12);
  EXPECT_NEAR(s(1), 0.0, 1e-12);
  const Matrix one = bank.topRows(1);
  EXPECT_DOUBLE_EQ(memory_bank_scores(-one, one)(0), 1.0);
}

TEST(MemoryBank, MatchesNearestNeighborSearch) {
  Rng rng(7);
  for (int t = 0; t < 20; ++t) {
    const Matrix bank = random_unit_rows(rng, 7, 3);
    const Matrix tokens = random_unit_rows(rng, 5, 3);
    const Eigen::VectorXd s = memory_bank_scores(tokens, bank);
    for (int i = 0; i < 5; ++i) {
      double best = -2;
      for (int j = 0; j < 7; ++j) best = std::max(best, tokens.row(i).dot(bank.row(j)));
      EXPECT_NEAR(s(i), std::clamp(1.0 - best, 0.0, 1.0), 1e-12);
    }
  }
}

// ---------------------------------------------------- galleries and detect

ModelConfig tiny_config() {
  ModelConfig c;
  c.encoder.image_size = 16;
  c.encoder.patch_size = 8;
  c.encoder.depth = 2;
  c.encoder.width = 8;
  c.encoder.heads = 2;
  c.encoder.mlp_hidden = 16;
  c.encoder.embed_dim = 8;
  c.encoder.prompt_depth = 1;
  c.encoder.feature_layers = {1, 2};
  c.text.width = 8;
  c.text.heads = 2;
  c.text.mlp_hidden = 16;
  return c;
}

Dataset tiny_dataset() {
  DatasetSpec spec;
  spec.classes = {"tile", "foam"};
  spec.n_train_normal = 3;
  spec.n_test_normal = 1;
  spec.n_test_anomalous = 2;
  spec.image_size = 16;
  spec.seed = 2;
  return synthesize_dataset(spec);
}

class GalleryFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    data = tiny_dataset();
    model = Model::create(tiny_config(), PromptTemplates{}, data.spec().classes, 3);
    model.add_prompts(PromptConfig{2, 2, 2}, 1, 4);
  }
  Dataset data;
  Model model;
};

TEST_F(GalleryFixture, CountsAndUnitRows) {
  const std::size_t n = data.train().size();
  const Galleries full = build_galleries(model, data.train(), sample_missing_schedule(n, MissingType::kNone, 0, 1));
  EXPECT_EQ(full.rgb.size(), static_cast<Eigen::Index>(n));
  EXPECT_EQ(full.three_d.size(), static_cast<Eigen::Index>(n));
  EXPECT_EQ(full.text.size(), 4);
  for (const Gallery* g : {&full.rgb, &full.three_d, &full.text})
    for (Eigen::Index r = 0; r < g->size(); ++r) EXPECT_NEAR(g->entries.row(r).norm(), 1.0, 1e-9);
  const Galleries no_rgb = build_galleries(model, data.train(), sample_missing_schedule(n, MissingType::kRgb, 1.0, 1));
  EXPECT_EQ(no_rgb.rgb.size(), 0);
  EXPECT_EQ(no_rgb.three_d.size(), static_cast<Eigen::Index>(n));
  const Galleries half = build_galleries(model, data.train(), sample_missing_schedule(n, MissingType::kBoth, 2.0 / 3, 1));
  EXPECT_EQ(half.rgb.size(), static_cast<Eigen::Index>(n - 2));
  EXPECT_EQ(half.three_d.size(), static_cast<Eigen::Index>(n - 2));
}

TEST_F(GalleryFixture, SaveLoadRoundTrip) {
  const std::size_t n = data.train().size();
  GalleryOptions o;
  o.token_banks = true;
  const Galleries g = build_galleries(model, data.train(), sample_missing_schedule(n, MissingType::kNone, 0, 1), nullptr, o);
  const auto dir = std::filesystem::temp_directory_path() / ("misdd_gal_" + std::to_string(::getpid()));
  save_galleries(g, dir);
  const Galleries back = load_galleries(dir);
  EXPECT_EQ(back.rgb.entries, g.rgb.entries);
  EXPECT_EQ(back.text.entries, g.text.entries);
  EXPECT_EQ(back.classes, g.classes);
  EXPECT_EQ(back.three_d.tokens.at(2), g.three_d.tokens.at(2));
  std::filesystem::remove_all(dir);
}

TEST_F(GalleryFixture, DetectRangeDeterminismAndMax) {
  const std::size_t n = data.train().size();
  const Galleries g = build_galleries(model, data.train(), sample_missing_schedule(n, MissingType::kNone, 0, 1));
  for (const PairedSample& s : data.test()) {
    for (const ModalityIndicator ind : {indicator_for(false, false), indicator_for(true, false), indicator_for(false, true)}) {
      for (MissingLevel level : {MissingLevel::kInput, MissingLevel::kFeature}) {
        DetectOptions o;
        o.level = level;
        const ScorePair a = detect(model, s, g, ind, o);
        const ScorePair b = detect(model, s, g, ind, o);
        EXPECT_EQ(a.s_im, b.s_im);
        EXPECT_EQ(a.s_px.values, b.s_px.values);
        EXPECT_GE(a.s_im, 0.0);
        EXPECT_LE(a.s_im, 1.0);
        EXPECT_EQ(a.s_im, std::max(a.rgb.image, a.three_d.image));
        ASSERT_EQ(a.s_px.height, 16);
        for (std::size_t i = 0; i < a.s_px.values.size(); ++i) {
          const double v = a.s_px.values[i];
          ASSERT_TRUE(std::isfinite(v) && v >= 0.0 && v <= 1.0);
          EXPECT_EQ(v, std::max(a.rgb.fused.values[i], a.three_d.fused.values[i]));
        }
        if (level == MissingLevel::kFeature && !ind.rgb) {
          EXPECT_EQ(a.rgb.image, 0.0);
        }
      }
    }
  }
}

}  // namespace
}  // namespace misdd
