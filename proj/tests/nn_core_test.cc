#include <gtest/gtest.h>

#include <filesystem>

#include "misdd/nn/layers.h"
#include "misdd/nn/parameters.h"
#include "misdd/nn/tape.h"

namespace misdd::nn {
namespace {

Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index r = 0;
  for (const auto& row : rows) {
    Eigen::Index c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

TEST(ConsistentAttention, TwoTokenHandExample) {
  Tape tape(false);
  const Matrix out = consistent_attention(tape.constant(mat({{1.0}, {0.0}})), 1).value();
  EXPECT_NEAR(out(0, 0), 0.7310585786, 1e-9);
  EXPECT_NEAR(out(1, 0), 0.5, 1e-12);
}

TEST(ConsistentAttention, SingletonAndIdenticalRows) {
  Tape tape(false);
  const Matrix one = mat({{0.3, -1.2, 2.0, 0.5}});
  EXPECT_TRUE(consistent_attention(tape.constant(one), 2).value().isApprox(one));
  Matrix same(3, 4);
  for (int i = 0; i < 3; ++i) same.row(i) = one.row(0);
  const Matrix out = consistent_attention(tape.constant(same), 2).value();
  EXPECT_TRUE(out.row(0).isApprox(out.row(1)));
  EXPECT_TRUE(out.row(1).isApprox(out.row(2)));
}

TEST(ConsistentAttention, PermutationEquivariant) {
  Rng rng(1);
  const Matrix v = normal_matrix(5, 8, 1.0, rng);
  std::vector<int> perm{3, 0, 4, 1, 2};
  Matrix pv(5, 8);
  for (int i = 0; i < 5; ++i) pv.row(i) = v.row(perm[i]);
  Tape tape(false);
  const Matrix a = consistent_attention(tape.constant(v), 2).value();
  const Matrix b = consistent_attention(tape.constant(pv), 2).value();
  for (int i = 0; i < 5; ++i) EXPECT_TRUE(b.row(i).isApprox(a.row(perm[i]), 1e-12));
}

TEST(ConsistentAttention, RejectsIndivisibleWidth) {
  Tape tape(false);
  EXPECT_THROW(consistent_attention(tape.constant(Matrix::Ones(2, 5)), 2), std::invalid_argument);
}

TEST(Tape, NonFiniteValuesAreRejected) {
  Tape tape(false);
  Var a = tape.constant(mat({{1.0, std::numeric_limits<double>::infinity()}}));
  EXPECT_THROW(scale(a, 2.0), std::domain_error);
}

TEST(GradCheck, QuadraticIsExact) {
  ParameterStore store;
  Rng rng(2);
  store.add("theta", normal_matrix(3, 4, 1.0, rng));
  const auto r = finite_difference_check(
      [&](Tape& t) { return scale(sum_all(square(t.param(store.at("theta")))), 0.5); }, store);
  EXPECT_LT(r.max_relative_error, 1e-8);
  EXPECT_EQ(r.entries_checked, 12u);
}

TEST(GradCheck, FrozenParametersAreSkipped) {
  ParameterStore store;
  store.add("a", Matrix::Ones(2, 2));
  store.add("b", Matrix::Ones(2, 2), false);
  const auto r = finite_difference_check(
      [&](Tape& t) { return sum_all(mul(t.param(store.at("a")), t.param(store.at("b")))); }, store);
  EXPECT_EQ(r.entries_checked, 4u);
}

TEST(GradCheck, NondeterministicLossDetected) {
  ParameterStore store;
  store.add("a", Matrix::Ones(1, 1));
  int calls = 0;
  EXPECT_THROW(finite_difference_check(
                   [&](Tape& t) { return scale(t.param(store.at("a")), 1.0 + 1e-3 * ++calls); }, store),
               NondeterministicLossError);
}

// Every differentiable op composed into one scalar.
TEST(GradCheck, AllOpsAndBlock) {
  ParameterStore store;
  Rng rng(4);
  store.add("x", normal_matrix(5, 8, 0.5, rng));
  store.add("row", normal_matrix(1, 8, 0.5, rng));
  const TransformerBlock block = TransformerBlock::init(store, "blk", 8, 2, 12, rng);
  const std::vector<int> targets{0, 3, 1, 4, 2};
  const std::vector<int> pick{4, 0, 0, 2};
  const auto r = finite_difference_check(
      [&](Tape& t) {
        Var x = t.param(store.at("x"));
        Var h = block(t, add_row(x, t.param(store.at("row"))));
        Var parts[] = {slice_rows(h, 0, 2), gather_rows(h, pick)};
        Var cat = concat_rows(parts);
        Var cols[] = {slice_cols(cat, 0, 4), slice_cols(cat, 4, 4)};
        Var wide = concat_cols(cols);
        Var n = l2_normalize_rows(wide);
        Var loss = softmax_cross_entropy(scale(matmul_nt(h, x), 0.5), targets);
        loss = add(loss, mean_all(square(sub(n, softmax_rows(wide)))));
        loss = add(loss, row_distance(mean_rows(x), slice_rows(n, 1, 1)));
        loss = add(loss, sum_all(mul(gelu(slice_rows(h, 2, 1)), t.param(store.at("row")))));
        return add(loss, scale(sum_all(matmul(slice_rows(h, 0, 1), matmul(x.tape()->constant(Matrix::Ones(8, 2)),
                                                                           x.tape()->constant(Matrix::Ones(2, 1))))),
                               0.01));
      },
      store);
  EXPECT_LT(r.max_relative_error, 1e-6) << r.worst_entry;
}

TEST(GradCheck, PartialQueryBlockMatchesFullBlock) {
  ParameterStore store;
  Rng rng(6);
  const TransformerBlock block = TransformerBlock::init(store, "blk", 8, 2, 12, rng);
  Tape tape(false);
  Var x = tape.constant(normal_matrix(6, 8, 1.0, rng));
  const Matrix full = block(tape, x).value();
  const Matrix part = block(tape, x, 2).value();
  EXPECT_TRUE(part.isApprox(full.topRows(2), 1e-12));
}

TEST(Optimizers, SgdMomentumAndDecay) {
  Parameter p{"p", mat({{1.0}}), mat({{0.5}}), true};
  Sgd sgd(0.9, 0.1);
  sgd.step({&p}, 0.1);
  // v = 0.5 + 0.1 * 1 = 0.6
  EXPECT_NEAR(p.value(0, 0), 1.0 - 0.06, 1e-15);
  sgd.step({&p}, 0.1);
  // v = 0.9 * 0.6 + 0.5 + 0.1 * 0.94
  EXPECT_NEAR(p.value(0, 0), 0.94 - 0.1 * (0.54 + 0.5 + 0.094), 1e-15);
  Parameter frozen{"f", mat({{1.0}}), mat({{1.0}}), false};
  sgd.step({&frozen}, 0.1);
  EXPECT_EQ(frozen.value(0, 0), 1.0);
}

TEST(Checkpoint, RoundTripIsExact) {
  ParameterStore store;
  Rng rng(8);
  store.add("a/w", normal_matrix(3, 5, 1.0, rng));
  store.add("b.x", normal_matrix(1, 7, 1.0, rng), false);
  const auto dir = std::filesystem::temp_directory_path() / "misdd_ckpt_test";
  std::filesystem::remove_all(dir);
  save_checkpoint(store, dir, R"({"k": 1})");
  std::string meta;
  ParameterStore back = load_checkpoint(dir, &meta);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back.at("a/w").value, store.at("a/w").value);
  EXPECT_FALSE(back.at("b.x").trainable);
  EXPECT_NE(meta.find("\"k\""), std::string::npos);
  EXPECT_FALSE(std::filesystem::exists(dir.string() + ".partial"));
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace misdd::nn
