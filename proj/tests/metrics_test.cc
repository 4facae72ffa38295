#include "misdd/metrics.h"

#include <gtest/gtest.h>

#include <cmath>

#include "oracles.h"

namespace misdd {
namespace {

TEST(Auroc, HandExamples) {
  EXPECT_DOUBLE_EQ(auroc(std::vector<double>{0.9, 0.8, 0.1, 0.2}, std::vector<int>{1, 1, 0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(auroc(std::vector<double>{0.9, 0.6, 0.4, 0.2}, std::vector<int>{1, 0, 1, 0}), 0.75);
  EXPECT_DOUBLE_EQ(auroc(std::vector<double>{0.1, 0.2, 0.9, 0.8}, std::vector<int>{1, 1, 0, 0}), 0.0);
}

TEST(Auroc, SingleClassIsUndefined) {
  EXPECT_THROW(auroc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), UndefinedMetricError);
}

TEST(Auroc, MonotoneInvarianceAndComplement) {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> s(20), s2(20), neg(20);
    std::vector<int> y(20);
    for (int i = 0; i < 20; ++i) {
      s[i] = std::round(rng.uniform() * 5) / 5;
      y[i] = i % 3 == 0;
      s2[i] = std::exp(3 * s[i]) + 1;
      neg[i] = -s[i];
    }
    const double a = auroc(s, y);
    EXPECT_EQ(a, auroc(s2, y));
    EXPECT_NEAR(auroc(neg, y), 1.0 - a, 1e-12);
  }
}

TEST(PAuroc, EqualsFlattenedAuroc) {
  Rng rng(5);
  ScoreMap m(4, 4);
  Mask k(4, 4);
  std::vector<double> s;
  std::vector<int> y;
  for (int i = 0; i < 16; ++i) {
    m.values[i] = rng.uniform();
    k.pixels[i] = i % 5 == 0;
    s.push_back(m.values[i]);
    y.push_back(k.pixels[i]);
  }
  EXPECT_DOUBLE_EQ(p_auroc(std::vector<ScoreMap>{m}, std::vector<Mask>{k}), auroc(s, y));
  ScoreMap constant(4, 4, 0.3);
  EXPECT_DOUBLE_EQ(p_auroc(std::vector<ScoreMap>{constant}, std::vector<Mask>{k}), 0.5);
  ScoreMap same(4, 4);
  for (int i = 0; i < 16; ++i) same.values[i] = k.pixels[i];
  EXPECT_DOUBLE_EQ(p_auroc(std::vector<ScoreMap>{same}, std::vector<Mask>{k}), 1.0);
  EXPECT_THROW(p_auroc(std::vector<ScoreMap>{m}, std::vector<Mask>{Mask(4, 4)}), UndefinedMetricError);
}

TEST(ConnectedComponents, Conventions) {
  EXPECT_TRUE(connected_components(Mask(5, 5)).empty());
  Mask diag(3, 3);
  diag.at(0, 0) = 1;
  diag.at(1, 1) = 1;
  EXPECT_EQ(connected_components(diag).size(), 1u);
  Mask two(3, 3);
  two.at(0, 2) = 1;
  two.at(2, 0) = 1;
  const auto r = connected_components(two);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0].top, 0);
  EXPECT_EQ(r[0].left, 2);
}

TEST(ConnectedComponents, MatchesFloodFill) {
  Rng rng(11);
  for (int t = 0; t < 200; ++t) {
    Mask m(8, 8);
    for (auto& p : m.pixels) p = rng.uniform() < 0.4;
    const auto got = connected_components(m);
    const auto want = oracle::components(m);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_EQ(got[i].pixels, want[i]);
  }
}

TEST(AuproPaper, PerfectAndEmpty) {
  Mask k(6, 6);
  k.at(1, 1) = k.at(1, 2) = k.at(4, 4) = 1;
  ScoreMap perfect(6, 6);
  for (int i = 0; i < 36; ++i) perfect.values[i] = k.pixels[i];
  EXPECT_DOUBLE_EQ(aupro_paper(std::vector<ScoreMap>{perfect}, std::vector<Mask>{k}), 1.0);
  EXPECT_DOUBLE_EQ(aupro_paper(std::vector<ScoreMap>{ScoreMap(6, 6)}, std::vector<Mask>{k}), 0.0);
  EXPECT_THROW(aupro_paper(std::vector<ScoreMap>{perfect}, std::vector<Mask>{Mask(6, 6)}), UndefinedMetricError);
}

TEST(AuproStandard, PerfectAndEmpty) {
  Mask k(6, 6);
  k.at(2, 2) = k.at(2, 3) = 1;
  ScoreMap perfect(6, 6);
  for (int i = 0; i < 36; ++i) perfect.values[i] = k.pixels[i];
  EXPECT_DOUBLE_EQ(aupro_standard(std::vector<ScoreMap>{perfect}, std::vector<Mask>{k}), 1.0);
  EXPECT_DOUBLE_EQ(aupro_standard(std::vector<ScoreMap>{ScoreMap(6, 6)}, std::vector<Mask>{k}), 0.0);
}

TEST(Aupro, RandomInstancesMatchOracles) {
  Rng rng(17);
  for (int t = 0; t < 100; ++t) {
    const oracle::Instance inst = oracle::random_instance(rng, 6);
    EXPECT_NEAR(aupro_paper(inst.maps, inst.masks), oracle::aupro_paper(inst.maps, inst.masks), 1e-9);
    EXPECT_NEAR(aupro_standard(inst.maps, inst.masks), oracle::aupro_standard(inst.maps, inst.masks), 1e-9);
  }
}

ScoredSample scored(const std::string& cls, int label, double s, int seed) {
  ScoredSample x;
  x.id = cls + std::to_string(seed);
  x.class_name = cls;
  x.label = label;
  x.s_im = s;
  x.gt_mask = Mask(4, 4);
  x.s_px = ScoreMap(4, 4, 0.1 * seed);
  if (label) {
    x.gt_mask.at(seed % 4, 1) = 1;
    x.s_px.at(seed % 4, 1) = 0.95;
  }
  return x;
}

TEST(EvaluateRun, MeanRowAndRanges) {
  std::vector<ScoredSample> v{scored("a", 0, 0.2, 1), scored("a", 1, 0.7, 2), scored("a", 1, 0.1, 3),
                              scored("b", 0, 0.4, 4), scored("b", 1, 0.9, 5)};
  const auto rows = evaluate_run(v);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].class_name, "a");
  EXPECT_EQ(rows[2].class_name, "mean");
  EXPECT_NEAR(rows[2].i_auroc, 0.5 * (rows[0].i_auroc + rows[1].i_auroc), 1e-12);
  EXPECT_NEAR(rows[2].aupro_standard, 0.5 * (rows[0].aupro_standard + rows[1].aupro_standard), 1e-12);
  for (const auto& r : rows) {
    for (double m : {r.i_auroc, r.p_auroc, r.aupro_paper, r.aupro_standard}) {
      EXPECT_GE(m, 0.0);
      EXPECT_LE(m, 1.0);
    }
  }
}

TEST(EvaluateRun, SingleClassLabelsNameTheMetric) {
  std::vector<ScoredSample> v{scored("a", 1, 0.2, 1), scored("a", 1, 0.7, 2)};
  try {
    evaluate_run(v);
    FAIL() << "expected an error";
  } catch (const UndefinedMetricError& e) {
    EXPECT_EQ(e.metric(), "i_auroc");
  }
}

}  // namespace
}  // namespace misdd
