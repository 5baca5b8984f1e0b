#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "phreg/bench.hpp"
#include "phreg/metrics.hpp"

using namespace phreg;

namespace {

FeatureGrid random_grid(std::size_t rows, std::size_t cols, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  FeatureGrid g(rows, cols, dim);
  for (auto& v : g.values) v = n(rng);
  return g;
}

FeatureGrid negated(FeatureGrid g) {
  for (auto& v : g.values) v = -v;
  return g;
}

std::vector<double> onehot(const std::vector<std::int32_t>& labels, std::int32_t cls) {
  std::vector<double> out;
  for (auto l : labels) out.push_back(l == cls ? 1.0 : 0.0);
  return out;
}

}  // namespace

TEST(CosinePercentiles, IdenticalAndNegatedInputs) {
  const std::vector<FeatureGrid> a{random_grid(4, 4, 8, 1), random_grid(4, 4, 8, 2)};
  const auto same = cosine_percentiles(a, a);
  for (double v : same.values) EXPECT_NEAR(v, 1.0, 1e-6);
  EXPECT_EQ(same.count, 32u);
  const auto neg = cosine_percentiles({negated(a[0]), negated(a[1])}, a);
  for (double v : neg.values) EXPECT_NEAR(v, -1.0, 1e-6);
  EXPECT_THROW(cosine_percentiles({}, {}), std::invalid_argument);
  EXPECT_THROW(cosine_percentiles({a[0]}, {random_grid(4, 4, 4, 1)}), std::invalid_argument);
}

TEST(CosinePercentiles, NearestRankOverDissimilarityOrder) {
  EXPECT_DOUBLE_EQ(dissimilarity_percentile({1.0, 0.5, 0.0}, 50), 0.5);
  EXPECT_DOUBLE_EQ(dissimilarity_percentile({0.0, 1.0, 0.5}, 99), 0.0);
  EXPECT_DOUBLE_EQ(dissimilarity_percentile({0.0, 1.0, 0.5}, 1), 1.0);
  // Grid of three one-channel patches with cosines 1, -1, 1 against target.
  FeatureGrid pred(1, 3, 1), target(1, 3, 1);
  pred.values = {1, -1, 2};
  target.values = {3, 1, 1};
  const auto p = cosine_percentiles({pred}, {target});
  EXPECT_DOUBLE_EQ(p.at(50), 1.0);
  EXPECT_DOUBLE_EQ(p.at(99), -1.0);
  EXPECT_NEAR(p.mean, 1.0 / 3.0, 1e-12);
}

TEST(NormStats, ConstantGridHasNoSpread) {
  FeatureGrid g(8, 8, 4);
  std::fill(g.values.begin(), g.values.end(), 0.5f);
  const auto s = token_norm_stats({g});
  EXPECT_NEAR(s.variance, 0.0, 1e-12);
  EXPECT_EQ(s.outlier_fraction, 0.0);
  EXPECT_NEAR(s.mean, 1.0, 1e-7);
}

TEST(NormStats, SingleScaledTokenIsTheOnlyOutlier) {
  FeatureGrid g(8, 8, 4);
  std::fill(g.values.begin(), g.values.end(), 0.5f);
  for (auto& v : g.token(3, 5)) v *= 10.0f;
  const auto s = token_norm_stats({g});
  EXPECT_DOUBLE_EQ(s.outlier_fraction, 1.0 / 64.0);
  EXPECT_EQ(s.count, 64u);
  // Population variance oracle: 63 norms of 1 and one of 10.
  const double mean = (63.0 + 10.0) / 64.0;
  EXPECT_NEAR(s.variance, (63.0 * (1 - mean) * (1 - mean) + (10 - mean) * (10 - mean)) / 64.0, 1e-6);
}

TEST(NormStats, HighNormArtifactsRaiseVariance) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SceneSpec spec;
    spec.seed = seed;
    const auto clean = prototype_features(gen_scene(spec));
    ArtifactSpec art;
    art.seed = seed;
    EXPECT_GT(token_norm_stats({inject_artifacts(clean, art)}).variance, token_norm_stats({clean}).variance);
  }
}

TEST(Segmentation, PerfectAndHalfWrongFixtures) {
  const std::vector<std::int32_t> truth{0, 0, 1, 1};
  const auto perfect = segmentation_scores(truth, truth, 2);
  EXPECT_DOUBLE_EQ(perfect.miou, 100.0);
  EXPECT_DOUBLE_EQ(perfect.macc, 100.0);
  const auto all_a = segmentation_scores({0, 0, 0, 0}, truth, 2);
  EXPECT_DOUBLE_EQ(all_a.iou[0], 0.5);
  EXPECT_DOUBLE_EQ(all_a.iou[1], 0.0);
  EXPECT_DOUBLE_EQ(all_a.miou, 25.0);
  EXPECT_DOUBLE_EQ(all_a.macc, 50.0);
}

TEST(Segmentation, AbsentClassesExcluded) {
  const auto s = segmentation_scores({0, 1, 1}, {0, 1, 1}, 5);
  EXPECT_DOUBLE_EQ(s.miou, 100.0);
  EXPECT_TRUE(std::isnan(s.iou[3]));
  // Class 2 predicted but absent from truth: IoU 0 counts, recall is undefined.
  const auto t = segmentation_scores({0, 2, 1}, {0, 1, 1}, 3);
  EXPECT_DOUBLE_EQ(t.iou[2], 0.0);
  EXPECT_TRUE(std::isnan(t.recall[2]));
  EXPECT_NEAR(t.miou, (100.0 + 50.0 + 0.0) / 3.0, 1e-9);
  EXPECT_NEAR(t.macc, (100.0 + 50.0) / 2.0, 1e-9);
}

TEST(Segmentation, PermutationInvariant) {
  std::mt19937_64 rng(3);
  std::vector<std::int32_t> pred(100), truth(100);
  for (std::size_t i = 0; i < 100; ++i) {
    pred[i] = std::int32_t(rng() % 4);
    truth[i] = std::int32_t(rng() % 4);
  }
  const auto base = segmentation_scores(pred, truth, 4);
  std::vector<std::size_t> idx(100);
  for (std::size_t i = 0; i < 100; ++i) idx[i] = i;
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<std::int32_t> p2, t2;
  for (auto i : idx) {
    p2.push_back(pred[i]);
    t2.push_back(truth[i]);
  }
  const auto perm = segmentation_scores(p2, t2, 4);
  EXPECT_NEAR(perm.miou, base.miou, 1e-12);
  EXPECT_NEAR(perm.macc, base.macc, 1e-12);
  EXPECT_GE(base.miou, 0.0);
  EXPECT_LE(base.miou, 100.0);
}

TEST(LinearProbe, SeparablePrototypeFeatures) {
  std::vector<FeatureGrid> train_f, test_f;
  std::vector<std::vector<std::int32_t>> train_l, test_l;
  for (std::uint64_t s = 0; s < 8; ++s) {
    SceneSpec spec;
    spec.prototype_dim = 16;
    spec.seed = s;
    const auto scene = gen_scene(spec);
    auto f = prototype_features(scene);
    std::mt19937_64 rng(s);
    std::normal_distribution<float> n(0.0f, 0.05f);
    for (auto& v : f.values) v += n(rng);
    (s < 6 ? train_f : test_f).push_back(f);
    (s < 6 ? train_l : test_l).push_back(scene.labels);
  }
  const auto r = linear_probe(train_f, train_l, test_f, test_l, 4);
  EXPECT_GT(r.scores.miou, 95.0);
  EXPECT_EQ(r.predictions.size(), 2u * 64u);
}

TEST(ZeroShot, HeatmapFixtures) {
  const std::vector<float> q{0.6f, 0.8f, 0.0f};
  FeatureGrid same(2, 2, 3), orth(2, 2, 3), zero(2, 2, 3);
  for (std::size_t t = 0; t < 4; ++t) {
    std::copy(q.begin(), q.end(), same.values.begin() + t * 3);
    orth.values[t * 3 + 2] = 1.0f;
  }
  for (double v : zero_shot_heatmap(same, q)) EXPECT_NEAR(v, 1.0, 1e-6);
  for (double v : zero_shot_heatmap(orth, q)) EXPECT_NEAR(v, 0.0, 1e-12);
  for (double v : zero_shot_heatmap(zero, q)) EXPECT_EQ(v, 0.0);
}

TEST(ZeroShot, PrototypeSceneSeparatesRegions) {
  SceneSpec spec;
  spec.seed = 2;
  const auto scene = gen_scene(spec);
  const auto f = prototype_features(scene);
  for (std::size_t c = 0; c < 4; ++c) {
    const auto h = zero_shot_heatmap(f, scene.prototypes[c]);
    for (std::size_t t = 0; t < h.size(); ++t) {
      if (scene.labels[t] == std::int32_t(c)) EXPECT_GE(h[t], 0.9);
      else EXPECT_LE(h[t], 0.1);
    }
  }
}

TEST(Pearson, MatchedInvertedConstant) {
  const std::vector<std::int32_t> labels{0, 1, 1, 0, 2, 2};
  std::vector<std::vector<double>> matched, inverted, constant;
  for (std::int32_t c = 0; c < 3; ++c) {
    const auto y = onehot(labels, c);
    matched.push_back(y);
    std::vector<double> inv;
    for (double v : y) inv.push_back(1.0 - v);
    inverted.push_back(inv);
    constant.push_back(std::vector<double>(6, 0.3));
  }
  EXPECT_NEAR(pearson_zero_shot({matched}, {labels}), 1.0, 1e-12);
  EXPECT_NEAR(pearson_zero_shot({inverted}, {labels}), -1.0, 1e-12);
  EXPECT_EQ(pearson_zero_shot({constant}, {labels}), 0.0);
  EXPECT_EQ(pearson({1, 2, 3}, {5, 5, 5}), 0.0);
}

TEST(Pearson, PositiveAffineInvariance) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> h(50), y(50), h2(50);
    for (std::size_t i = 0; i < 50; ++i) {
      h[i] = n(rng);
      y[i] = double(rng() % 2);
    }
    const double a = std::exp(n(rng)), b = n(rng) * 10.0;
    for (std::size_t i = 0; i < 50; ++i) h2[i] = a * h[i] + b;
    EXPECT_NEAR(pearson(h2, y), pearson(h, y), 1e-6);
  }
}

TEST(Report, CsvHasMatchingColumns) {
  MetricsReport r;
  const auto count = [](const std::string& s) { return std::count(s.begin(), s.end(), ','); };
  EXPECT_EQ(count(MetricsReport::csv_header()), count(r.csv_row()));
}
