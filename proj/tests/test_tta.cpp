#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "phreg/bench.hpp"
#include "phreg/tta.hpp"

using namespace phreg;

namespace {

FeatureGrid random_grid(std::size_t rows, std::size_t cols, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  FeatureGrid g(rows, cols, dim);
  for (auto& v : g.values) v = n(rng);
  return g;
}

Image pattern_image(std::size_t h, std::size_t w) {
  Image img(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = float((7 * y + 13 * x + 5 * c) % 97) / 97.0f;
  return img;
}

// Exactly shift- and flip-equivariant: each token is a function of its own patch only.
FeatureFn patch_mean_teacher(std::size_t k) {
  return [k](const Image& img) {
    FeatureGrid g(img.height / k, img.width / k, 3);
    for (std::size_t r = 0; r < g.rows; ++r)
      for (std::size_t c = 0; c < g.cols; ++c)
        for (std::size_t y = 0; y < k; ++y)
          for (std::size_t x = 0; x < k; ++x)
            for (std::size_t ch = 0; ch < 3; ++ch)
              g.token(r, c)[ch] += img.at(r * k + y, c * k + x, ch) / float(k * k);
    return g;
  };
}

}  // namespace

TEST(QuantizeShift, NearestMultipleTiesTowardZero) {
  EXPECT_EQ(quantize_shift(0.1 * 448, 16), 48);
  EXPECT_EQ(quantize_shift(-44.8, 16), -48);
  EXPECT_EQ(quantize_shift(8.0, 16), 0);
  EXPECT_EQ(quantize_shift(-8.0, 16), 0);
  EXPECT_EQ(quantize_shift(24.0, 16), 16);
  EXPECT_EQ(quantize_shift(24.01, 16), 32);
}

TEST(SampleAugParams, IdentityFirstAndBounded) {
  Rng rng(1);
  EXPECT_THROW(sample_aug_params(rng, 0, 0.15, 0.5, 8, 64, 64), std::invalid_argument);
  Rng one(2);
  const auto single = sample_aug_params(one, 1, 0.15, 0.5, 8, 64, 64);
  ASSERT_EQ(single.size(), 1u);
  EXPECT_TRUE(single[0].is_identity());
  Rng many(3);
  const auto params = sample_aug_params(many, 2000, 0.15, 0.5, 16, 448, 224);
  EXPECT_TRUE(params[0].is_identity());
  std::size_t flips = 0;
  for (const auto& p : params) {
    EXPECT_EQ(p.shift_x % 16, 0);
    EXPECT_EQ(p.shift_y % 16, 0);
    EXPECT_LE(std::abs(p.shift_x), 0.15 * 224);
    EXPECT_LE(std::abs(p.shift_y), 0.15 * 448);
    flips += p.flip;
  }
  EXPECT_NEAR(double(flips) / params.size(), 0.5, 0.05);
}

TEST(SampleAugParams, ShorterListsArePrefixes) {
  Rng a(7), b(7);
  const auto shortl = sample_aug_params(a, 4, 0.15, 0.5, 8, 128, 128);
  const auto longl = sample_aug_params(b, 10, 0.15, 0.5, 8, 128, 128);
  for (std::size_t i = 0; i < shortl.size(); ++i) EXPECT_EQ(shortl[i], longl[i]);
}

TEST(Transform, IdentityLeavesEverythingUnchanged) {
  const Image img = pattern_image(16, 16);
  const auto coords = CoordGrid::identity(4, 4);
  const auto [out, c2] = transform(img, coords, {}, 4, {0.5f, 0.5f, 0.5f});
  EXPECT_EQ(out, img);
  EXPECT_EQ(c2.u, coords.u);
  EXPECT_EQ(c2.v, coords.v);
}

TEST(Transform, FlipIsAnInvolution) {
  const Image img = pattern_image(16, 12);
  const auto coords = CoordGrid::identity(4, 3);
  const AugmentationParams flip{0, 0, true};
  const auto [once, c1] = transform(img, coords, flip, 4, {0, 0, 0});
  const auto [twice, c2] = transform(once, c1, flip, 4, {0, 0, 0});
  EXPECT_NE(once, img);
  EXPECT_EQ(twice, img);
  EXPECT_EQ(c2.u, coords.u);
}

TEST(Transform, ShiftByOnePatchMovesColumns) {
  const std::size_t k = 4;
  const Image img = pattern_image(16, 16);
  const auto coords = CoordGrid::identity(4, 4);
  const auto [out, c2] = transform(img, coords, {int(k), 0, false}, k, {0.25f, 0.5f, 0.75f});
  for (std::size_t r = 0; r < 4; ++r) {
    EXPECT_FALSE(c2.valid(r, 0));
    for (std::size_t c = 1; c < 4; ++c) {
      ASSERT_TRUE(c2.valid(r, c));
      EXPECT_EQ(c2.source(r, c), std::make_pair(r, c - 1));
    }
  }
  for (std::size_t y = 0; y < 16; ++y) {
    EXPECT_EQ(out.at(y, 0, 0), 0.25f);
    EXPECT_EQ(out.at(y, 3, 2), 0.75f);
    for (std::size_t x = k; x < 16; ++x) EXPECT_EQ(out.at(y, x, 1), img.at(y, x - k, 1));
  }
}

TEST(Transform, ShiftThenFlipComposition) {
  const auto coords = CoordGrid::identity(2, 4);
  const auto c = transform_coords(coords, {4, 0, true}, 4);
  // Shift right by one token, then mirror: output column 3 - (c0 + 1) holds source c0.
  EXPECT_EQ(c.source(0, 2), (std::pair<std::size_t, std::size_t>{0, 0}));
  EXPECT_EQ(c.source(0, 0), (std::pair<std::size_t, std::size_t>{0, 2}));
  EXPECT_FALSE(c.valid(0, 3));
  EXPECT_THROW(transform_coords(coords, {3, 0, false}, 4), std::invalid_argument);
}

TEST(InverseRestore, IdentityIsExact) {
  const auto f = random_grid(4, 4, 5, 1);
  const auto placed = inverse_restore(f, CoordGrid::identity(4, 4));
  EXPECT_EQ(placed.features, f);
  for (auto m : placed.mask) EXPECT_EQ(m, 1);
}

TEST(InverseRestore, ShiftOverlapMatchesOriginal) {
  const std::size_t k = 4;
  const Image img = pattern_image(16, 16);
  const auto teacher = patch_mean_teacher(k);
  const auto base = CoordGrid::identity(4, 4);
  const auto clean = teacher(img);
  for (const AugmentationParams theta : {AugmentationParams{4, -8, false}, AugmentationParams{-4, 4, true},
                                         AugmentationParams{0, 0, true}}) {
    const auto [view, coords] = transform(img, base, theta, k, {0.5f, 0.5f, 0.5f});
    const auto placed = inverse_restore(teacher(view), coords);
    std::size_t written = 0;
    for (std::size_t t = 0; t < 16; ++t) {
      if (!placed.mask[t]) continue;
      ++written;
      for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(placed.features.values[t * 3 + j], clean.values[t * 3 + j], 1e-6);
    }
    const std::size_t expect_cols = 4 - std::abs(theta.shift_x) / 4, expect_rows = 4 - std::abs(theta.shift_y) / 4;
    EXPECT_EQ(written, expect_rows * expect_cols);
  }
}

TEST(InverseRestore, DuplicateTargetIsAnInternalError) {
  auto coords = CoordGrid::identity(2, 2);
  coords.u[1] = coords.u[0];
  coords.v[1] = coords.v[0];
  EXPECT_THROW(inverse_restore(random_grid(2, 2, 1, 1), coords), std::logic_error);
}

TEST(Accumulate, SingleAndPairwiseMeans) {
  const auto a = random_grid(3, 3, 4, 1), b = random_grid(3, 3, 4, 2);
  const std::vector<std::uint8_t> all(9, 1);
  const auto one = accumulate_mean({{a, all}});
  EXPECT_EQ(one.values, a.values);
  EXPECT_EQ(one.coverage, std::vector<std::int32_t>(9, 1));
  const auto two = accumulate_mean({{a, all}, {b, all}});
  for (std::size_t i = 0; i < a.values.size(); ++i) EXPECT_FLOAT_EQ(two.values[i], (a.values[i] + b.values[i]) / 2);
}

TEST(Accumulate, UncoveredLocationIsRejected) {
  auto mask = std::vector<std::uint8_t>(4, 1);
  mask[2] = 0;
  EXPECT_THROW(accumulate_mean({{random_grid(2, 2, 1, 1), mask}}), std::runtime_error);
  EXPECT_THROW(accumulate_mean({}), std::invalid_argument);
}

TEST(Accumulate, MatchesBruteForcePerLocationMean) {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 1 + rng() % 8, cols = 1 + rng() % 8, dim = 1 + rng() % 16, n = 1 + rng() % 12;
    std::vector<PlacedFeatures> views;
    for (std::size_t i = 0; i < n; ++i) {
      PlacedFeatures p{random_grid(rows, cols, dim, rng()), std::vector<std::uint8_t>(rows * cols, 1)};
      if (i > 0)
        for (auto& m : p.mask) m = rng() % 3 != 0;
      views.push_back(std::move(p));
    }
    const auto out = accumulate_mean(views);
    for (std::size_t t = 0; t < rows * cols; ++t) {
      int count = 0;
      for (const auto& v : views) count += v.mask[t];
      EXPECT_EQ(out.coverage[t], count);
      for (std::size_t j = 0; j < dim; ++j) {
        double s = 0.0;
        for (const auto& v : views)
          if (v.mask[t]) s += v.features.values[t * dim + j];
        const double expect = s / count;
        EXPECT_LE(std::abs(out.values[t * dim + j] - expect), 1e-6 * std::max(1.0, std::abs(expect)));
      }
    }
  }
}

TEST(MeanMinimizer, MeanBeatsPerturbationsAndHasZeroGradient) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t count = 2 + rng() % 10, dim = 1 + rng() % 16;
    std::vector<std::vector<double>> f(count, std::vector<double>(dim));
    for (auto& v : f)
      for (auto& x : v) x = n(rng);
    std::vector<double> mean(dim, 0.0);
    for (const auto& v : f)
      for (std::size_t j = 0; j < dim; ++j) mean[j] += v[j] / double(count);
    auto objective = [&](const std::vector<double>& c) {
      double s = 0.0;
      for (const auto& v : f)
        for (std::size_t j = 0; j < dim; ++j) s += (v[j] - c[j]) * (v[j] - c[j]);
      return s;
    };
    const double at_mean = objective(mean);
    for (int p = 0; p < 1000; ++p) {
      auto c = mean;
      for (auto& x : c) x += 0.1 * n(rng);
      EXPECT_LE(at_mean, objective(c));
    }
    double g2 = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      double g = 0.0;
      for (const auto& v : f) g += 2.0 * (mean[j] - v[j]);
      g2 += g * g;
    }
    EXPECT_LT(std::sqrt(g2), 1e-6);
  }
}

TEST(Denoise, SingleViewIsBitIdenticalToTeacher) {
  const Image img = pattern_image(32, 32);
  const auto teacher = patch_mean_teacher(8);
  TtaConfig cfg;
  cfg.num_views = 1;
  Rng rng(3);
  auto out = denoise(teacher, img, 8, cfg, rng);
  EXPECT_EQ(out.values, teacher(img).values);
  EXPECT_EQ(out.coverage, std::vector<std::int32_t>(16, 1));
}

TEST(Denoise, EquivariantTeacherIsReproducedOnCoveredCenter) {
  const std::size_t k = 8;
  const Image img = pattern_image(64, 64);
  const auto teacher = patch_mean_teacher(k);
  const auto clean = teacher(img);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const auto out = denoise(teacher, img, k, TtaConfig{}, rng);
    for (std::size_t i = 0; i < out.values.size(); ++i) EXPECT_NEAR(out.values[i], clean.values[i], 1e-5);
  }
}

TEST(Denoise, CoverageRangeIsOneToN) {
  const Image img = pattern_image(64, 64);
  for (std::size_t n : {1, 2, 5, 10}) {
    TtaConfig cfg;
    cfg.num_views = n;
    cfg.max_shift_frac = 0.3;
    Rng rng(n);
    const auto out = denoise(patch_mean_teacher(8), img, 8, cfg, rng);
    EXPECT_EQ(*std::min_element(out.coverage.begin(), out.coverage.end()) >= 1, true);
    EXPECT_LE(*std::max_element(out.coverage.begin(), out.coverage.end()), int(n));
    // The identity view covers everything, and unshifted views cover the centre.
    EXPECT_GE(*std::max_element(out.coverage.begin(), out.coverage.end()), 1);
  }
}

TEST(Denoise, PrecomputedViewsMatchImageMode) {
  const Image img = pattern_image(32, 32);
  const auto teacher = patch_mean_teacher(8);
  Rng rng(9);
  const auto params = sample_aug_params(rng, 6, 0.25, 0.5, 8, 32, 32);
  std::vector<FeatureGrid> views;
  const auto base = CoordGrid::identity(4, 4);
  for (const auto& p : params) views.push_back(teacher(transform(img, base, p, 8, {0.5f, 0.5f, 0.5f}).first));
  EXPECT_EQ(denoise_precomputed(views, params, 8), denoise_with_params(teacher, img, params, 8, {0.5f, 0.5f, 0.5f}));
  EXPECT_THROW(denoise_precomputed(views, {params[0]}, 8), std::invalid_argument);
}

TEST(Denoise, WhitePadModeUsesWhite) {
  TtaConfig cfg;
  cfg.pad_mode = PadMode::white;
  EXPECT_EQ(cfg.pad_color(), (std::array<float, 3>{1, 1, 1}));
  cfg.pad_mode = PadMode::mean_color;
  EXPECT_EQ(cfg.pad_color(), cfg.mean_color);
}

TEST(Denoise, GridAnchoredArtifactsAttenuateWithDistinctViews) {
  const std::size_t k = 8;
  const auto clean = patch_mean_teacher(k);
  const std::vector<AugmentationParams> pool{{}, {8, 0, false}, {0, -8, false}, {0, 0, true}, {-8, 8, true}, {16, 8, false}};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SceneSpec spec;
    spec.height = spec.width = 64;
    spec.patch_size = k;
    spec.prototype_dim = 3;
    spec.num_classes = 3;
    spec.seed = seed;
    const Image img = gen_scene(spec).image;
    ArtifactSpec art;
    art.seed = seed;
    const FeatureFn noisy = [&](const Image& im) { return inject_artifacts(clean(im), art); };
    const std::vector<std::uint8_t> all(64, 1);
    const double raw = artifact_energy(noisy(img), clean(img), all);
    for (std::size_t n = 2; n <= pool.size(); ++n) {
      const std::vector<AugmentationParams> views(pool.begin(), pool.begin() + std::ptrdiff_t(n));
      const double e = artifact_energy(denoise_with_params(noisy, img, views, k, {0.5f, 0.5f, 0.5f}),
                                       denoise_with_params(clean, img, views, k, {0.5f, 0.5f, 0.5f}), all);
      EXPECT_LT(e, raw) << "seed " << seed << " n " << n;
    }
  }
}
