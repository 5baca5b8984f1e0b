#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "phreg/bench.hpp"

using namespace phreg;

namespace {

ViTConfig small_vit() {
  ViTConfig c;
  c.image_height = c.image_width = 64;
  c.patch_size = 8;
  c.embed_dim = 32;
  c.depth = 2;
  c.heads = 4;
  return c;
}

SceneSpec small_scene(std::uint64_t seed) {
  SceneSpec s;
  s.prototype_dim = 32;
  s.seed = seed;
  return s;
}

std::vector<double> norms(const FeatureGrid& g) {
  std::vector<double> out;
  for (std::size_t t = 0; t < g.tokens(); ++t) {
    double s = 0.0;
    for (float v : g.token(t)) s += double(v) * v;
    out.push_back(std::sqrt(s));
  }
  return out;
}

// Nearest-rank percentile over ascending values.
double percentile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const auto rank = std::clamp<std::size_t>(std::size_t(std::ceil(p / 100.0 * double(v.size()) - 1e-9)), 1, v.size());
  return v[rank - 1];
}

}  // namespace

TEST(Scene, DeterministicPerSeed) {
  const auto a = gen_scene(small_scene(3)), b = gen_scene(small_scene(3)), c = gen_scene(small_scene(4));
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.image, c.image);
}

TEST(Scene, ZeroShapesIsAllBackground) {
  auto spec = small_scene(1);
  spec.num_shapes = 0;
  const auto s = gen_scene(spec);
  EXPECT_EQ(s.rows * s.cols, s.labels.size());
  for (auto l : s.labels) EXPECT_EQ(l, 0);
}

TEST(Scene, LabelsInRangeAndPaletteQuantized) {
  const auto s = gen_scene(small_scene(8));
  for (auto l : s.labels) {
    EXPECT_GE(l, 0);
    EXPECT_LT(l, 4);
  }
  for (const auto& rgb : class_palette(4, 0))
    for (float c : rgb) EXPECT_FLOAT_EQ(std::round(c * 255.0f) / 255.0f, c);
}

TEST(Scene, PrototypesAreOrthonormal) {
  const auto p = class_prototypes(6, 16, 2);
  for (std::size_t i = 0; i < p.size(); ++i)
    for (std::size_t j = 0; j < p.size(); ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < 16; ++k) dot += double(p[i][k]) * p[j][k];
      EXPECT_NEAR(dot, i == j ? 1.0 : 0.0, 1e-6);
    }
  EXPECT_THROW(class_prototypes(17, 16, 2), std::invalid_argument);
}

TEST(Scene, PrototypeFeaturesFollowLabels) {
  const auto s = gen_scene(small_scene(5));
  const auto f = prototype_features(s);
  for (std::size_t t = 0; t < f.tokens(); ++t) {
    const auto tok = f.token(t);
    EXPECT_TRUE(std::equal(tok.begin(), tok.end(), s.prototypes[s.labels[t]].begin()));
  }
}

TEST(Artifacts, AmplitudeZeroIsIdentity) {
  const auto f = prototype_features(gen_scene(small_scene(1)));
  ArtifactSpec spec;
  spec.amplitude = 0.0;
  EXPECT_EQ(inject_artifacts(f, spec), f);
}

TEST(Artifacts, PositionsAreGridAnchored) {
  ArtifactSpec spec;
  spec.seed = 11;
  const auto pos = artifact_positions(spec, 8, 8);
  EXPECT_EQ(pos, artifact_positions(spec, 8, 8));
  EXPECT_GE(std::count(pos.begin(), pos.end(), 1), 1);
  // Injection touches exactly these positions regardless of content.
  for (std::uint64_t scene : {1, 2}) {
    const auto f = prototype_features(gen_scene(small_scene(scene)));
    const auto g = inject_artifacts(f, spec);
    for (std::size_t t = 0; t < 64; ++t) {
      const bool changed = !std::equal(f.token(t).begin(), f.token(t).end(), g.token(t).begin());
      EXPECT_EQ(changed, bool(pos[t])) << t;
    }
  }
  spec.density = 0.0;
  const auto forced = artifact_positions(spec, 8, 8);
  EXPECT_EQ(std::count(forced.begin(), forced.end(), 1), 1);
}

TEST(Artifacts, HighNormExceedsUnaffected95thPercentile) {
  const auto model = Model::random(small_vit(), 1);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto clean = forward_features(model, gen_scene(small_scene(seed)).image);
    ArtifactSpec spec{ArtifactMode::high_norm, 0.1, 2.0, true, seed};
    const auto pos = artifact_positions(spec, clean.rows, clean.cols);
    const auto n = norms(inject_artifacts(clean, spec));
    std::vector<double> unaffected;
    for (std::size_t t = 0; t < n.size(); ++t)
      if (!pos[t]) unaffected.push_back(n[t]);
    const double p95 = percentile(unaffected, 95.0);
    for (std::size_t t = 0; t < n.size(); ++t)
      if (pos[t]) EXPECT_GT(n[t], p95) << "seed " << seed;
  }
}

TEST(Artifacts, LowNormBelowUnaffected5thPercentile) {
  const auto model = Model::random(small_vit(), 1);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto clean = forward_features(model, gen_scene(small_scene(seed)).image);
    ArtifactSpec spec{ArtifactMode::low_norm, 0.1, 2.0, true, seed};
    const auto pos = artifact_positions(spec, clean.rows, clean.cols);
    const auto n = norms(inject_artifacts(clean, spec));
    std::vector<double> unaffected;
    for (std::size_t t = 0; t < n.size(); ++t)
      if (!pos[t]) unaffected.push_back(n[t]);
    const double p5 = percentile(unaffected, 5.0);
    for (std::size_t t = 0; t < n.size(); ++t)
      if (pos[t]) EXPECT_LT(n[t], p5) << "seed " << seed;
  }
}

TEST(Artifacts, NoisyTeacherIsPureAndLeavesModelUntouched) {
  auto model = Model::random(small_vit(), 2);
  const auto before = model.clone();
  ArtifactSpec spec;
  spec.seed = 5;
  const auto teacher = noisy_teacher(model, spec);
  const auto img = gen_scene(small_scene(3)).image;
  const auto a = teacher(img);
  const float saved = model.pos_embed.at(0);
  model.pos_embed.mutable_data()[0] += 1.0f;
  EXPECT_EQ(a, teacher(img));
  model.pos_embed.mutable_data()[0] = saved;
  EXPECT_EQ(forward_features(model, img), forward_features(before, img));
  const auto clean = forward_features(before, img);
  EXPECT_GT(artifact_energy(a, clean, artifact_positions(spec, a.rows, a.cols)), 0.0);
}

TEST(Artifacts, ModeNamesRoundTrip) {
  for (auto m : {ArtifactMode::high_norm, ArtifactMode::low_norm})
    EXPECT_EQ(artifact_mode_from_string(to_string(m)), m);
  EXPECT_THROW(artifact_mode_from_string("medium"), std::invalid_argument);
}

TEST(ImageIo, PpmRoundTripIsExactForQuantizedImages) {
  const auto img = gen_scene(small_scene(9)).image;
  const auto path = std::filesystem::temp_directory_path() / "phreg_test_roundtrip.ppm";
  write_ppm(path, img);
  const auto back = read_ppm(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back, img);
}
