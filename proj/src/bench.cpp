#include "phreg/bench.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

#include "phreg/rng.hpp"

namespace phreg {

std::vector<std::array<float, 3>> class_palette(std::size_t num_classes, std::uint64_t palette_seed) {
  Rng rng = make_stream(palette_seed, "bench.palette");
  std::uniform_int_distribution<int> level(0, 255);
  std::vector<std::array<float, 3>> colors(num_classes);
  for (auto& c : colors)
    for (auto& ch : c) ch = static_cast<float>(level(rng)) / 255.0f;
  return colors;
}

std::vector<std::vector<float>> class_prototypes(std::size_t num_classes, std::size_t dim,
                                                 std::uint64_t palette_seed) {
  if (num_classes > dim)
    throw std::invalid_argument("cannot build " + std::to_string(num_classes) +
                                " orthonormal prototypes in dimension " + std::to_string(dim));
  Rng rng = make_stream(palette_seed, "bench.prototypes");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> basis;
  while (basis.size() < num_classes) {
    std::vector<double> v(dim);
    for (auto& x : v) x = normal(rng);
    // Modified Gram-Schmidt, twice for numerical orthogonality.
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& b : basis) {
        const double dot = std::inner_product(v.begin(), v.end(), b.begin(), 0.0);
        for (std::size_t i = 0; i < dim; ++i) v[i] -= dot * b[i];
      }
    const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    if (norm < 1e-6) continue;
    for (auto& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  std::vector<std::vector<float>> out;
  for (const auto& b : basis) out.emplace_back(b.begin(), b.end());
  return out;
}

Scene gen_scene(const SceneSpec& spec) {
  const std::size_t k = spec.patch_size;
  if (k == 0 || spec.height % k || spec.width % k)
    throw std::invalid_argument("scene extents must be divisible by the patch size");
  if (spec.num_classes == 0) throw std::invalid_argument("scene needs at least the background class");
  if (spec.num_shapes > 0 && spec.kinds.empty()) throw std::invalid_argument("scene has shapes but no shape kinds");
  Scene scene;
  scene.prototypes = class_prototypes(spec.num_classes, spec.prototype_dim, spec.palette_seed);
  const auto palette = class_palette(spec.num_classes, spec.palette_seed);
  const std::size_t h = spec.height, w = spec.width;
  std::vector<std::int32_t> pixel_class(h * w, 0);

  Rng rng = make_stream(spec.seed, "bench.scene");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t s = 0; s < spec.num_shapes && spec.num_classes > 1; ++s) {
    const auto kind = spec.kinds[static_cast<std::size_t>(unit(rng) * spec.kinds.size()) % spec.kinds.size()];
    const auto cls = static_cast<std::int32_t>(
        1 + static_cast<std::size_t>(unit(rng) * (spec.num_classes - 1)) % (spec.num_classes - 1));
    const double cy = unit(rng) * h, cx = unit(rng) * w;
    const double ry = (0.15 + 0.25 * unit(rng)) * h, rx = (0.15 + 0.25 * unit(rng)) * w;
    const bool vertical = unit(rng) < 0.5;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double py = y + 0.5, px = x + 0.5;
        bool inside = false;
        switch (kind) {
          case ShapeKind::rectangle:
            inside = std::abs(py - cy) <= ry && std::abs(px - cx) <= rx;
            break;
          case ShapeKind::disk: {
            const double r = std::min(ry, rx);
            inside = (py - cy) * (py - cy) + (px - cx) * (px - cx) <= r * r;
            break;
          }
          case ShapeKind::stripe:
            inside = vertical ? std::abs(px - cx) <= 0.3 * rx : std::abs(py - cy) <= 0.3 * ry;
            break;
        }
        if (inside) pixel_class[y * w + x] = cls;
      }
  }

  scene.image = Image(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) scene.image.at(y, x, c) = palette[pixel_class[y * w + x]][c];

  scene.rows = h / k;
  scene.cols = w / k;
  scene.labels.assign(scene.rows * scene.cols, 0);
  std::vector<std::size_t> votes(spec.num_classes);
  for (std::size_t r = 0; r < scene.rows; ++r)
    for (std::size_t c = 0; c < scene.cols; ++c) {
      std::fill(votes.begin(), votes.end(), 0);
      for (std::size_t y = 0; y < k; ++y)
        for (std::size_t x = 0; x < k; ++x) ++votes[pixel_class[(r * k + y) * w + c * k + x]];
      // max_element keeps the first maximum, so ties go to the lower class index.
      scene.labels[r * scene.cols + c] =
          static_cast<std::int32_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
    }
  return scene;
}

FeatureGrid prototype_features(const Scene& scene) {
  const std::size_t dim = scene.prototypes.empty() ? 0 : scene.prototypes.front().size();
  FeatureGrid g(scene.rows, scene.cols, dim);
  for (std::size_t t = 0; t < scene.labels.size(); ++t) {
    const auto& p = scene.prototypes.at(static_cast<std::size_t>(scene.labels[t]));
    std::copy(p.begin(), p.end(), g.values.begin() + static_cast<std::ptrdiff_t>(t * dim));
  }
  return g;
}

const char* to_string(ArtifactMode mode) { return mode == ArtifactMode::high_norm ? "high_norm" : "low_norm"; }

ArtifactMode artifact_mode_from_string(const std::string& name) {
  if (name == "high_norm") return ArtifactMode::high_norm;
  if (name == "low_norm") return ArtifactMode::low_norm;
  throw std::invalid_argument("unknown artifact mode '" + name + "' (expected high_norm or low_norm)");
}

std::vector<std::uint8_t> artifact_positions(const ArtifactSpec& spec, std::size_t rows, std::size_t cols) {
  Rng rng = make_stream(spec.seed, "artifact.positions", rows, cols);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::uint8_t> hit(rows * cols, 0);
  std::vector<double> draws(rows * cols);
  for (std::size_t t = 0; t < hit.size(); ++t) {
    draws[t] = unit(rng);
    hit[t] = draws[t] < spec.density;
  }
  if (std::none_of(hit.begin(), hit.end(), [](auto v) { return v != 0; }) && !hit.empty())
    hit[static_cast<std::size_t>(std::min_element(draws.begin(), draws.end()) - draws.begin())] = 1;
  return hit;
}

namespace {

// Fixed unit directions per grid position (or one shared direction when not zero-mean).
std::vector<std::vector<float>> artifact_directions(const ArtifactSpec& spec, std::size_t rows,
                                                    std::size_t cols, std::size_t dim) {
  Rng rng = make_stream(spec.seed, "artifact.vectors", rows * cols, dim);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw = [&] {
    std::vector<double> v(dim);
    double n2 = 0.0;
    for (auto& x : v) {
      x = normal(rng);
      n2 += x * x;
    }
    const double inv = 1.0 / std::sqrt(n2);
    std::vector<float> out(dim);
    for (std::size_t i = 0; i < dim; ++i) out[i] = static_cast<float>(v[i] * inv);
    return out;
  };
  std::vector<std::vector<float>> dirs;
  if (spec.zero_mean) {
    for (std::size_t t = 0; t < rows * cols; ++t) dirs.push_back(draw());
  } else {
    dirs.assign(rows * cols, draw());
  }
  return dirs;
}

}  // namespace

FeatureGrid inject_artifacts(const FeatureGrid& features, const ArtifactSpec& spec) {
  if (spec.amplitude == 0.0) return features;
  const auto hit = artifact_positions(spec, features.rows, features.cols);
  const auto dirs = artifact_directions(spec, features.rows, features.cols, features.dim);
  double mean_norm = 0.0;
  for (std::size_t t = 0; t < features.tokens(); ++t) {
    double n2 = 0.0;
    for (float x : features.token(t)) n2 += double(x) * x;
    mean_norm += std::sqrt(n2);
  }
  mean_norm /= static_cast<double>(std::max<std::size_t>(1, features.tokens()));

  FeatureGrid out = features;
  for (std::size_t t = 0; t < features.tokens(); ++t) {
    if (!hit[t]) continue;
    float* tok = out.values.data() + t * out.dim;
    if (spec.mode == ArtifactMode::high_norm) {
      const auto scale = static_cast<float>(spec.amplitude * mean_norm);
      for (std::size_t j = 0; j < out.dim; ++j) tok[j] += scale * dirs[t][j];
    } else {
      const auto shrink = static_cast<float>(1.0 / (1.0 + spec.amplitude));
      const auto jitter = static_cast<float>(0.1 * mean_norm / (1.0 + spec.amplitude));
      for (std::size_t j = 0; j < out.dim; ++j) tok[j] = tok[j] * shrink + jitter * dirs[t][j];
    }
  }
  return out;
}

FeatureFn noisy_teacher(const Model& clean, const ArtifactSpec& spec) {
  // The teacher owns a private copy of the weights, so student training cannot touch it.
  auto frozen = std::make_shared<const Model>(clean.clone());
  return [frozen, spec](const Image& image) { return inject_artifacts(forward_features(*frozen, image), spec); };
}

double artifact_energy(const FeatureGrid& noisy, const FeatureGrid& clean,
                       const std::vector<std::uint8_t>& positions) {
  if (!noisy.same_extents(clean)) throw std::invalid_argument("artifact_energy: extents differ");
  double e = 0.0;
  for (std::size_t t = 0; t < noisy.tokens(); ++t) {
    if (!positions[t]) continue;
    for (std::size_t j = 0; j < noisy.dim; ++j) {
      const double d = double(noisy.values[t * noisy.dim + j]) - clean.values[t * clean.dim + j];
      e += d * d;
    }
  }
  return e;
}

}  // namespace phreg
