#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "phreg/image.hpp"
#include "phreg/vit.hpp"

namespace phreg {

enum class ShapeKind { rectangle, disk, stripe };

struct SceneSpec {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t patch_size = 8;
  std::size_t num_shapes = 4;
  std::vector<ShapeKind> kinds{ShapeKind::rectangle, ShapeKind::disk, ShapeKind::stripe};
  std::size_t num_classes = 4;  // including background = 0
  std::size_t prototype_dim = 64;
  std::uint64_t palette_seed = 0;  // class colors and prototypes, shared across scenes
  std::uint64_t seed = 0;          // layout of this scene
};

struct Scene {
  Image image;
  std::size_t rows = 0, cols = 0;
  std::vector<std::int32_t> labels;           // rows * cols, patch-majority class
  std::vector<std::vector<float>> prototypes;  // class -> unit vector, mutually orthonormal
};

/// Per-class RGB colors, quantized to 1/255 so 8-bit image files round-trip exactly.
std::vector<std::array<float, 3>> class_palette(std::size_t num_classes, std::uint64_t palette_seed);

/// Orthonormal query prototypes, one per class; rejects num_classes > dim.
std::vector<std::vector<float>> class_prototypes(std::size_t num_classes, std::size_t dim,
                                                 std::uint64_t palette_seed);

Scene gen_scene(const SceneSpec& spec);

/// Feature grid whose token at p is the prototype of p's label.
FeatureGrid prototype_features(const Scene& scene);

enum class ArtifactMode { high_norm, low_norm };

const char* to_string(ArtifactMode mode);
ArtifactMode artifact_mode_from_string(const std::string& name);

struct ArtifactSpec {
  ArtifactMode mode = ArtifactMode::high_norm;
  double density = 0.1;
  double amplitude = 2.0;
  bool zero_mean = true;  // isotropic per-position directions; otherwise one shared direction
  std::uint64_t seed = 0;
};

/// Token-grid positions hit by the artifact; a function of (seed, rows, cols) only.
std::vector<std::uint8_t> artifact_positions(const ArtifactSpec& spec, std::size_t rows, std::size_t cols);

FeatureGrid inject_artifacts(const FeatureGrid& features, const ArtifactSpec& spec);

/// Frozen teacher: clean forward followed by grid-anchored artifact injection.
FeatureFn noisy_teacher(const Model& clean, const ArtifactSpec& spec);

/// Sum over affected positions of |noisy - clean|^2.
double artifact_energy(const FeatureGrid& noisy, const FeatureGrid& clean,
                       const std::vector<std::uint8_t>& positions);

}  // namespace phreg
