#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "phreg/bench.hpp"
#include "phreg/distill.hpp"
#include "phreg/vit.hpp"

namespace phreg {

inline constexpr int kConfigSchemaVersion = 1;

/// Size of the generated benchmark split.
struct BenchConfig {
  std::size_t num_train = 32;
  std::size_t num_test = 8;
  bool operator==(const BenchConfig&) const = default;
};

/// Everything a run depends on. Serialized as JSON; unknown keys are errors.
struct RunConfig {
  std::uint64_t seed = 0;
  ViTConfig vit;
  DistillConfig distill;
  ArtifactSpec artifact;
  SceneSpec scene;
  BenchConfig bench;

  /// Canonical JSON text: sorted keys, no whitespace.
  std::string canonical() const;
  /// FNV-1a 64 of the canonical text.
  std::uint64_t hash() const;
  std::string to_json(int indent = 2) const;

  static RunConfig from_json(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  /// Cross-field checks: scene and model agree on patch size, prototypes fit the embedding.
  void validate() const;
};

/// A small configuration that trains in seconds; used by tests and the acceptance suite.
RunConfig desk_preset();

std::string hash_hex(std::uint64_t hash);

}  // namespace phreg
