#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace phreg {

using Rng = std::mt19937_64;

/// Derives an independent seed for a named purpose from the run seed, so every
/// consumer (augmentation, crop, init, ...) owns its own reproducible stream.
std::uint64_t derive_seed(std::uint64_t run_seed, std::string_view purpose, std::uint64_t a = 0,
                          std::uint64_t b = 0);

inline Rng make_stream(std::uint64_t run_seed, std::string_view purpose, std::uint64_t a = 0,
                       std::uint64_t b = 0) {
  return Rng(derive_seed(run_seed, purpose, a, b));
}

/// 64-bit FNV-1a; used for config digests and stream names.
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace phreg
