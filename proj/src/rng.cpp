#include "phreg/rng.hpp"

namespace phreg {

namespace {
std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t derive_seed(std::uint64_t run_seed, std::string_view purpose, std::uint64_t a,
                          std::uint64_t b) {
  std::uint64_t s = splitmix64(run_seed);
  s = splitmix64(s ^ fnv1a64(purpose));
  s = splitmix64(s ^ a);
  return splitmix64(s ^ (b * 0x9e3779b97f4a7c15ULL));
}

}  // namespace phreg
