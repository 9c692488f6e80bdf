#ifndef DDRN_RNG_HPP_
#define DDRN_RNG_HPP_

#include <cstdint>
#include <random>
#include <string_view>

namespace ddrn {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Named sub-seed of a master seed ("data", "init", "gumbel", "erasing", ...).
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(master ^ splitmix64(h));
}

/// Uniform draw in the open interval (0, 1).
inline double uniform_open(Rng& rng) {
  constexpr double kScale = 1.0 / 9007199254740992.0;  // 2^-53
  std::uint64_t bits = rng() >> 11;
  return (static_cast<double>(bits) + 0.5) * kScale;
}

}  // namespace ddrn

#endif  // DDRN_RNG_HPP_
