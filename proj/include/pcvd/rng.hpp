#pragma once

#include <cstdint>
#include <initializer_list>

namespace pcvd {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and a path of labels.
template <typename... Ts>
std::uint64_t mix_seed(std::uint64_t seed, Ts... labels) {
  std::uint64_t h = splitmix64(seed);
  for (std::uint64_t l : std::initializer_list<std::uint64_t>{static_cast<std::uint64_t>(labels)...})
    h = splitmix64(h ^ splitmix64(l));
  return h;
}

}  // namespace pcvd
