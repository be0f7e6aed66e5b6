#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace cltlab {

using Engine = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Derives an independent stream seed from a master seed and a path of stream
// labels, e.g. derive_seed(master, {grid_index, rep}). The mapping depends only
// on its arguments, so work can be split across threads in any order.
inline std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> path) {
  std::uint64_t state = master;
  std::uint64_t out = splitmix64(state);
  for (std::uint64_t label : path) {
    state = out ^ (label * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL);
    out = splitmix64(state);
  }
  return out;
}

inline Engine make_engine(std::uint64_t master, std::initializer_list<std::uint64_t> path = {}) {
  return Engine(derive_seed(master, path));
}

// Uniform on [0, 1) with 53 random bits.
inline double uniform01(Engine& eng) {
  return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

// Uniform on (0, 1]; safe for log and negative powers.
inline double uniform_open0(Engine& eng) { return 1.0 - uniform01(eng); }

}  // namespace cltlab
