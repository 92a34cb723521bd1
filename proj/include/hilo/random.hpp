#pragma once

#include <cstdint>
#include <random>

#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_01.hpp>
#include <boost/random/uniform_int_distribution.hpp>

namespace hilo {

// std::mt19937_64 is fully specified by the standard; the boost distributions
// below are used instead of <random>'s so draws are identical across
// standard-library implementations.
using Rng = std::mt19937_64;

// SplitMix64 finalizer. Used to derive independent per-stream seeds (per
// subject, per trial) so that replays never depend on how many numbers an
// earlier stage consumed.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return mix_seed(mix_seed(base) ^ mix_seed(stream + 0x632be59bd9b4e019ULL));
}

inline double uniform01(Rng& rng) { return boost::random::uniform_01<double>{}(rng); }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

inline double standard_normal(Rng& rng) {
  return boost::random::normal_distribution<double>{0.0, 1.0}(rng);
}

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return boost::random::uniform_int_distribution<std::size_t>{0, n - 1}(rng);
}

inline bool coin_flip(Rng& rng) { return uniform01(rng) < 0.5; }

}  // namespace hilo
