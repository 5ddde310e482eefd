#pragma once

#include <cstdint>

#include <boost/random/mersenne_twister.hpp>
#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_int_distribution.hpp>
#include <boost/random/uniform_real_distribution.hpp>

namespace ensemble {

// Boost distributions are specified algorithmically, so streams are identical
// across standard libraries (std:: distributions are not).
using Rng = boost::random::mt19937_64;

/// Derives an independent stream seed from a parent seed and a stream id (splitmix64 finalizer).
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) { return Rng(derive_seed(seed, stream)); }

inline double uniform(Rng& rng, double lo = 0.0, double hi = 1.0) {
  if (!(hi > lo)) return lo;  // boost rejects until x < hi, which never happens on an empty range
  return boost::random::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double normal(Rng& rng, double mean = 0.0, double sd = 1.0) {
  return boost::random::normal_distribution<double>(mean, sd)(rng);
}

inline std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi) {
  return boost::random::uniform_int_distribution<std::int64_t>(lo, hi)(rng);
}

inline bool bernoulli(Rng& rng, double p) { return uniform(rng) < p; }

}  // namespace ensemble
