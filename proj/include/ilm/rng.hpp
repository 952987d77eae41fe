#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace ilm {

using Rng = std::mt19937_64;

// Independent generator for a named substream of a run seed ("data", "mf",
// "qformer-init", "backbone-init", "phase2", "eval", ...).
Rng make_rng(std::uint64_t seed, std::string_view stream);

std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

inline double normal(Rng& rng, double mean, double stddev) {
  return std::normal_distribution<double>(mean, stddev)(rng);
}

// Uniform integer in [0, n).
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

}  // namespace ilm
