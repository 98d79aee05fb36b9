#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace tsfuse {

// 64-bit FNV-1a. Used for seeding sub-streams, hashing toy texts and config
// digests, so its output must never change.
std::uint64_t fnv1a64(std::string_view text, std::uint64_t basis = 0xcbf29ce484222325ull);
std::uint64_t splitmix64(std::uint64_t x);

// Seed of a named sub-stream ("data", "init", "shuffle", ...) of a root seed.
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream);

// Portable generator: the engine is fully specified by the standard and the
// distributions below are implemented here, so draws match across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t root, std::string_view stream) : engine_(derive_seed(root, stream)) {}

  std::uint64_t next() { return engine_(); }
  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  // Uniform integer in [lo, hi].
  std::int64_t between(std::int64_t lo, std::int64_t hi);
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace tsfuse
