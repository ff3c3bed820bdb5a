#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace mecca {

/// Seeded random stream. Distributions are implemented here rather than via
/// <random>'s distribution classes so that sequences are identical across
/// standard library implementations, and the full state can be checkpointed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in the closed range [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  /// Standard normal (Box-Muller, no cached second variate).
  double normal();

  /// Child stream keyed by `key`; does not advance this stream.
  Rng derive(std::uint64_t key) const;

  std::string state() const;
  void set_state(const std::string& state);

  std::mt19937_64& engine() { return engine_; }

  friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

 private:
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace mecca
