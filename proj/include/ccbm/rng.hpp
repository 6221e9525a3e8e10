#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>

namespace ccbm {

/// mt19937_64 with portable draws (no std:: distributions, whose output is
/// library-specific), so traces are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);
  /// Standard Gumbel variate.
  double gumbel();
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  std::string state() const;
  void restore(const std::string& state);

 private:
  std::mt19937_64 engine_;
};

}  // namespace ccbm
