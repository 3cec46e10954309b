#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

namespace fwvit {

// SplitMix64. Portable and fully specified by its constants, so identical
// seeds produce identical streams on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64();
  // 53-bit uniform in [0,1).
  double uniform();
  // 24-bit uniform in [0,1), exactly representable as float.
  float uniform_float();
  std::vector<float> uniform_floats(std::size_t n);
  // Uniform integer in [0, bound) by rejection (no modulo bias).
  std::uint64_t below(std::uint64_t bound);
  double normal();
  // Normal(mean, std) resampled until within two standard deviations.
  double truncated_normal(double mean, double stddev);

  std::uint64_t state() const noexcept { return state_; }

 private:
  std::uint64_t state_;
};

// Keyed child seed so independent streams (init, train order, probe noise)
// never share draws.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view key);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                          std::uint64_t c = 0);

}  // namespace fwvit
