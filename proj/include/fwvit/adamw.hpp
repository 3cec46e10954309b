#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fwvit/tensor.hpp"

namespace fwvit {

struct AdamWOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Decoupled weight decay: the decay shrinks the parameter directly and is
// never mixed into the moment estimates.
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(AdamWOptions options) : options_(options) {}

  // Moments are keyed by position in `params`; callers must pass the same
  // parameter list (same order) on every step.
  void step(std::span<Tensor> params);
  void reset();

  const AdamWOptions& options() const noexcept { return options_; }
  void set_lr(double lr) { options_.lr = lr; }
  std::int64_t steps() const noexcept { return t_; }

  // Exposed for checkpointing.
  std::vector<std::vector<float>>& first_moments() { return m_; }
  std::vector<std::vector<float>>& second_moments() { return v_; }
  const std::vector<std::vector<float>>& first_moments() const { return m_; }
  const std::vector<std::vector<float>>& second_moments() const { return v_; }
  void restore(std::int64_t t, std::vector<std::vector<float>> m, std::vector<std::vector<float>> v);

 private:
  AdamWOptions options_;
  std::int64_t t_ = 0;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
};

}  // namespace fwvit
