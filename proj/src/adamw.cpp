#include "fwvit/adamw.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace fwvit {

void AdamW::step(std::span<Tensor> params) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].numel(), 0.0f);
      v_[i].assign(params[i].numel(), 0.0f);
    }
  }
  if (m_.size() != params.size()) {
    throw std::invalid_argument("adamw: parameter list changed size (" + std::to_string(m_.size()) +
                                " -> " + std::to_string(params.size()) + ")");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) {
      throw std::invalid_argument("adamw: missing gradient for trainable parameter #" +
                                  std::to_string(i) + " " + shape_str(params[i].shape()));
    }
    if (m_[i].size() != params[i].numel()) {
      throw ShapeError("adamw: moment shape does not match parameter #" + std::to_string(i));
    }
  }

  ++t_;
  const double lr = options_.lr;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const double decay = 1.0 - lr * options_.weight_decay;

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].data();
    auto g = params[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      const double mj = b1 * m[j] + (1.0 - b1) * gj;
      const double vj = b2 * v[j] + (1.0 - b2) * gj * gj;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double update = (mj / bc1) / (std::sqrt(vj / bc2) + options_.eps);
      w[j] = static_cast<float>(w[j] * decay - lr * update);
    }
  }
}

void AdamW::reset() {
  t_ = 0;
  m_.clear();
  v_.clear();
}

void AdamW::restore(std::int64_t t, std::vector<std::vector<float>> m,
                    std::vector<std::vector<float>> v) {
  if (m.size() != v.size()) throw std::invalid_argument("adamw: moment lists differ in length");
  t_ = t;
  m_ = std::move(m);
  v_ = std::move(v);
}

}  // namespace fwvit
