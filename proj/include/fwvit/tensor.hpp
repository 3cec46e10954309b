#pragma once

// Dense float32 tensors with a reverse-mode autograd graph.
//
// A Tensor is a cheap handle onto shared storage. Operations invoked while
// gradient recording is enabled attach a Node to their result; backward()
// walks those nodes once and then releases them (the tape is consumed, so a
// second backward() on the same loss throws).

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fwvit {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class AutogradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct TensorImpl;

struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Receives the finished output (value and grad) and accumulates into inputs.
  std::function<void(const TensorImpl& out)> backward;
  bool consumed = false;
};

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> node;

  void accumulate_grad(std::span<const float> g);
  std::vector<float>& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0f); }
  static Tensor scalar(float v) { return Tensor(Shape{1}, v); }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<float> values) {
    return Tensor(Shape{rows, cols}, std::move(values));
  }

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const;

  std::span<float> data();
  std::span<const float> data() const;
  float item() const;
  float at(std::size_t i) const { return data()[i]; }
  float at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const float> grad() const;
  std::span<float> mutable_grad();
  void zero_grad();

  // Non-null when this tensor was produced by a recorded operation.
  bool has_node() const { return impl_ && impl_->node != nullptr; }

  void backward() const;

  // Same values, no graph, no grad, fresh storage.
  Tensor detach() const;
  // Overwrites values in place; shapes must match. Drops nothing else.
  void copy_from(const Tensor& other);

  TensorImpl* impl() const noexcept { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& shared_impl() const noexcept { return impl_; }

 private:
  friend Tensor make_result(Shape, std::vector<float>, std::vector<Tensor>,
                            std::function<void(const TensorImpl&)>);
  std::shared_ptr<TensorImpl> impl_;
};

// Builds an op output; attaches a graph node iff recording is on and some
// input requires grad.
Tensor make_result(Shape shape, std::vector<float> values, std::vector<Tensor> inputs,
                   std::function<void(const TensorImpl&)> backward);

bool grad_enabled() noexcept;

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool all_finite(const Tensor& t);
bool bit_equal(const Tensor& a, const Tensor& b);

}  // namespace fwvit
