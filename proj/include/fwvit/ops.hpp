#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fwvit/tensor.hpp"

namespace fwvit::ops {

// a[m x k] . b[k x n]
Tensor matmul(const Tensor& a, const Tensor& b);
// a[m x k] . b[n x k]^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
// Adds v[n] to every last-dimension slice of a[..., n].
Tensor add_rowvec(const Tensor& a, const Tensor& v);

Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
// a[1 x n] -> [count x n]
Tensor repeat_rows(const Tensor& a, std::size_t count);
// out.flat[i] = a.flat[index[i]]; backward scatters.
Tensor gather(const Tensor& a, std::span<const std::size_t> index, Shape shape);

Tensor softmax_lastdim(const Tensor& t);
Tensor layer_norm(const Tensor& t, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);
Tensor gelu(const Tensor& t);
Tensor square(const Tensor& t);
Tensor abs(const Tensor& t);

Tensor sum(const Tensor& t);
Tensor mean(const Tensor& t);

// tanh-approximation GELU on a single value (shared by forward and tests).
double gelu_value(double x);

}  // namespace fwvit::ops
