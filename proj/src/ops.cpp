#include "fwvit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace fwvit::ops {

namespace {

using ImplPtr = std::shared_ptr<TensorImpl>;

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// C[m x n] = A[m x k] . B[k x n]
std::vector<float> mm(const float* a, const float* b, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<float> c(m * n);
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const float* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const float* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * brow[j];
    }
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] = static_cast<float>(acc[j]);
  }
  return c;
}

// C[m x n] = A[m x k] . B[n x k]^T
std::vector<float> mm_nt(const float* a, const float* b, std::size_t m, std::size_t k,
                         std::size_t n) {
  std::vector<float> c(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const float* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += static_cast<double>(arow[p]) * brow[p];
      c[i * n + j] = static_cast<float>(s);
    }
  }
  return c;
}

// C[m x n] = A[k x m]^T . B[k x n]
std::vector<float> mm_tn(const float* a, const float* b, std::size_t k, std::size_t m,
                         std::size_t n) {
  std::vector<double> acc(m * n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const float* arow = a + p * m;
    const float* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = acc.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return {acc.begin(), acc.end()};
}

void accumulate(const ImplPtr& t, std::span<const float> g) {
  if (t->requires_grad) t->accumulate_grad(g);
}

}  // namespace

double gelu_value(double x) {
  constexpr double kSqrt2OverPi = 0.7978845608028654;
  constexpr double kCoeff = 0.044715;
  return 0.5 * x * (1.0 + std::tanh(kSqrt2OverPi * (x + kCoeff * x * x * x)));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  auto out = mm(a.data().data(), b.data().data(), m, k, n);
  ImplPtr ia = a.shared_impl(), ib = b.shared_impl();
  return make_result({m, n}, std::move(out), {a, b}, [ia, ib, m, k, n](const TensorImpl& o) {
    if (ia->requires_grad) ia->accumulate_grad(mm_nt(o.grad.data(), ib->data.data(), m, n, k));
    if (ib->requires_grad) ib->accumulate_grad(mm_tn(ia->data.data(), o.grad.data(), m, k, n));
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw ShapeError("matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  }
  auto out = mm_nt(a.data().data(), b.data().data(), m, k, n);
  ImplPtr ia = a.shared_impl(), ib = b.shared_impl();
  return make_result({m, n}, std::move(out), {a, b}, [ia, ib, m, k, n](const TensorImpl& o) {
    if (ia->requires_grad) ia->accumulate_grad(mm(o.grad.data(), ib->data.data(), m, n, k));
    if (ib->requires_grad) ib->accumulate_grad(mm_tn(o.grad.data(), ia->data.data(), m, n, k));
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<float> out(a.numel());
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
  ImplPtr ia = a.shared_impl(), ib = b.shared_impl();
  return make_result(a.shape(), std::move(out), {a, b}, [ia, ib](const TensorImpl& o) {
    accumulate(ia, o.grad);
    accumulate(ib, o.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<float> out(a.numel());
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[i];
  ImplPtr ia = a.shared_impl(), ib = b.shared_impl();
  return make_result(a.shape(), std::move(out), {a, b}, [ia, ib](const TensorImpl& o) {
    accumulate(ia, o.grad);
    if (ib->requires_grad) {
      auto& g = ib->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<float> out(a.numel());
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
  ImplPtr ia = a.shared_impl(), ib = b.shared_impl();
  return make_result(a.shape(), std::move(out), {a, b}, [ia, ib](const TensorImpl& o) {
    if (ia->requires_grad) {
      auto& g = ia->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * ib->data[i];
    }
    if (ib->requires_grad) {
      auto& g = ib->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * ia->data[i];
    }
  });
}

Tensor scale(const Tensor& a, float s) {
  std::vector<float> out(a.numel());
  auto da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * s;
  ImplPtr ia = a.shared_impl();
  return make_result(a.shape(), std::move(out), {a}, [ia, s](const TensorImpl& o) {
    auto& g = ia->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * s;
  });
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  const std::size_t n = a.shape().back();
  if (v.numel() != n) {
    throw ShapeError("add_rowvec: vector " + shape_str(v.shape()) + " does not match last dim of " +
                     shape_str(a.shape()));
  }
  const std::size_t rows = a.numel() / n;
  std::vector<float> out(a.numel());
  auto da = a.data(), dv = v.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = da[r * n + j] + dv[j];
  ImplPtr ia = a.shared_impl(), iv = v.shared_impl();
  return make_result(a.shape(), std::move(out), {a, v}, [ia, iv, rows, n](const TensorImpl& o) {
    accumulate(ia, o.grad);
    if (iv->requires_grad) {
      std::vector<double> acc(n, 0.0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) acc[j] += o.grad[r * n + j];
      auto& g = iv->grad_buffer();
      for (std::size_t j = 0; j < n; ++j) g[j] += static_cast<float>(acc[j]);
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<float> out(a.numel());
  auto da = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = da[i * n + j];
  ImplPtr ia = a.shared_impl();
  return make_result({n, m}, std::move(out), {a}, [ia, m, n](const TensorImpl& o) {
    auto& g = ia->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += o.grad[j * m + i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<float> out(a.data().begin(), a.data().end());
  ImplPtr ia = a.shared_impl();
  return make_result(std::move(shape), std::move(out), {a},
                     [ia](const TensorImpl& o) { ia->accumulate_grad(o.grad); });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank2(a, "slice_rows");
  if (begin >= end || end > a.dim(0)) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + shape_str(a.shape()));
  }
  const std::size_t n = a.dim(1);
  std::vector<float> out(a.data().begin() + begin * n, a.data().begin() + end * n);
  ImplPtr ia = a.shared_impl();
  return make_result({end - begin, n}, std::move(out), {a}, [ia, begin, n](const TensorImpl& o) {
    auto& g = ia->grad_buffer();
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[begin * n + i] += o.grad[i];
  });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank2(a, "slice_cols");
  if (begin >= end || end > a.dim(1)) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + shape_str(a.shape()));
  }
  const std::size_t m = a.dim(0), n = a.dim(1), w = end - begin;
  std::vector<float> out(m * w);
  auto da = a.data();
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(da.begin() + i * n + begin, w, out.begin() + i * w);
  ImplPtr ia = a.shared_impl();
  return make_result({m, w}, std::move(out), {a}, [ia, m, n, w, begin](const TensorImpl& o) {
    auto& g = ia->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) g[i * n + begin + j] += o.grad[i * w + j];
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t n = parts[0].shape().back();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.dim(1) != n) {
      throw ShapeError("concat_rows: column mismatch " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    rows += p.dim(0);
  }
  std::vector<float> out;
  out.reserve(rows * n);
  std::vector<ImplPtr> impls;
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
    impls.push_back(p.shared_impl());
  }
  return make_result({rows, n}, std::move(out), {parts.begin(), parts.end()},
                     [impls](const TensorImpl& o) {
                       std::size_t offset = 0;
                       for (const auto& p : impls) {
                         const std::size_t len = p->data.size();
                         if (p->requires_grad) {
                           p->accumulate_grad(std::span<const float>(o.grad).subspan(offset, len));
                         }
                         offset += len;
                       }
                     });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = parts[0].dim(0);
  std::size_t cols = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.dim(0) != m) {
      throw ShapeError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    widths.push_back(p.dim(1));
    cols += p.dim(1);
  }
  std::vector<float> out(m * cols);
  std::size_t offset = 0;
  std::vector<ImplPtr> impls;
  for (std::size_t t = 0; t < parts.size(); ++t) {
    auto d = parts[t].data();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(d.begin() + i * widths[t], widths[t], out.begin() + i * cols + offset);
    offset += widths[t];
    impls.push_back(parts[t].shared_impl());
  }
  return make_result({m, cols}, std::move(out), {parts.begin(), parts.end()},
                     [impls, widths, m, cols](const TensorImpl& o) {
                       std::size_t off = 0;
                       for (std::size_t t = 0; t < impls.size(); ++t) {
                         const std::size_t w = widths[t];
                         if (impls[t]->requires_grad) {
                           auto& g = impls[t]->grad_buffer();
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < w; ++j)
                               g[i * w + j] += o.grad[i * cols + off + j];
                         }
                         off += w;
                       }
                     });
}

Tensor repeat_rows(const Tensor& a, std::size_t count) {
  if (a.rank() != 2 || a.dim(0) != 1) {
    throw ShapeError("repeat_rows: expected a [1 x n] row, got " + shape_str(a.shape()));
  }
  if (count == 0) throw ShapeError("repeat_rows: count must be positive");
  const std::size_t n = a.dim(1);
  std::vector<float> out;
  out.reserve(count * n);
  for (std::size_t r = 0; r < count; ++r) out.insert(out.end(), a.data().begin(), a.data().end());
  ImplPtr ia = a.shared_impl();
  return make_result({count, n}, std::move(out), {a}, [ia, count, n](const TensorImpl& o) {
    std::vector<double> acc(n, 0.0);
    for (std::size_t r = 0; r < count; ++r)
      for (std::size_t j = 0; j < n; ++j) acc[j] += o.grad[r * n + j];
    auto& g = ia->grad_buffer();
    for (std::size_t j = 0; j < n; ++j) g[j] += static_cast<float>(acc[j]);
  });
}

Tensor gather(const Tensor& a, std::span<const std::size_t> index, Shape shape) {
  if (shape_numel(shape) != index.size()) {
    throw ShapeError("gather: " + std::to_string(index.size()) + " indices for shape " +
                     shape_str(shape));
  }
  std::vector<float> out(index.size());
  auto da = a.data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= da.size()) {
      throw ShapeError("gather: index " + std::to_string(index[i]) + " out of range for " +
                       shape_str(a.shape()));
    }
    out[i] = da[index[i]];
  }
  ImplPtr ia = a.shared_impl();
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_result(std::move(shape), std::move(out), {a}, [ia, idx](const TensorImpl& o) {
    auto& g = ia->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += o.grad[i];
  });
}

Tensor softmax_lastdim(const Tensor& t) {
  const std::size_t n = t.shape().back();
  const std::size_t rows = t.numel() / n;
  std::vector<float> out(t.numel());
  auto d = t.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* x = d.data() + r * n;
    const float mx = *std::max_element(x, x + n);
    double z = 0.0;
    std::vector<double> e(n);
    for (std::size_t j = 0; j < n; ++j) {
      e[j] = std::exp(static_cast<double>(x[j]) - mx);
      z += e[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = static_cast<float>(e[j] / z);
  }
  ImplPtr it = t.shared_impl();
  return make_result(t.shape(), std::move(out), {t}, [it, rows, n](const TensorImpl& o) {
    auto& g = it->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const float* y = o.data.data() + r * n;
      const float* gy = o.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(gy[j]) * y[j];
      for (std::size_t j = 0; j < n; ++j)
        g[r * n + j] += static_cast<float>(y[j] * (gy[j] - dot));
    }
  });
}

Tensor layer_norm(const Tensor& t, const Tensor& gamma, const Tensor& beta, float eps) {
  const std::size_t n = t.shape().back();
  if (gamma.numel() != n || beta.numel() != n) {
    throw ShapeError("layer_norm: affine params " + shape_str(gamma.shape()) + "/" +
                     shape_str(beta.shape()) + " do not match last dim of " +
                     shape_str(t.shape()));
  }
  if (!(eps > 0.0f)) throw std::invalid_argument("layer_norm: eps must be positive");
  const std::size_t rows = t.numel() / n;
  std::vector<float> out(t.numel());
  std::vector<double> xhat(t.numel());
  std::vector<double> rstd(rows);
  auto d = t.data(), gm = gamma.data(), bt = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* x = d.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += x[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(n);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const double xh = (x[j] - mu) * rstd[r];
      xhat[r * n + j] = xh;
      out[r * n + j] = static_cast<float>(xh * gm[j] + bt[j]);
    }
  }
  ImplPtr it = t.shared_impl(), ig = gamma.shared_impl(), ib = beta.shared_impl();
  return make_result(
      t.shape(), std::move(out), {t, gamma, beta},
      [it, ig, ib, rows, n, xhat = std::move(xhat), rstd = std::move(rstd)](const TensorImpl& o) {
        if (ig->requires_grad || ib->requires_grad) {
          std::vector<double> dg(n, 0.0), db(n, 0.0);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) {
              dg[j] += o.grad[r * n + j] * xhat[r * n + j];
              db[j] += o.grad[r * n + j];
            }
          if (ig->requires_grad) {
            auto& g = ig->grad_buffer();
            for (std::size_t j = 0; j < n; ++j) g[j] += static_cast<float>(dg[j]);
          }
          if (ib->requires_grad) {
            auto& g = ib->grad_buffer();
            for (std::size_t j = 0; j < n; ++j) g[j] += static_cast<float>(db[j]);
          }
        }
        if (it->requires_grad) {
          auto& g = it->grad_buffer();
          std::vector<double> dxh(n);
          for (std::size_t r = 0; r < rows; ++r) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              dxh[j] = static_cast<double>(o.grad[r * n + j]) * ig->data[j];
              s1 += dxh[j];
              s2 += dxh[j] * xhat[r * n + j];
            }
            const double inv_n = 1.0 / static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
              g[r * n + j] += static_cast<float>(
                  rstd[r] * (dxh[j] - inv_n * s1 - xhat[r * n + j] * inv_n * s2));
            }
          }
        }
      });
}

Tensor gelu(const Tensor& t) {
  std::vector<float> out(t.numel());
  auto d = t.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(gelu_value(d[i]));
  ImplPtr it = t.shared_impl();
  return make_result(t.shape(), std::move(out), {t}, [it](const TensorImpl& o) {
    constexpr double kSqrt2OverPi = 0.7978845608028654;
    constexpr double kCoeff = 0.044715;
    auto& g = it->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = it->data[i];
      const double u = kSqrt2OverPi * (x + kCoeff * x * x * x);
      const double th = std::tanh(u);
      const double du = kSqrt2OverPi * (1.0 + 3.0 * kCoeff * x * x);
      const double dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
      g[i] += static_cast<float>(o.grad[i] * dy);
    }
  });
}

Tensor square(const Tensor& t) {
  std::vector<float> out(t.numel());
  auto d = t.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = d[i] * d[i];
  ImplPtr it = t.shared_impl();
  return make_result(t.shape(), std::move(out), {t}, [it](const TensorImpl& o) {
    auto& g = it->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0f * it->data[i] * o.grad[i];
  });
}

Tensor abs(const Tensor& t) {
  std::vector<float> out(t.numel());
  auto d = t.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(d[i]);
  ImplPtr it = t.shared_impl();
  return make_result(t.shape(), std::move(out), {t}, [it](const TensorImpl& o) {
    auto& g = it->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const float x = it->data[i];
      const float s = x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f);
      g[i] += s * o.grad[i];
    }
  });
}

Tensor sum(const Tensor& t) {
  double s = 0.0;
  for (float v : t.data()) s += v;
  ImplPtr it = t.shared_impl();
  return make_result({1}, {static_cast<float>(s)}, {t}, [it](const TensorImpl& o) {
    auto& g = it->grad_buffer();
    const float go = o.grad[0];
    for (auto& v : g) v += go;
  });
}

Tensor mean(const Tensor& t) {
  double s = 0.0;
  for (float v : t.data()) s += v;
  const double n = static_cast<double>(t.numel());
  ImplPtr it = t.shared_impl();
  return make_result({1}, {static_cast<float>(s / n)}, {t}, [it, n](const TensorImpl& o) {
    auto& g = it->grad_buffer();
    const float go = static_cast<float>(o.grad[0] / n);
    for (auto& v : g) v += go;
  });
}

}  // namespace fwvit::ops
