#pragma once

// Differentiable tensor operations. Every operation computes its output
// eagerly and, when a tape is active and an input requires gradients,
// records the matching backward rule.
//
// Broadcasting is deliberately narrow: a one-element operand broadcasts
// over any tensor (add/sub/mul), add_bias adds a row vector over the last
// axis, and scale_rows multiplies each row by its own scalar. Anything else
// must go through an explicit op (expand, concat, reshape).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "histocap/numerics/tensor.hpp"

namespace histocap {

namespace detail {

template <typename T>
bool recording(std::initializer_list<const Tensor<T>*> inputs) {
  if (!active_tape<T>()) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
Tensor<T> finish(Shape shape, std::vector<T> values, const char* op) {
  for (const T v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
  return Tensor<T>(std::move(shape), std::move(values));
}

template <typename T, typename Rule>
void record(Tensor<T>& out, Rule&& rule) {
  out.set_requires_grad(true);
  active_tape<T>()->record(std::forward<Rule>(rule));
}

// c[m×n] += a[m×k] · b[k×n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m×n] += a[m×k] · b[n×k]ᵀ
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// c[m×n] += a[k×m]ᵀ · b[k×n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = a[p * m + i];
      if (av == T(0)) continue;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& x, const char* name, Fwd fwd, Deriv deriv) {
  std::vector<T> y(x.numel());
  const auto xs = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(xs[i]);
  Tensor<T> out = finish<T>(x.shape(), std::move(y), name);
  if (recording<T>({&x})) {
    record(out, [x, out, deriv]() mutable {
      if (!out.has_grad()) return;
      const auto gy = out.grad();
      const auto xs = x.data();
      const auto ys = out.data();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * deriv(xs[i], ys[i]);
    });
  }
  return out;
}

template <typename T, typename Fwd, typename DA, typename DB>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd, DA da, DB db) {
  const bool a_scalar = a.numel() == 1 && b.numel() != 1;
  const bool b_scalar = b.numel() == 1 && a.numel() != 1;
  if (!a_scalar && !b_scalar && a.shape() != b.shape()) {
    throw ShapeError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const Shape& shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(shape);
  std::vector<T> y(n);
  const auto as = a.data();
  const auto bs = b.data();
  for (std::size_t i = 0; i < n; ++i) y[i] = fwd(as[a_scalar ? 0 : i], bs[b_scalar ? 0 : i]);
  Tensor<T> out = finish<T>(shape, std::move(y), name);
  if (recording<T>({&a, &b})) {
    record(out, [a, b, out, a_scalar, b_scalar, da, db]() mutable {
      if (!out.has_grad()) return;
      const auto gy = out.grad();
      const auto as = a.data();
      const auto bs = b.data();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < gy.size(); ++i) {
          const std::size_t ia = a_scalar ? 0 : i, ib = b_scalar ? 0 : i;
          ga[ia] += gy[i] * da(as[ia], bs[ib]);
        }
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < gy.size(); ++i) {
          const std::size_t ia = a_scalar ? 0 : i, ib = b_scalar ? 0 : i;
          gb[ib] += gy[i] * db(as[ia], bs[ib]);
        }
      }
    });
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> c(m * n, T(0));
  detail::gemm_nn(a.data().data(), b.data().data(), c.data(), m, k, n);
  Tensor<T> out = detail::finish<T>({m, n}, std::move(c), "matmul");
  if (detail::recording<T>({&a, &b})) {
    detail::record(out, [a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      if (a.requires_grad()) detail::gemm_nt(g, b.data().data(), a.mutable_grad().data(), m, n, k);
      if (b.requires_grad()) detail::gemm_tn(a.data().data(), g, b.mutable_grad().data(), k, m, n);
    });
  }
  return out;
}

// Batched matmul: [B×m×k] · [B×k×n] -> [B×m×n].
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw ShapeError("bmm shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<T> c(batch * m * n, T(0));
  for (std::size_t i = 0; i < batch; ++i) {
    detail::gemm_nn(a.data().data() + i * m * k, b.data().data() + i * k * n, c.data() + i * m * n,
                    m, k, n);
  }
  Tensor<T> out = detail::finish<T>({batch, m, n}, std::move(c), "bmm");
  if (detail::recording<T>({&a, &b})) {
    detail::record(out, [a, b, out, batch, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      for (std::size_t i = 0; i < batch; ++i) {
        if (a.requires_grad()) {
          detail::gemm_nt(g + i * m * n, b.data().data() + i * k * n,
                          a.mutable_grad().data() + i * m * k, m, n, k);
        }
        if (b.requires_grad()) {
          detail::gemm_tn(a.data().data() + i * m * k, g + i * m * n,
                          b.mutable_grad().data() + i * k * n, k, m, n);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("transpose needs rank 2, got " + shape_str(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<T> y(r * c);
  const auto xs = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[j * r + i] = xs[i * c + j];
  Tensor<T> out = detail::finish<T>({c, r}, std::move(y), "transpose");
  if (detail::recording<T>({&x})) {
    detail::record(out, [x, out, r, c]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return detail::unary(
      x, "scale", [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T offset) {
  return detail::unary(
      x, "add_scalar", [offset](T v) { return v + offset; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary(
      x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary(
      x, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
T sigmoid_value(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, "sigmoid", [](T v) { return sigmoid_value(v); }, [](T, T y) { return y * (T(1) - y); });
}

// Exact (erf-based) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  return detail::unary(
      x, "gelu",
      [](T v) { return T(0.5) * v * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>)); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
        const T pdf = std::exp(T(-0.5) * v * v) / std::sqrt(T(2) * std::numbers::pi_v<T>);
        return cdf + v * pdf;
      });
}

// x[...×n] + b[n]
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t n = x.shape().back();
  if (bias.numel() != n) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match " +
                     shape_str(x.shape()));
  }
  std::vector<T> y(x.values());
  const auto bs = bias.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bs[i % n];
  Tensor<T> out = detail::finish<T>(x.shape(), std::move(y), "add_bias");
  if (detail::recording<T>({&x, &bias})) {
    detail::record(out, [x, bias, out, n]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      if (x.requires_grad()) {
        auto gx = x.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
      }
    });
  }
  return out;
}

// Multiplies row r of x (rows = numel / last extent) by s[r].
template <typename T>
Tensor<T> scale_rows(const Tensor<T>& x, const Tensor<T>& s) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  if (s.numel() != rows) {
    throw ShapeError("scale_rows: " + shape_str(s.shape()) + " does not provide one factor per row of " +
                     shape_str(x.shape()));
  }
  std::vector<T> y(x.values());
  const auto ss = s.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] *= ss[r];
  Tensor<T> out = detail::finish<T>(x.shape(), std::move(y), "scale_rows");
  if (detail::recording<T>({&x, &s})) {
    detail::record(out, [x, s, out, rows, n]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      const auto xs = x.data();
      const auto ss = s.data();
      if (x.requires_grad()) {
        auto gx = x.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += g[r * n + j] * ss[r];
      }
      if (s.requires_grad()) {
        auto gs = s.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          T acc = T(0);
          for (std::size_t j = 0; j < n; ++j) acc += g[r * n + j] * xs[r * n + j];
          gs[r] += acc;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

// Softmax along `axis`, max-subtracted.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto sp = detail::split_axis(x.shape(), axis);
  std::vector<T> y(x.numel());
  const auto xs = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < sp.len; ++i) mx = std::max(mx, xs[base + i * sp.inner]);
      T total = T(0);
      for (std::size_t i = 0; i < sp.len; ++i) {
        const T e = std::exp(xs[base + i * sp.inner] - mx);
        y[base + i * sp.inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < sp.len; ++i) y[base + i * sp.inner] /= total;
    }
  }
  Tensor<T> out = detail::finish<T>(x.shape(), std::move(y), "softmax");
  if (detail::recording<T>({&x})) {
    detail::record(out, [x, out, sp]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      const auto ys = out.data();
      auto gx = x.mutable_grad();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
          const std::size_t base = o * sp.len * sp.inner + in;
          T dot = T(0);
          for (std::size_t i = 0; i < sp.len; ++i) {
            const std::size_t idx = base + i * sp.inner;
            dot += g[idx] * ys[idx];
          }
          for (std::size_t i = 0; i < sp.len; ++i) {
            const std::size_t idx = base + i * sp.inner;
            gx[idx] += ys[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

// Softmax over the last axis restricted to entries whose mask byte is
// nonzero; masked entries come out exactly 0.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& x, std::span<const std::uint8_t> mask) {
  if (mask.size() != x.numel()) {
    throw ShapeError("masked_softmax: mask has " + std::to_string(mask.size()) +
                     " entries for " + shape_str(x.shape()));
  }
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<T> y(x.numel(), T(0));
  const auto xs = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask[r * n + j]) {
        mx = std::max(mx, xs[r * n + j]);
        any = true;
      }
    }
    if (!any) throw ValueError("masked_softmax: row " + std::to_string(r) + " is fully masked");
    T total = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      if (!mask[r * n + j]) continue;
      const T e = std::exp(xs[r * n + j] - mx);
      y[r * n + j] = e;
      total += e;
    }
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] /= total;
  }
  Tensor<T> out = detail::finish<T>(x.shape(), std::move(y), "masked_softmax");
  if (detail::recording<T>({&x})) {
    detail::record(out, [x, out, rows, n]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      const auto ys = out.data();
      auto gx = x.mutable_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = T(0);
        for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * ys[r * n + j];
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += ys[r * n + j] * (g[r * n + j] - dot);
      }
    });
  }
  return out;
}

// Row-wise layer normalization over the last axis with affine gamma/beta.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    T eps = T(1e-6)) {
  const std::size_t n = x.shape().back();
  if (gamma.numel() != n || beta.numel() != n) {
    throw ShapeError("layernorm: affine params " + shape_str(gamma.shape()) + "/" +
                     shape_str(beta.shape()) + " do not match " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / n;
  std::vector<T> y(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  const auto xs = x.data();
  const auto gs = gamma.data();
  const auto bs = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xs.data() + r * n;
    T mean = T(0);
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<T>(n);
    T var = T(0);
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(n);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (row[j] - mean) * inv_std[r];
      y[r * n + j] = gs[j] * xhat[r * n + j] + bs[j];
    }
  }
  Tensor<T> out = detail::finish<T>(x.shape(), std::move(y), "layernorm");
  if (detail::recording<T>({&x, &gamma, &beta})) {
    detail::record(out, [x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std),
                         rows, n]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      const auto gs = gamma.data();
      if (gamma.requires_grad() || beta.requires_grad()) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < n; ++j) {
            if (gamma.requires_grad()) gamma.mutable_grad()[j] += g[r * n + j] * xhat[r * n + j];
            if (beta.requires_grad()) beta.mutable_grad()[j] += g[r * n + j];
          }
        }
      }
      if (x.requires_grad()) {
        auto gx = x.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          T mean_d = T(0), mean_dx = T(0);
          for (std::size_t j = 0; j < n; ++j) {
            const T d = g[r * n + j] * gs[j];
            mean_d += d;
            mean_dx += d * xhat[r * n + j];
          }
          mean_d /= static_cast<T>(n);
          mean_dx /= static_cast<T>(n);
          for (std::size_t j = 0; j < n; ++j) {
            const T d = g[r * n + j] * gs[j];
            gx[r * n + j] += inv_std[r] * (d - mean_d - xhat[r * n + j] * mean_dx);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::size_t axis) {
  const auto sp = detail::split_axis(x.shape(), axis);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (shape.empty()) shape = {1};
  std::vector<T> y(sp.outer * sp.inner, T(0));
  const auto xs = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.len; ++i)
      for (std::size_t in = 0; in < sp.inner; ++in)
        y[o * sp.inner + in] += xs[(o * sp.len + i) * sp.inner + in];
  Tensor<T> out = detail::finish<T>(std::move(shape), std::move(y), "sum");
  if (detail::recording<T>({&x})) {
    detail::record(out, [x, out, sp]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.len; ++i)
          for (std::size_t in = 0; in < sp.inner; ++in)
            gx[(o * sp.len + i) * sp.inner + in] += g[o * sp.inner + in];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis) {
  const auto len = detail::split_axis(x.shape(), axis).len;
  return scale(sum(x, axis), T(1) / static_cast<T>(len));
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T total = T(0);
  for (const T v : x.data()) total += v;
  Tensor<T> out = detail::finish<T>({1}, {total}, "sum_all");
  if (detail::recording<T>({&x})) {
    detail::record(out, [x, out]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      for (auto& v : x.mutable_grad()) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

// Weighted cross-entropy over rows of logits[R×V]:
//   loss = Σ_r w_r · (−log softmax(logits_r)[target_r]).
// With no weights the loss is the mean over rows.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets,
                        std::span<const T> weights = {}) {
  if (logits.rank() != 2 || targets.size() != logits.dim(0)) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " with " +
                     std::to_string(targets.size()) + " targets");
  }
  const std::size_t rows = logits.dim(0), v = logits.dim(1);
  std::vector<T> w(rows, T(1) / static_cast<T>(rows));
  if (!weights.empty()) {
    if (weights.size() != rows) throw ShapeError("cross_entropy: one weight per row required");
    w.assign(weights.begin(), weights.end());
  }
  std::vector<T> probs(rows * v);
  const auto xs = logits.data();
  T loss = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= v) {
      throw ValueError("cross_entropy: target id " + std::to_string(targets[r]) +
                       " outside vocabulary of size " + std::to_string(v));
    }
    const T* row = xs.data() + r * v;
    const T mx = *std::max_element(row, row + v);
    T total = T(0);
    for (std::size_t j = 0; j < v; ++j) total += std::exp(row[j] - mx);
    const T log_z = mx + std::log(total);
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] = std::exp(row[j] - log_z);
    if (w[r] != T(0)) loss += w[r] * (log_z - row[targets[r]]);
  }
  Tensor<T> out = detail::finish<T>({1}, {loss}, "cross_entropy");
  if (detail::recording<T>({&logits})) {
    std::vector<std::size_t> tgt(targets.begin(), targets.end());
    detail::record(out, [logits, out, probs = std::move(probs), tgt = std::move(tgt),
                         w = std::move(w), rows, v]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      auto gx = logits.mutable_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        if (w[r] == T(0)) continue;
        for (std::size_t j = 0; j < v; ++j) {
          const T onehot = j == tgt[r] ? T(1) : T(0);
          gx[r * v + j] += g * w[r] * (probs[r * v + j] - onehot);
        }
      }
    });
  }
  return out;
}

// Single-row convenience: logits [V] or [1×V].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::size_t target) {
  const std::size_t t[1] = {target};
  const Tensor<T> row = logits.rank() == 2 ? logits : reshape(logits, {1, logits.numel()});
  return cross_entropy(row, std::span<const std::size_t>(t));
}

// ---------------------------------------------------------------------------
// Structural

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), x.values());
  if (detail::recording<T>({&x})) {
    detail::record(out, [x, out]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape shape = parts[0].shape();
  if (axis >= shape.size()) throw ShapeError("concat axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != shape.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t d = 0; d < shape.size(); ++d) {
      if (d != axis && p.dim(d) != shape[d]) {
        throw ShapeError("concat shape mismatch: " + shape_str(parts[0].shape()) + " vs " +
                         shape_str(p.shape()));
      }
    }
    total += p.dim(axis);
  }
  shape[axis] = total;
  const auto sp = detail::split_axis(shape, axis);
  std::vector<T> y(shape_numel(shape));
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.dim(axis);
    const auto ps = p.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(ps.data() + o * len * sp.inner, len * sp.inner,
                  y.data() + (o * sp.len + offset) * sp.inner);
    offset += len;
  }
  Tensor<T> out(shape, std::move(y));
  bool any = false;
  if (active_tape<T>()) {
    for (const auto& p : parts) any = any || p.requires_grad();
  }
  if (any) {
    detail::record(out, [parts, out, sp]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      std::size_t offset = 0;
      for (auto& p : parts) {
        const std::size_t plen = p.numel() / (sp.outer * sp.inner);
        if (p.requires_grad()) {
          auto gp = p.mutable_grad();
          for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t i = 0; i < plen * sp.inner; ++i)
              gp[o * plen * sp.inner + i] += g[(o * sp.len + offset) * sp.inner + i];
        }
        offset += plen;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  const auto sp = detail::split_axis(x.shape(), axis);
  if (length == 0 || start + length > sp.len) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for axis " + std::to_string(axis) + " of " +
                     shape_str(x.shape()));
  }
  Shape shape = x.shape();
  shape[axis] = length;
  std::vector<T> y(shape_numel(shape));
  const auto xs = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(xs.data() + (o * sp.len + start) * sp.inner, length * sp.inner,
                y.data() + o * length * sp.inner);
  Tensor<T> out(std::move(shape), std::move(y));
  if (detail::recording<T>({&x})) {
    detail::record(out, [x, out, sp, start, length]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < length * sp.inner; ++i)
          gx[(o * sp.len + start) * sp.inner + i] += g[o * length * sp.inner + i];
    });
  }
  return out;
}

// Row lookup: table[V×d], ids -> [n×d].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::size_t> ids) {
  if (table.rank() != 2) throw ShapeError("embedding table must be rank 2");
  if (ids.empty()) throw ShapeError("embedding lookup with no ids");
  const std::size_t v = table.dim(0), d = table.dim(1);
  std::vector<T> y(ids.size() * d);
  const auto ts = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= v) {
      throw ValueError("token id " + std::to_string(ids[i]) + " outside vocabulary of size " +
                       std::to_string(v));
    }
    std::copy_n(ts.data() + ids[i] * d, d, y.data() + i * d);
  }
  Tensor<T> out({ids.size(), d}, std::move(y));
  if (detail::recording<T>({&table})) {
    std::vector<std::size_t> idv(ids.begin(), ids.end());
    detail::record(out, [table, out, idv = std::move(idv), d]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      auto gt = table.mutable_grad();
      for (std::size_t i = 0; i < idv.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) gt[idv[i] * d + j] += g[i * d + j];
    });
  }
  return out;
}

// [B×n] -> [B×count×n], each row repeated `count` times.
template <typename T>
Tensor<T> expand(const Tensor<T>& x, std::size_t count) {
  if (x.rank() != 2) throw ShapeError("expand needs rank 2, got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), n = x.dim(1);
  std::vector<T> y(b * count * n);
  const auto xs = x.data();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t c = 0; c < count; ++c) std::copy_n(xs.data() + i * n, n, y.data() + (i * count + c) * n);
  Tensor<T> out({b, count, n}, std::move(y));
  if (detail::recording<T>({&x})) {
    detail::record(out, [x, out, b, count, n]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t c = 0; c < count; ++c)
          for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[(i * count + c) * n + j];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution (NHWC)

struct Conv2dGeometry {
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;  // replicate (edge) padding

  std::size_t out_extent(std::size_t in) const {
    if (in + 2 * pad < kernel) throw ShapeError("conv2d: input smaller than kernel");
    return (in + 2 * pad - kernel) / stride + 1;
  }
};

namespace detail {

inline std::size_t clamp_index(std::ptrdiff_t v, std::size_t extent) {
  if (v < 0) return 0;
  if (static_cast<std::size_t>(v) >= extent) return extent - 1;
  return static_cast<std::size_t>(v);
}

// Source pixel index (y*W + x) for every (output position, kernel tap).
inline std::vector<std::size_t> conv_taps(std::size_t h, std::size_t w, const Conv2dGeometry& g) {
  const std::size_t ho = g.out_extent(h), wo = g.out_extent(w);
  std::vector<std::size_t> taps(ho * wo * g.kernel * g.kernel);
  std::size_t t = 0;
  for (std::size_t oy = 0; oy < ho; ++oy)
    for (std::size_t ox = 0; ox < wo; ++ox)
      for (std::size_t ky = 0; ky < g.kernel; ++ky)
        for (std::size_t kx = 0; kx < g.kernel; ++kx) {
          const auto yy = clamp_index(static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                          static_cast<std::ptrdiff_t>(g.pad), h);
          const auto xx = clamp_index(static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                          static_cast<std::ptrdiff_t>(g.pad), w);
          taps[t++] = yy * w + xx;
        }
  return taps;
}

}  // namespace detail

// x[B×H×W×C] conv weight[(k·k·C)×O] (tap-major, channel-minor) + bias[O]
// -> [B×Ho×Wo×O], with replicate padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 const Conv2dGeometry& geom) {
  if (x.rank() != 4) throw ShapeError("conv2d input must be [B×H×W×C], got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const std::size_t kk = geom.kernel * geom.kernel;
  if (weight.rank() != 2 || weight.dim(0) != kk * c || bias.numel() != weight.dim(1)) {
    throw ShapeError("conv2d weight " + shape_str(weight.shape()) + " / bias " +
                     shape_str(bias.shape()) + " incompatible with input " + shape_str(x.shape()));
  }
  const std::size_t o = weight.dim(1);
  const std::size_t ho = geom.out_extent(h), wo = geom.out_extent(w);
  const auto taps = detail::conv_taps(h, w, geom);
  const std::size_t positions = ho * wo;
  const std::size_t patch = kk * c;
  std::vector<T> cols(b * positions * patch);
  const auto xs = x.data();
  for (std::size_t i = 0; i < b; ++i) {
    const T* img = xs.data() + i * h * w * c;
    for (std::size_t p = 0; p < positions; ++p) {
      T* dst = cols.data() + (i * positions + p) * patch;
      for (std::size_t t = 0; t < kk; ++t) std::copy_n(img + taps[p * kk + t] * c, c, dst + t * c);
    }
  }
  std::vector<T> y(b * positions * o);
  const auto bs = bias.data();
  for (std::size_t r = 0; r < b * positions; ++r) std::copy_n(bs.data(), o, y.data() + r * o);
  detail::gemm_nn(cols.data(), weight.data().data(), y.data(), b * positions, patch, o);
  Tensor<T> out = detail::finish<T>({b, ho, wo, o}, std::move(y), "conv2d");
  if (detail::recording<T>({&x, &weight, &bias})) {
    detail::record(out, [x, weight, bias, out, cols = std::move(cols), taps, b, h, w, c, o,
                         positions, patch, kk]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      const std::size_t rows = b * positions;
      if (weight.requires_grad()) {
        detail::gemm_tn(cols.data(), g, weight.mutable_grad().data(), patch, rows, o);
      }
      if (bias.requires_grad()) {
        auto gb = bias.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < o; ++j) gb[j] += g[r * o + j];
      }
      if (x.requires_grad()) {
        std::vector<T> dcols(rows * patch, T(0));
        detail::gemm_nt(g, weight.data().data(), dcols.data(), rows, o, patch);
        auto gx = x.mutable_grad();
        for (std::size_t i = 0; i < b; ++i) {
          T* img = gx.data() + i * h * w * c;
          for (std::size_t p = 0; p < positions; ++p) {
            const T* src = dcols.data() + (i * positions + p) * patch;
            for (std::size_t t = 0; t < kk; ++t) {
              T* dst = img + taps[p * kk + t] * c;
              for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[t * c + ch];
            }
          }
        }
      }
    });
  }
  return out;
}

// Non-overlapping average pooling with window `factor` on [B×H×W×C].
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t factor) {
  if (x.rank() != 4) throw ShapeError("avg_pool2d input must be [B×H×W×C]");
  const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (factor == 0 || h % factor || w % factor) {
    throw ShapeError("avg_pool2d: window " + std::to_string(factor) + " does not tile " +
                     shape_str(x.shape()));
  }
  const std::size_t ho = h / factor, wo = w / factor;
  const T inv = T(1) / static_cast<T>(factor * factor);
  std::vector<T> y(b * ho * wo * c, T(0));
  const auto xs = x.data();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t yy = 0; yy < h; ++yy)
      for (std::size_t xx = 0; xx < w; ++xx) {
        const T* src = xs.data() + ((i * h + yy) * w + xx) * c;
        T* dst = y.data() + ((i * ho + yy / factor) * wo + xx / factor) * c;
        for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch] * inv;
      }
  Tensor<T> out = detail::finish<T>({b, ho, wo, c}, std::move(y), "avg_pool2d");
  if (detail::recording<T>({&x})) {
    detail::record(out, [x, out, b, h, w, c, ho, wo, factor, inv]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t yy = 0; yy < h; ++yy)
          for (std::size_t xx = 0; xx < w; ++xx) {
            T* dst = gx.data() + ((i * h + yy) * w + xx) * c;
            const T* src = g.data() + ((i * ho + yy / factor) * wo + xx / factor) * c;
            for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch] * inv;
          }
    });
  }
  return out;
}

}  // namespace histocap
