#include "ddrn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace ddrn {
namespace kernels {

namespace {

// C (+)= op(A)·B with A either [m×k] or, when kTransA, [k×m]. Register tiles
// of kRows × kCols outputs walk k in panels of kDepth so that the B panel
// stays in cache. Each output still sums its k terms in ascending order.
template <bool kTransA, typename T>
void gemm_blocked(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
  constexpr std::size_t kRows = 4, kCols = 256 / sizeof(T), kDepth = 256;
  if (!accumulate) std::fill(c, c + m * n, T(0));
  auto a_at = [&](std::size_t i, std::size_t p) { return kTransA ? a[p * m + i] : a[i * k + p]; };
  for (std::size_t k0 = 0; k0 < k; k0 += kDepth) {
    const std::size_t k1 = std::min(k, k0 + kDepth);
    std::size_t i = 0;
    for (; i + kRows <= m; i += kRows) {
      for (std::size_t j0 = 0; j0 < n; j0 += kCols) {
        const std::size_t width = std::min(kCols, n - j0);
        T acc[kRows][kCols];
        for (std::size_t r = 0; r < kRows; ++r) std::copy_n(c + (i + r) * n + j0, width, acc[r]);
        if (width == kCols) {
          for (std::size_t p = k0; p < k1; ++p) {
            const T* brow = b + p * n + j0;
            for (std::size_t r = 0; r < kRows; ++r) {
              const T av = a_at(i + r, p);
              for (std::size_t j = 0; j < kCols; ++j) acc[r][j] += av * brow[j];
            }
          }
        } else {
          for (std::size_t p = k0; p < k1; ++p) {
            const T* brow = b + p * n + j0;
            for (std::size_t r = 0; r < kRows; ++r) {
              const T av = a_at(i + r, p);
              for (std::size_t j = 0; j < width; ++j) acc[r][j] += av * brow[j];
            }
          }
        }
        for (std::size_t r = 0; r < kRows; ++r) std::copy_n(acc[r], width, c + (i + r) * n + j0);
      }
    }
    for (; i < m; ++i) {
      T* crow = c + i * n;
      for (std::size_t p = k0; p < k1; ++p) {
        const T av = a_at(i, p);
        const T* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

}  // namespace

template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
  gemm_blocked<false>(m, k, n, a, b, c, accumulate);
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
  // Transposing B once keeps the inner loop contiguous.
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  }
  gemm_nn(m, k, n, a, bt.data(), c, accumulate);
}

template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
  gemm_blocked<true>(m, k, n, a, b, c, accumulate);
}

template void gemm_nn<float>(std::size_t, std::size_t, std::size_t, const float*, const float*, float*, bool);
template void gemm_nn<double>(std::size_t, std::size_t, std::size_t, const double*, const double*, double*, bool);
template void gemm_nt<float>(std::size_t, std::size_t, std::size_t, const float*, const float*, float*, bool);
template void gemm_nt<double>(std::size_t, std::size_t, std::size_t, const double*, const double*, double*, bool);
template void gemm_tn<float>(std::size_t, std::size_t, std::size_t, const float*, const float*, float*, bool);
template void gemm_tn<double>(std::size_t, std::size_t, std::size_t, const double*, const double*, double*, bool);

}  // namespace kernels

namespace {

template <typename T>
Tape<T>& same_tape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument(std::string(op) + ": invalid operand");
  if (&a.tape() != &b.tape()) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
  return a.tape();
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <typename T>
void require_matrix(const Var<T>& a, const char* op) {
  if (a.shape().size() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
  }
}

Shape matrix_shape(std::size_t r, std::size_t c) { return Shape{r, c}; }

}  // namespace

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = same_tape(a, b, "matmul");
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner extents differ " + shape_str(a.shape()) + " · " + shape_str(b.shape()));
  }
  std::vector<T> out(m * n);
  kernels::gemm_nn(m, k, n, a.value().data(), b.value().data(), out.data(), false);
  const int ia = a.id(), ib = b.id();
  return tape.record("matmul", matrix_shape(m, n), std::move(out), {ia, ib},
                     [ia, ib, m, k, n](Tape<T>& t, int self) {
                       auto dc = t.grad(self);
                       if (t.requires_grad(ia)) kernels::gemm_nt(m, n, k, dc.data(), t.value(ib).data(), t.grad(ia).data(), true);
                       if (t.requires_grad(ib)) kernels::gemm_tn(k, m, n, t.value(ia).data(), dc.data(), t.grad(ib).data(), true);
                     });
}

template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = same_tape(a, b, "matmul_nt");
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) {
    throw ShapeError("matmul_nt: inner extents differ " + shape_str(a.shape()) + " · " +
                     shape_str(b.shape()) + "ᵀ");
  }
  std::vector<T> out(m * n);
  kernels::gemm_nt(m, k, n, a.value().data(), b.value().data(), out.data(), false);
  const int ia = a.id(), ib = b.id();
  return tape.record("matmul_nt", matrix_shape(m, n), std::move(out), {ia, ib},
                     [ia, ib, m, k, n](Tape<T>& t, int self) {
                       auto dc = t.grad(self);
                       if (t.requires_grad(ia)) kernels::gemm_nn(m, n, k, dc.data(), t.value(ib).data(), t.grad(ia).data(), true);
                       if (t.requires_grad(ib)) kernels::gemm_tn(n, m, k, dc.data(), t.value(ia).data(), t.grad(ib).data(), true);
                     });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  require_matrix(a, "transpose");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  auto av = a.value();
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  }
  const int ia = a.id();
  return a.tape().record("transpose", matrix_shape(c, r), std::move(out), {ia}, [ia, r, c](Tape<T>& t, int self) {
    auto g = t.grad(self);
    auto ga = t.grad(ia);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = same_tape(a, b, "add");
  require_same_shape(a, b, "add");
  auto av = a.value(), bv = b.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const int ia = a.id(), ib = b.id();
  return tape.record("add", a.shape(), std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, int self) {
    auto g = t.grad(self);
    for (int in : {ia, ib}) {
      if (!t.requires_grad(in)) continue;
      auto gi = t.grad(in);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = same_tape(a, b, "sub");
  require_same_shape(a, b, "sub");
  auto av = a.value(), bv = b.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const int ia = a.id(), ib = b.id();
  return tape.record("sub", a.shape(), std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, int self) {
    auto g = t.grad(self);
    if (t.requires_grad(ia)) {
      auto ga = t.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto gb = t.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = same_tape(a, b, "mul");
  require_same_shape(a, b, "mul");
  auto av = a.value(), bv = b.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const int ia = a.id(), ib = b.id();
  return tape.record("mul", a.shape(), std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, int self) {
    auto g = t.grad(self);
    auto av = t.value(ia), bv = t.value(ib);
    if (t.requires_grad(ia)) {
      auto ga = t.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      auto gb = t.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  auto av = a.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  const int ia = a.id();
  return a.tape().record("scale", a.shape(), std::move(out), {ia}, [ia, factor](Tape<T>& t, int self) {
    auto g = t.grad(self);
    auto ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

template <typename T>
Var<T> add_row_vector(const Var<T>& a, const Var<T>& v) {
  Tape<T>& tape = same_tape(a, v, "add_row_vector");
  const std::size_t n = a.cols(), rows = a.rows();
  if (v.numel() != n) {
    throw ShapeError("add_row_vector: vector of " + std::to_string(v.numel()) + " for rows of " + std::to_string(n));
  }
  auto av = a.value(), vv = v.value();
  std::vector<T> out(av.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = av[r * n + c] + vv[c];
  }
  const int ia = a.id(), iv = v.id();
  return tape.record("add_row_vector", a.shape(), std::move(out), {ia, iv}, [ia, iv, rows, n](Tape<T>& t, int self) {
    auto g = t.grad(self);
    if (t.requires_grad(ia)) {
      auto ga = t.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(iv)) {
      auto gv = t.grad(iv);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < n; ++c) gv[c] += g[r * n + c];
      }
    }
  });
}

template <typename T>
Var<T> mul_row_vector(const Var<T>& a, const Var<T>& v) {
  Tape<T>& tape = same_tape(a, v, "mul_row_vector");
  const std::size_t n = a.cols(), rows = a.rows();
  if (v.numel() != n) {
    throw ShapeError("mul_row_vector: vector of " + std::to_string(v.numel()) + " for rows of " + std::to_string(n));
  }
  auto av = a.value(), vv = v.value();
  std::vector<T> out(av.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = av[r * n + c] * vv[c];
  }
  const int ia = a.id(), iv = v.id();
  return tape.record("mul_row_vector", a.shape(), std::move(out), {ia, iv}, [ia, iv, rows, n](Tape<T>& t, int self) {
    auto g = t.grad(self);
    auto av = t.value(ia), vv = t.value(iv);
    if (t.requires_grad(ia)) {
      auto ga = t.grad(ia);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += g[r * n + c] * vv[c];
      }
    }
    if (t.requires_grad(iv)) {
      auto gv = t.grad(iv);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < n; ++c) gv[c] += g[r * n + c] * av[r * n + c];
      }
    }
  });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  auto xv = x.value();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * inv_sqrt2));
  const int ix = x.id();
  return x.tape().record("gelu", x.shape(), std::move(out), {ix}, [ix, inv_sqrt2](Tape<T>& t, int self) {
    const T inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<T>;
    auto g = t.grad(self);
    auto xv = t.value(ix);
    auto gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T cdf = T(0.5) * (T(1) + std::erf(xv[i] * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * xv[i] * xv[i]);
      gx[i] += g[i] * (cdf + xv[i] * pdf);
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T s = T(0);
  for (T v : x.value()) s += v;
  const int ix = x.id();
  return x.tape().record("sum", Shape{1}, {s}, {ix}, [ix](Tape<T>& t, int self) {
    const T g = t.grad(self)[0];
    for (T& v : t.grad(ix)) v += g;
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  T s = T(0);
  for (T v : x.value()) s += v;
  const T inv = T(1) / static_cast<T>(x.numel());
  const int ix = x.id();
  return x.tape().record("mean", Shape{1}, {s * inv}, {ix}, [ix, inv](Tape<T>& t, int self) {
    const T g = t.grad(self)[0] * inv;
    for (T& v : t.grad(ix)) v += g;
  });
}

template <typename T>
Var<T> frobenius_norm(const Var<T>& x) {
  T s = T(0);
  for (T v : x.value()) s += v * v;
  const T norm = std::sqrt(s);
  const int ix = x.id();
  return x.tape().record("frobenius_norm", Shape{1}, {norm}, {ix}, [ix, norm](Tape<T>& t, int self) {
    if (norm == T(0)) return;
    const T g = t.grad(self)[0] / norm;
    auto xv = t.value(ix);
    auto gx = t.grad(ix);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * xv[i];
  });
}

template <typename T>
Var<T> softmax(const Var<T>& x) {
  const std::size_t n = x.cols(), rows = x.rows();
  auto xv = x.value();
  for (T v : xv) {
    if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");
  }
  std::vector<T> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * n;
    T* o = out.data() + r * n;
    const T mx = *std::max_element(in, in + n);
    T z = T(0);
    for (std::size_t c = 0; c < n; ++c) {
      o[c] = std::exp(in[c] - mx);
      z += o[c];
    }
    for (std::size_t c = 0; c < n; ++c) o[c] /= z;
  }
  const int ix = x.id();
  return x.tape().record("softmax", x.shape(), std::move(out), {ix}, [ix, n, rows](Tape<T>& t, int self) {
    auto g = t.grad(self);
    auto y = t.value(self);
    auto gx = t.grad(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = T(0);
      for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * y[r * n + c];
      for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += y[r * n + c] * (g[r * n + c] - dot);
    }
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
  Tape<T>& tape = same_tape(x, gain, "layer_norm");
  const std::size_t d = x.cols(), rows = x.rows();
  if (d == 0) throw ShapeError("layer_norm: zero feature dimension");
  if (gain.numel() != d || bias.numel() != d) throw ShapeError("layer_norm: gain/bias must have " + std::to_string(d) + " elements");
  auto xv = x.value(), gv = gain.value(), bv = bias.value();
  std::vector<T> out(xv.size()), xhat(xv.size()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * d;
    T mu = T(0);
    for (std::size_t c = 0; c < d; ++c) mu += in[c];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t c = 0; c < d; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (in[c] - mu) * rstd[r];
      out[r * d + c] = xhat[r * d + c] * gv[c] + bv[c];
    }
  }
  const int ix = x.id(), ig = gain.id(), ib = bias.id();
  return tape.record("layer_norm", x.shape(), std::move(out), {ix, ig, ib},
                     [ix, ig, ib, d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, int self) {
                       auto g = t.grad(self);
                       auto gv = t.value(ig);
                       if (t.requires_grad(ig)) {
                         auto gg = t.grad(ig);
                         for (std::size_t i = 0; i < g.size(); ++i) gg[i % d] += g[i] * xhat[i];
                       }
                       if (t.requires_grad(ib)) {
                         auto gb = t.grad(ib);
                         for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
                       }
                       if (!t.requires_grad(ix)) return;
                       auto gx = t.grad(ix);
                       std::vector<T> dxhat(d);
                       for (std::size_t r = 0; r < rows; ++r) {
                         T mean_d = T(0), mean_dx = T(0);
                         for (std::size_t c = 0; c < d; ++c) {
                           dxhat[c] = g[r * d + c] * gv[c];
                           mean_d += dxhat[c];
                           mean_dx += dxhat[c] * xhat[r * d + c];
                         }
                         mean_d /= static_cast<T>(d);
                         mean_dx /= static_cast<T>(d);
                         for (std::size_t c = 0; c < d; ++c) {
                           gx[r * d + c] += rstd[r] * (dxhat[c] - mean_d - xhat[r * d + c] * mean_dx);
                         }
                       }
                     });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  Var<T> y = matmul_nt(x, weight);
  return bias.valid() ? add_row_vector(y, bias) : y;
}

template <typename T>
Var<T> cross_entropy_with_label_smoothing(const Var<T>& logits, const std::vector<int>& labels, T smoothing) {
  const std::size_t classes = logits.cols(), batch = logits.rows();
  if (labels.size() != batch) throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(batch));
  if (smoothing < T(0) || smoothing > T(1)) throw std::invalid_argument("cross_entropy: smoothing outside [0, 1]");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
  }
  auto lv = logits.value();
  std::vector<T> prob(lv.size());
  const T off = smoothing / static_cast<T>(classes);
  T total = T(0);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* in = lv.data() + b * classes;
    const T mx = *std::max_element(in, in + classes);
    T z = T(0);
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(in[c] - mx);
    const T lse = mx + std::log(z);
    for (std::size_t c = 0; c < classes; ++c) {
      const T logp = in[c] - lse;
      prob[b * classes + c] = std::exp(logp);
      const T q = off + (static_cast<int>(c) == labels[b] ? T(1) - smoothing : T(0));
      total -= q * logp;
    }
  }
  const T inv_batch = T(1) / static_cast<T>(batch);
  const int il = logits.id();
  return logits.tape().record(
      "cross_entropy", Shape{1}, {total * inv_batch}, {il},
      [il, classes, batch, off, smoothing, inv_batch, labels, prob = std::move(prob)](Tape<T>& t, int self) {
        const T g = t.grad(self)[0] * inv_batch;
        auto gl = t.grad(il);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t c = 0; c < classes; ++c) {
            const T q = off + (static_cast<int>(c) == labels[b] ? T(1) - smoothing : T(0));
            gl[b * classes + c] += g * (prob[b * classes + c] - q);
          }
        }
      });
}

template <typename T>
Var<T> batch_norm_1d(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, BatchNormStats<T>& stats,
                     bool training) {
  Tape<T>& tape = same_tape(x, gain, "batch_norm_1d");
  require_matrix(x, "batch_norm_1d");
  const std::size_t batch = x.rows(), d = x.cols();
  const bool has_bias = bias.valid();
  if (gain.numel() != d || (has_bias && bias.numel() != d) || stats.running_mean.size() != d ||
      stats.running_var.size() != d) {
    throw ShapeError("batch_norm_1d: parameter size mismatch for feature dim " + std::to_string(d));
  }
  if (training && batch < 2) throw ShapeError("batch_norm_1d: training mode needs at least 2 rows");
  auto xv = x.value(), gv = gain.value();
  std::vector<T> xhat(xv.size()), rstd(d), out(xv.size());
  for (std::size_t c = 0; c < d; ++c) {
    T mu, var;
    if (training) {
      mu = T(0);
      for (std::size_t b = 0; b < batch; ++b) mu += xv[b * d + c];
      mu /= static_cast<T>(batch);
      var = T(0);
      for (std::size_t b = 0; b < batch; ++b) var += (xv[b * d + c] - mu) * (xv[b * d + c] - mu);
      var /= static_cast<T>(batch);
      const T unbiased = var * static_cast<T>(batch) / static_cast<T>(batch - 1);
      stats.running_mean[c] = (T(1) - stats.momentum) * stats.running_mean[c] + stats.momentum * mu;
      stats.running_var[c] = (T(1) - stats.momentum) * stats.running_var[c] + stats.momentum * unbiased;
    } else {
      mu = stats.running_mean[c];
      var = stats.running_var[c];
    }
    rstd[c] = T(1) / std::sqrt(var + stats.eps);
    const T shift = has_bias ? bias.value()[c] : T(0);
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t i = b * d + c;
      xhat[i] = (xv[i] - mu) * rstd[c];
      out[i] = xhat[i] * gv[c] + shift;
    }
  }
  const int ix = x.id(), ig = gain.id(), ib = has_bias ? bias.id() : -1;
  std::vector<int> inputs{ix, ig};
  if (has_bias) inputs.push_back(ib);
  return tape.record(
      "batch_norm_1d", x.shape(), std::move(out), std::move(inputs),
      [ix, ig, ib, batch, d, training, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, int self) {
        auto g = t.grad(self);
        auto gv = t.value(ig);
        if (t.requires_grad(ig)) {
          auto gg = t.grad(ig);
          for (std::size_t i = 0; i < g.size(); ++i) gg[i % d] += g[i] * xhat[i];
        }
        if (ib >= 0 && t.requires_grad(ib)) {
          auto gb = t.grad(ib);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
        }
        if (!t.requires_grad(ix)) return;
        auto gx = t.grad(ix);
        for (std::size_t c = 0; c < d; ++c) {
          if (!training) {
            for (std::size_t b = 0; b < batch; ++b) gx[b * d + c] += g[b * d + c] * gv[c] * rstd[c];
            continue;
          }
          T mean_d = T(0), mean_dx = T(0);
          for (std::size_t b = 0; b < batch; ++b) {
            const T dxh = g[b * d + c] * gv[c];
            mean_d += dxh;
            mean_dx += dxh * xhat[b * d + c];
          }
          mean_d /= static_cast<T>(batch);
          mean_dx /= static_cast<T>(batch);
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t i = b * d + c;
            gx[i] += rstd[c] * (g[i] * gv[c] - mean_d - xhat[i] * mean_dx);
          }
        }
      });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts[0].rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  std::vector<int> ids;
  for (const auto& p : parts) {
    same_tape(parts[0], p, "concat_cols");
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    widths.push_back(p.cols());
    ids.push_back(p.id());
    total += p.cols();
  }
  std::vector<T> out(rows * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto v = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.data() + r * widths[k], widths[k], out.data() + r * total + off);
    }
    off += widths[k];
  }
  return parts[0].tape().record("concat_cols", matrix_shape(rows, total), std::move(out), ids,
                                [ids, widths, rows, total](Tape<T>& t, int self) {
                                  auto g = t.grad(self);
                                  std::size_t off = 0;
                                  for (std::size_t k = 0; k < ids.size(); ++k) {
                                    if (t.requires_grad(ids[k])) {
                                      auto gk = t.grad(ids[k]);
                                      for (std::size_t r = 0; r < rows; ++r) {
                                        for (std::size_t c = 0; c < widths[k]; ++c) gk[r * widths[k] + c] += g[r * total + off + c];
                                      }
                                    }
                                    off += widths[k];
                                  }
                                });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t cols = parts[0].cols();
  std::vector<int> ids;
  std::vector<std::size_t> sizes;
  std::vector<T> out;
  for (const auto& p : parts) {
    same_tape(parts[0], p, "concat_rows");
    if (p.cols() != cols) throw ShapeError("concat_rows: column counts differ");
    ids.push_back(p.id());
    sizes.push_back(p.numel());
    auto v = p.value();
    out.insert(out.end(), v.begin(), v.end());
  }
  const std::size_t rows = out.size() / cols;
  return parts[0].tape().record("concat_rows", matrix_shape(rows, cols), std::move(out), ids,
                                [ids, sizes](Tape<T>& t, int self) {
                                  auto g = t.grad(self);
                                  std::size_t off = 0;
                                  for (std::size_t k = 0; k < ids.size(); ++k) {
                                    if (t.requires_grad(ids[k])) {
                                      auto gk = t.grad(ids[k]);
                                      for (std::size_t i = 0; i < sizes[k]; ++i) gk[i] += g[off + i];
                                    }
                                    off += sizes[k];
                                  }
                                });
}

template <typename T>
Var<T> gather_rows(const Var<T>& x, const std::vector<std::size_t>& indices) {
  const std::size_t cols = x.cols(), rows = x.rows();
  if (indices.empty()) throw ShapeError("gather_rows: empty index list");
  auto xv = x.value();
  std::vector<T> out(indices.size() * cols);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) throw ShapeError("gather_rows: index " + std::to_string(indices[i]) + " >= " + std::to_string(rows));
    std::copy_n(xv.data() + indices[i] * cols, cols, out.data() + i * cols);
  }
  const int ix = x.id();
  return x.tape().record("gather_rows", matrix_shape(indices.size(), cols), std::move(out), {ix},
                         [ix, cols, indices](Tape<T>& t, int self) {
                           auto g = t.grad(self);
                           auto gx = t.grad(ix);
                           for (std::size_t i = 0; i < indices.size(); ++i) {
                             for (std::size_t c = 0; c < cols; ++c) gx[indices[i] * cols + c] += g[i * cols + c];
                           }
                         });
}

template <typename T>
Var<T> slice_cols(const Var<T>& x, std::size_t begin, std::size_t end) {
  const std::size_t cols = x.cols(), rows = x.rows();
  if (begin >= end || end > cols) throw ShapeError("slice_cols: bad range [" + std::to_string(begin) + ", " + std::to_string(end) + ")");
  const std::size_t w = end - begin;
  auto xv = x.value();
  std::vector<T> out(rows * w);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(xv.data() + r * cols + begin, w, out.data() + r * w);
  const int ix = x.id();
  return x.tape().record("slice_cols", matrix_shape(rows, w), std::move(out), {ix},
                         [ix, rows, cols, begin, w](Tape<T>& t, int self) {
                           auto g = t.grad(self);
                           auto gx = t.grad(ix);
                           for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t c = 0; c < w; ++c) gx[r * cols + begin + c] += g[r * w + c];
                           }
                         });
}

template <typename T>
Var<T> mean_pool(const Var<T>& x, std::size_t groups) {
  const std::size_t cols = x.cols(), rows = x.rows();
  if (groups == 0 || rows % groups != 0) throw ShapeError("mean_pool: " + std::to_string(rows) + " rows not divisible into " + std::to_string(groups) + " groups");
  const std::size_t n = rows / groups;
  const T inv = T(1) / static_cast<T>(n);
  auto xv = x.value();
  std::vector<T> out(groups * cols, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[(r / n) * cols + c] += xv[r * cols + c];
  }
  for (T& v : out) v *= inv;
  const int ix = x.id();
  return x.tape().record("mean_pool", matrix_shape(groups, cols), std::move(out), {ix},
                         [ix, rows, cols, n, inv](Tape<T>& t, int self) {
                           auto g = t.grad(self);
                           auto gx = t.grad(ix);
                           for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[(r / n) * cols + c] * inv;
                           }
                         });
}

template <typename T>
Var<T> l2_normalize_rows(const Var<T>& x, T min_norm) {
  const std::size_t cols = x.cols(), rows = x.rows();
  auto xv = x.value();
  std::vector<T> out(xv.size()), norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T s = T(0);
    for (std::size_t c = 0; c < cols; ++c) s += xv[r * cols + c] * xv[r * cols + c];
    norms[r] = std::sqrt(s);
    if (!(norms[r] >= min_norm)) throw NumericError("l2_normalize_rows: row " + std::to_string(r) + " has zero norm");
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] / norms[r];
  }
  const int ix = x.id();
  return x.tape().record("l2_normalize_rows", x.shape(), std::move(out), {ix},
                         [ix, rows, cols, norms = std::move(norms)](Tape<T>& t, int self) {
                           auto g = t.grad(self);
                           auto y = t.value(self);
                           auto gx = t.grad(ix);
                           for (std::size_t r = 0; r < rows; ++r) {
                             T dot = T(0);
                             for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
                             for (std::size_t c = 0; c < cols; ++c) {
                               gx[r * cols + c] += (g[r * cols + c] - y[r * cols + c] * dot) / norms[r];
                             }
                           }
                         });
}

template <typename T>
Var<T> group_max_cols(const Var<T>& x, std::size_t k) {
  const std::size_t cols = x.cols(), rows = x.rows();
  if (k == 0 || cols % k != 0) throw ShapeError("group_max_cols: " + std::to_string(cols) + " columns not divisible by " + std::to_string(k));
  const std::size_t groups = cols / k;
  auto xv = x.value();
  std::vector<T> out(rows * groups);
  std::vector<std::size_t> arg(rows * groups);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t gidx = 0; gidx < groups; ++gidx) {
      const std::size_t base = r * cols + gidx * k;
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j) {
        if (xv[base + j] > xv[base + best]) best = j;
      }
      out[r * groups + gidx] = xv[base + best];
      arg[r * groups + gidx] = base + best;
    }
  }
  const int ix = x.id();
  return x.tape().record("group_max_cols", matrix_shape(rows, groups), std::move(out), {ix},
                         [ix, arg = std::move(arg)](Tape<T>& t, int self) {
                           auto g = t.grad(self);
                           auto gx = t.grad(ix);
                           for (std::size_t i = 0; i < g.size(); ++i) gx[arg[i]] += g[i];
                         });
}

template <typename T>
Var<T> select_rows(const std::vector<Var<T>>& candidates, const std::vector<std::size_t>& choice) {
  if (candidates.empty()) throw ShapeError("select_rows: no candidates");
  const Shape& shape = candidates[0].shape();
  const std::size_t cols = candidates[0].cols(), rows = candidates[0].rows();
  std::vector<int> ids;
  for (const auto& c : candidates) {
    same_tape(candidates[0], c, "select_rows");
    if (c.shape() != shape) throw ShapeError("select_rows: candidate shapes differ");
    ids.push_back(c.id());
  }
  if (choice.size() != rows) throw ShapeError("select_rows: choice length differs from row count");
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    if (choice[r] >= candidates.size()) throw ShapeError("select_rows: choice out of range");
    auto v = candidates[choice[r]].value();
    std::copy_n(v.data() + r * cols, cols, out.data() + r * cols);
  }
  return candidates[0].tape().record("select_rows", shape, std::move(out), ids,
                                     [ids, choice, cols](Tape<T>& t, int self) {
                                       auto g = t.grad(self);
                                       for (std::size_t r = 0; r < choice.size(); ++r) {
                                         const int id = ids[choice[r]];
                                         if (!t.requires_grad(id)) continue;
                                         auto gi = t.grad(id);
                                         for (std::size_t c = 0; c < cols; ++c) gi[r * cols + c] += g[r * cols + c];
                                       }
                                     });
}

template <typename T>
Var<T> straight_through(const Tensor<T>& hard, const Var<T>& soft) {
  if (hard.shape() != soft.shape()) throw ShapeError("straight_through: hard " + shape_str(hard.shape()) + " vs soft " + shape_str(soft.shape()));
  const int is = soft.id();
  return soft.tape().record("straight_through", hard.shape(), hard.storage(), {is}, [is](Tape<T>& t, int self) {
    auto g = t.grad(self);
    auto gs = t.grad(is);
    for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i];
  });
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t batch, std::size_t seq,
                 std::size_t heads, std::vector<T>* weights) {
  Tape<T>& tape = same_tape(q, k, "attention");
  same_tape(q, v, "attention");
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  const std::size_t d = q.cols();
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: embed dim " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  if (q.rows() != batch * seq) throw ShapeError("attention: expected " + std::to_string(batch * seq) + " rows");
  const std::size_t dh = d / heads;
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(dh));
  auto qv = q.value(), kv = k.value(), vv = v.value();
  std::vector<T> probs(batch * heads * seq * seq);
  std::vector<T> out(batch * seq * d, T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      T* p = probs.data() + (b * heads + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        const T* qi = qv.data() + (b * seq + i) * d + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < seq; ++j) {
          const T* kj = kv.data() + (b * seq + j) * d + h * dh;
          T s = T(0);
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          p[i * seq + j] = s * inv_scale;
          mx = std::max(mx, p[i * seq + j]);
        }
        T z = T(0);
        for (std::size_t j = 0; j < seq; ++j) {
          p[i * seq + j] = std::exp(p[i * seq + j] - mx);
          z += p[i * seq + j];
        }
        T* oi = out.data() + (b * seq + i) * d + h * dh;
        for (std::size_t j = 0; j < seq; ++j) {
          p[i * seq + j] /= z;
          const T* vj = vv.data() + (b * seq + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[i * seq + j] * vj[c];
        }
      }
    }
  }
  if (weights != nullptr) *weights = probs;
  const int iq = q.id(), ik = k.id(), iv = v.id();
  return tape.record(
      "attention", q.shape(), std::move(out), {iq, ik, iv},
      [iq, ik, iv, batch, seq, heads, d, dh, inv_scale, probs = std::move(probs)](Tape<T>& t, int self) {
        auto g = t.grad(self);
        auto qv = t.value(iq), kv = t.value(ik), vv = t.value(iv);
        const bool need_q = t.requires_grad(iq), need_k = t.requires_grad(ik), need_v = t.requires_grad(iv);
        std::span<T> gq, gk, gv;
        if (need_q) gq = t.grad(iq);
        if (need_k) gk = t.grad(ik);
        if (need_v) gv = t.grad(iv);
        std::vector<T> dp(seq);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const T* p = probs.data() + (b * heads + h) * seq * seq;
            for (std::size_t i = 0; i < seq; ++i) {
              const T* gi = g.data() + (b * seq + i) * d + h * dh;
              T dot = T(0);
              for (std::size_t j = 0; j < seq; ++j) {
                const T* vj = vv.data() + (b * seq + j) * d + h * dh;
                T s = T(0);
                for (std::size_t c = 0; c < dh; ++c) s += gi[c] * vj[c];
                dp[j] = s;
                dot += s * p[i * seq + j];
                if (need_v) {
                  T* gvj = gv.data() + (b * seq + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += p[i * seq + j] * gi[c];
                }
              }
              const T* qi = qv.data() + (b * seq + i) * d + h * dh;
              for (std::size_t j = 0; j < seq; ++j) {
                const T ds = p[i * seq + j] * (dp[j] - dot) * inv_scale;
                if (ds == T(0)) continue;
                if (need_q) {
                  const T* kj = kv.data() + (b * seq + j) * d + h * dh;
                  T* gqi = gq.data() + (b * seq + i) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                }
                if (need_k) {
                  T* gkj = gk.data() + (b * seq + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> multi_head_attention(const Var<T>& x, const AttentionParams<T>& params, std::size_t batch, std::size_t seq,
                            std::size_t heads, std::vector<T>* weights) {
  if (heads == 0 || x.cols() % heads != 0) {
    throw ShapeError("multi_head_attention: embed dim " + std::to_string(x.cols()) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  Var<T> q = linear(x, params.q_weight, params.q_bias);
  Var<T> k = linear(x, params.k_weight, params.k_bias);
  Var<T> v = linear(x, params.v_weight, params.v_bias);
  return linear(attention(q, k, v, batch, seq, heads, weights), params.out_weight, params.out_bias);
}

#define DDRN_INSTANTIATE_OPS(T)                                                                               \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                                      \
  template Var<T> matmul_nt(const Var<T>&, const Var<T>&);                                                   \
  template Var<T> transpose(const Var<T>&);                                                                  \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                         \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                         \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                         \
  template Var<T> scale(const Var<T>&, T);                                                                   \
  template Var<T> add_row_vector(const Var<T>&, const Var<T>&);                                              \
  template Var<T> mul_row_vector(const Var<T>&, const Var<T>&);                                              \
  template Var<T> gelu(const Var<T>&);                                                                       \
  template Var<T> sum(const Var<T>&);                                                                        \
  template Var<T> mean(const Var<T>&);                                                                       \
  template Var<T> frobenius_norm(const Var<T>&);                                                             \
  template Var<T> softmax(const Var<T>&);                                                                    \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                                \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                                       \
  template Var<T> cross_entropy_with_label_smoothing(const Var<T>&, const std::vector<int>&, T);             \
  template Var<T> batch_norm_1d(const Var<T>&, const Var<T>&, const Var<T>&, BatchNormStats<T>&, bool);      \
  template Var<T> concat_cols(const std::vector<Var<T>>&);                                                   \
  template Var<T> concat_rows(const std::vector<Var<T>>&);                                                   \
  template Var<T> gather_rows(const Var<T>&, const std::vector<std::size_t>&);                               \
  template Var<T> slice_cols(const Var<T>&, std::size_t, std::size_t);                                       \
  template Var<T> mean_pool(const Var<T>&, std::size_t);                                                     \
  template Var<T> l2_normalize_rows(const Var<T>&, T);                                                       \
  template Var<T> group_max_cols(const Var<T>&, std::size_t);                                                \
  template Var<T> select_rows(const std::vector<Var<T>>&, const std::vector<std::size_t>&);                  \
  template Var<T> straight_through(const Tensor<T>&, const Var<T>&);                                         \
  template Var<T> attention(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t, std::size_t,           \
                            std::size_t, std::vector<T>*);                                                \
  template Var<T> multi_head_attention(const Var<T>&, const AttentionParams<T>&, std::size_t, std::size_t,     \
                                       std::size_t, std::vector<T>*);

DDRN_INSTANTIATE_OPS(float)
DDRN_INSTANTIATE_OPS(double)

#undef DDRN_INSTANTIATE_OPS

}  // namespace ddrn
