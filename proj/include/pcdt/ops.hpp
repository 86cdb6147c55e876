#pragma once

// Differentiable tensor operations. Forward values are checked finite; each
// op that participates in training carries an analytic backward verified by
// the finite-difference suite in gradcheck.hpp.
//
// Dense products are routed through OpenBLAS dgemm, pinned to one thread so
// results are reproducible run to run. The naive triple-loop product lives in
// the test suite as the independent oracle for this kernel.

#include <cblas.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <memory>
#include <vector>

#include "pcdt/tensor.hpp"

extern "C" void openblas_set_num_threads(int);

namespace pcdt {

namespace detail {

inline void blas_init_once() {
  static const bool done = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)done;
}

// C[m,n] (+)= alpha * op(A) op(B) with row-major leading dimensions.
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb,
                 double beta, double* c, int ldc) {
  blas_init_once();
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
              ldb, beta, c, ldc);
}

inline int last_dim(const Tensor& t) { return t.shape().back(); }

inline std::size_t leading_rows(const Tensor& t) {
  return t.numel() / static_cast<std::size_t>(last_dim(t));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul: a[m,k] * b[k,n]
// ---------------------------------------------------------------------------
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw DimensionError("matmul: expects 2-D operands");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dimensions disagree " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  detail::gemm(false, false, m, n, k, 1.0, a.data(), k, b.data(), n, 0.0,
               out.data(), n);
  auto backward = [m, k, n](detail::TensorImpl& self) {
    Tensor& pa = self.parents[0];
    Tensor& pb = self.parents[1];
    const double* g = self.grad.data();
    if (pa.requires_grad())  // dA += dC * B^T
      detail::gemm(false, true, m, k, n, 1.0, g, n, pb.data(), n, 1.0,
                   pa.grad(), k);
    if (pb.requires_grad())  // dB += A^T * dC
      detail::gemm(true, false, k, n, m, 1.0, pa.data(), k, g, n, 1.0,
                   pb.grad(), n);
  };
  return detail::make_op_result({m, n}, std::move(out), {a, b},
                                std::move(backward), "matmul");
}

// ---------------------------------------------------------------------------
// linear: x[..., D] * w[D, E] + bias[E]
// ---------------------------------------------------------------------------
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (w.ndim() != 2) throw DimensionError("linear: weight must be 2-D");
  const int d = detail::last_dim(x), e = w.dim(1);
  if (w.dim(0) != d)
    throw DimensionError("linear: input dim " + std::to_string(d) +
                         " vs weight " + shape_str(w.shape()));
  const bool has_bias = bias.defined();
  if (has_bias && (bias.ndim() != 1 || bias.dim(0) != e))
    throw DimensionError("linear: bias shape mismatch");
  const int rows = static_cast<int>(detail::leading_rows(x));
  std::vector<double> out(static_cast<std::size_t>(rows) * e);
  if (has_bias) {
    for (int r = 0; r < rows; ++r)
      std::memcpy(out.data() + static_cast<std::size_t>(r) * e, bias.data(),
                  sizeof(double) * static_cast<std::size_t>(e));
    detail::gemm(false, false, rows, e, d, 1.0, x.data(), d, w.data(), e, 1.0,
                 out.data(), e);
  } else {
    detail::gemm(false, false, rows, e, d, 1.0, x.data(), d, w.data(), e, 0.0,
                 out.data(), e);
  }
  Shape out_shape = x.shape();
  out_shape.back() = e;
  std::vector<Tensor> parents = has_bias
                                    ? std::vector<Tensor>{x, w, bias}
                                    : std::vector<Tensor>{x, w};
  auto backward = [rows, d, e, has_bias](detail::TensorImpl& self) {
    Tensor& px = self.parents[0];
    Tensor& pw = self.parents[1];
    const double* g = self.grad.data();
    if (px.requires_grad())
      detail::gemm(false, true, rows, d, e, 1.0, g, e, pw.data(), e, 1.0,
                   px.grad(), d);
    if (pw.requires_grad())
      detail::gemm(true, false, d, e, rows, 1.0, px.data(), d, g, e, 1.0,
                   pw.grad(), e);
    if (has_bias && self.parents[2].requires_grad()) {
      double* bg = self.parents[2].grad();
      for (int r = 0; r < rows; ++r) {
        const double* row = g + static_cast<std::size_t>(r) * e;
        for (int j = 0; j < e; ++j) bg[j] += row[j];
      }
    }
  };
  return detail::make_op_result(std::move(out_shape), std::move(out),
                                std::move(parents), std::move(backward),
                                "linear");
}

inline Tensor linear(const Tensor& x, const Tensor& w) {
  return linear(x, w, Tensor());
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------
inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("add: shape mismatch");
  std::size_t n = a.numel();
  std::vector<double> out(n);
  const double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] + pb[i];
  auto backward = [n](detail::TensorImpl& self) {
    const double* g = self.grad.data();
    for (int side = 0; side < 2; ++side) {
      Tensor& p = self.parents[side];
      if (!p.requires_grad()) continue;
      double* pg = p.grad();
      for (std::size_t i = 0; i < n; ++i) pg[i] += g[i];
    }
  };
  return detail::make_op_result(a.shape(), std::move(out), {a, b},
                                std::move(backward), "add");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("mul: shape mismatch");
  std::size_t n = a.numel();
  std::vector<double> out(n);
  const double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] * pb[i];
  auto backward = [n](detail::TensorImpl& self) {
    Tensor& pa = self.parents[0];
    Tensor& pb = self.parents[1];
    const double* g = self.grad.data();
    if (pa.requires_grad()) {
      double* pg = pa.grad();
      const double* other = pb.data();
      for (std::size_t i = 0; i < n; ++i) pg[i] += g[i] * other[i];
    }
    if (pb.requires_grad()) {
      double* pg = pb.grad();
      const double* other = pa.data();
      for (std::size_t i = 0; i < n; ++i) pg[i] += g[i] * other[i];
    }
  };
  return detail::make_op_result(a.shape(), std::move(out), {a, b},
                                std::move(backward), "mul");
}

inline Tensor scale(const Tensor& a, double c) {
  std::size_t n = a.numel();
  std::vector<double> out(n);
  const double* pa = a.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] * c;
  auto backward = [n, c](detail::TensorImpl& self) {
    Tensor& p = self.parents[0];
    if (!p.requires_grad()) return;
    double* pg = p.grad();
    const double* g = self.grad.data();
    for (std::size_t i = 0; i < n; ++i) pg[i] += g[i] * c;
  };
  return detail::make_op_result(a.shape(), std::move(out), {a},
                                std::move(backward), "scale");
}

inline Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  std::size_t n = x.numel();
  std::vector<double> out(n);
  const double* px = x.data();
  for (std::size_t i = 0; i < n; ++i)
    out[i] = 0.5 * px[i] * (1.0 + std::erf(px[i] * inv_sqrt2));
  auto backward = [n](detail::TensorImpl& self) {
    Tensor& p = self.parents[0];
    if (!p.requires_grad()) return;
    double* pg = p.grad();
    const double* g = self.grad.data();
    const double* px = p.data();
    for (std::size_t i = 0; i < n; ++i) {
      double cdf = 0.5 * (1.0 + std::erf(px[i] * inv_sqrt2));
      double pdf = inv_sqrt2pi * std::exp(-0.5 * px[i] * px[i]);
      pg[i] += g[i] * (cdf + px[i] * pdf);
    }
  };
  return detail::make_op_result(x.shape(), std::move(out), {x},
                                std::move(backward), "gelu");
}

// ---------------------------------------------------------------------------
// softmax over the last dimension, max-stabilized
// ---------------------------------------------------------------------------
inline Tensor softmax_lastdim(const Tensor& x) {
  const int d = detail::last_dim(x);
  const std::size_t rows = detail::leading_rows(x);
  std::vector<double> out(x.numel());
  const double* px = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = px + r * d;
    double* o = out.data() + r * d;
    double mx = in[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (int j = 0; j < d; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (int j = 0; j < d; ++j) o[j] /= sum;
  }
  auto saved = std::make_shared<std::vector<double>>(out);
  auto backward = [d, rows, saved](detail::TensorImpl& self) {
    Tensor& p = self.parents[0];
    if (!p.requires_grad()) return;
    double* pg = p.grad();
    const double* g = self.grad.data();
    const double* y = saved->data();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* gr = g + r * d;
      const double* yr = y + r * d;
      double dot = 0.0;
      for (int j = 0; j < d; ++j) dot += gr[j] * yr[j];
      double* pgr = pg + r * d;
      for (int j = 0; j < d; ++j) pgr[j] += yr[j] * (gr[j] - dot);
    }
  };
  return detail::make_op_result(x.shape(), std::move(out), {x},
                                std::move(backward), "softmax_lastdim");
}

// ---------------------------------------------------------------------------
// layer norm over the last dimension (biased variance, epsilon guard)
// ---------------------------------------------------------------------------
inline constexpr double kLayerNormEps = 1e-5;

inline Tensor layer_norm(const Tensor& x, const Tensor& gain,
                         const Tensor& bias, double eps = kLayerNormEps) {
  const int d = detail::last_dim(x);
  if (gain.ndim() != 1 || gain.dim(0) != d || bias.ndim() != 1 ||
      bias.dim(0) != d)
    throw DimensionError("layer_norm: gain/bias must match last dim " +
                         std::to_string(d));
  const std::size_t rows = detail::leading_rows(x);
  std::vector<double> out(x.numel());
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const double* px = x.data();
  const double* pgain = gain.data();
  const double* pbias = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = px + r * d;
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += in[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      double c = in[j] - mean;
      var += c * c;
    }
    var /= d;
    double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    double* xh = xhat->data() + r * d;
    double* o = out.data() + r * d;
    for (int j = 0; j < d; ++j) {
      xh[j] = (in[j] - mean) * inv;
      o[j] = pgain[j] * xh[j] + pbias[j];
    }
  }
  auto backward = [d, rows, xhat, inv_std](detail::TensorImpl& self) {
    Tensor& px = self.parents[0];
    Tensor& pgain = self.parents[1];
    Tensor& pbias = self.parents[2];
    const double* g = self.grad.data();
    const double* gainv = pgain.data();
    if (pgain.requires_grad() || pbias.requires_grad()) {
      double* gg = pgain.requires_grad() ? pgain.grad() : nullptr;
      double* bg = pbias.requires_grad() ? pbias.grad() : nullptr;
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = g + r * d;
        const double* xh = xhat->data() + r * d;
        for (int j = 0; j < d; ++j) {
          if (gg) gg[j] += gr[j] * xh[j];
          if (bg) bg[j] += gr[j];
        }
      }
    }
    if (px.requires_grad()) {
      double* pg = px.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = g + r * d;
        const double* xh = xhat->data() + r * d;
        double mean_dxh = 0.0, mean_dxh_xh = 0.0;
        for (int j = 0; j < d; ++j) {
          double dxh = gr[j] * gainv[j];
          mean_dxh += dxh;
          mean_dxh_xh += dxh * xh[j];
        }
        mean_dxh /= d;
        mean_dxh_xh /= d;
        double inv = (*inv_std)[r];
        double* pgr = pg + r * d;
        for (int j = 0; j < d; ++j) {
          double dxh = gr[j] * gainv[j];
          pgr[j] += inv * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
      }
    }
  };
  return detail::make_op_result(x.shape(), std::move(out), {x, gain, bias},
                                std::move(backward), "layer_norm");
}

// ---------------------------------------------------------------------------
// dropout (inverted scaling); identity when p == 0 or eval mode
// ---------------------------------------------------------------------------
inline Tensor dropout(const Tensor& x, double p, bool train_mode,
                      std::uint64_t seed) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must be in [0,1)");
  if (!train_mode || p == 0.0) return x;
  std::size_t n = x.numel();
  auto mask = std::make_shared<std::vector<double>>(n);
  Rng rng(seed);
  const double keep_scale = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < n; ++i)
    (*mask)[i] = rng.uniform() < p ? 0.0 : keep_scale;
  std::vector<double> out(n);
  const double* px = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = px[i] * (*mask)[i];
  auto backward = [n, mask](detail::TensorImpl& self) {
    Tensor& p0 = self.parents[0];
    if (!p0.requires_grad()) return;
    double* pg = p0.grad();
    const double* g = self.grad.data();
    for (std::size_t i = 0; i < n; ++i) pg[i] += g[i] * (*mask)[i];
  };
  return detail::make_op_result(x.shape(), std::move(out), {x},
                                std::move(backward), "dropout");
}

// ---------------------------------------------------------------------------
// slicing / gathering / packing
// ---------------------------------------------------------------------------
inline Tensor slice_lastdim(const Tensor& x, int offset, int len) {
  const int d = detail::last_dim(x);
  if (offset < 0 || len <= 0 || offset + len > d)
    throw DimensionError("slice_lastdim: range out of bounds");
  const std::size_t rows = detail::leading_rows(x);
  std::vector<double> out(rows * len);
  const double* px = x.data();
  for (std::size_t r = 0; r < rows; ++r)
    std::memcpy(out.data() + r * len, px + r * d + offset,
                sizeof(double) * static_cast<std::size_t>(len));
  Shape out_shape = x.shape();
  out_shape.back() = len;
  auto backward = [d, offset, len, rows](detail::TensorImpl& self) {
    Tensor& p = self.parents[0];
    if (!p.requires_grad()) return;
    double* pg = p.grad();
    const double* g = self.grad.data();
    for (std::size_t r = 0; r < rows; ++r) {
      double* dst = pg + r * d + offset;
      const double* src = g + r * len;
      for (int j = 0; j < len; ++j) dst[j] += src[j];
    }
  };
  return detail::make_op_result(std::move(out_shape), std::move(out), {x},
                                std::move(backward), "slice_lastdim");
}

// Gathers rows of a [M, D] tensor; backward scatter-adds.
inline Tensor gather_rows(const Tensor& x, std::vector<int> rows) {
  if (x.ndim() != 2) throw DimensionError("gather_rows: expects 2-D input");
  const int m = x.dim(0), d = x.dim(1);
  for (int r : rows)
    if (r < 0 || r >= m) throw DimensionError("gather_rows: index out of range");
  const int out_rows = static_cast<int>(rows.size());
  std::vector<double> out(static_cast<std::size_t>(out_rows) * d);
  const double* px = x.data();
  for (int i = 0; i < out_rows; ++i)
    std::memcpy(out.data() + static_cast<std::size_t>(i) * d,
                px + static_cast<std::size_t>(rows[i]) * d,
                sizeof(double) * static_cast<std::size_t>(d));
  auto idx = std::make_shared<std::vector<int>>(std::move(rows));
  auto backward = [d, idx](detail::TensorImpl& self) {
    Tensor& p = self.parents[0];
    if (!p.requires_grad()) return;
    double* pg = p.grad();
    const double* g = self.grad.data();
    for (std::size_t i = 0; i < idx->size(); ++i) {
      double* dst = pg + static_cast<std::size_t>((*idx)[i]) * d;
      const double* src = g + i * d;
      for (int j = 0; j < d; ++j) dst[j] += src[j];
    }
  };
  return detail::make_op_result({out_rows, d}, std::move(out), {x},
                                std::move(backward), "gather_rows");
}

// One output row's source: a row of sources[source], or zero fill when
// source < 0. Token sequences are assembled with precomputed slot tables.
struct SlotRef {
  int source = -1;
  int row = 0;
};

inline Tensor pack_rows(const std::vector<Tensor>& sources,
                        std::vector<SlotRef> slots, int width) {
  for (const Tensor& s : sources)
    if (s.ndim() != 2 || s.dim(1) != width)
      throw DimensionError("pack_rows: sources must be [rows, width]");
  const int m = static_cast<int>(slots.size());
  std::vector<double> out(static_cast<std::size_t>(m) * width, 0.0);
  for (int i = 0; i < m; ++i) {
    const SlotRef& s = slots[static_cast<std::size_t>(i)];
    if (s.source < 0) continue;
    if (s.source >= static_cast<int>(sources.size()) ||
        s.row >= sources[static_cast<std::size_t>(s.source)].dim(0))
      throw DimensionError("pack_rows: slot reference out of range");
    std::memcpy(out.data() + static_cast<std::size_t>(i) * width,
                sources[static_cast<std::size_t>(s.source)].data() +
                    static_cast<std::size_t>(s.row) * width,
                sizeof(double) * static_cast<std::size_t>(width));
  }
  auto table = std::make_shared<std::vector<SlotRef>>(std::move(slots));
  auto backward = [width, table](detail::TensorImpl& self) {
    const double* g = self.grad.data();
    for (std::size_t i = 0; i < table->size(); ++i) {
      const SlotRef& s = (*table)[i];
      if (s.source < 0) continue;
      Tensor& p = self.parents[static_cast<std::size_t>(s.source)];
      if (!p.requires_grad()) continue;
      double* dst = p.grad() + static_cast<std::size_t>(s.row) * width;
      const double* src = g + i * width;
      for (int j = 0; j < width; ++j) dst[j] += src[j];
    }
  };
  return detail::make_op_result({m, width}, std::move(out), sources,
                                std::move(backward), "pack_rows");
}

// Adds rows of a constant table (sinusoidal positions) selected per leading
// row; index -1 skips the addition. Not differentiable w.r.t. the table.
inline Tensor add_position_rows(const Tensor& x, const Tensor& table,
                                const std::vector<int>& pos) {
  const int d = detail::last_dim(x);
  if (table.ndim() != 2 || table.dim(1) != d)
    throw DimensionError("add_position_rows: table width mismatch");
  const std::size_t rows = detail::leading_rows(x);
  if (pos.size() != rows)
    throw DimensionError("add_position_rows: one index per row required");
  std::vector<double> out(x.numel());
  const double* px = x.data();
  const double* pt = table.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = px + r * d;
    double* o = out.data() + r * d;
    if (pos[r] < 0) {
      std::memcpy(o, in, sizeof(double) * static_cast<std::size_t>(d));
    } else {
      if (pos[r] >= table.dim(0))
        throw DimensionError("add_position_rows: position beyond table");
      const double* tr = pt + static_cast<std::size_t>(pos[r]) * d;
      for (int j = 0; j < d; ++j) o[j] = in[j] + tr[j];
    }
  }
  auto backward = [](detail::TensorImpl& self) {
    Tensor& p = self.parents[0];
    if (!p.requires_grad()) return;
    double* pg = p.grad();
    const double* g = self.grad.data();
    for (std::size_t i = 0; i < self.numel(); ++i) pg[i] += g[i];
  };
  return detail::make_op_result(x.shape(), std::move(out), {x},
                                std::move(backward), "add_position_rows");
}

// ---------------------------------------------------------------------------
// masked mean-squared error: mean over valid last-dim slices
// ---------------------------------------------------------------------------
inline Tensor masked_mse(const Tensor& pred, const Tensor& target,
                         const std::vector<std::uint8_t>& valid) {
  if (pred.shape() != target.shape())
    throw DimensionError("masked_mse: shape mismatch");
  const int d = detail::last_dim(pred);
  const std::size_t rows = detail::leading_rows(pred);
  if (valid.size() != rows)
    throw DimensionError("masked_mse: one validity flag per slice required");
  std::size_t n_valid = 0;
  for (auto v : valid) n_valid += v ? 1 : 0;
  if (n_valid == 0) throw DataError("masked_mse: no valid positions");
  const double denom = static_cast<double>(n_valid) * d;
  double loss = 0.0;
  const double* pp = pred.data();
  const double* pt = target.data();
  for (std::size_t r = 0; r < rows; ++r) {
    if (!valid[r]) continue;
    const double* a = pp + r * d;
    const double* b = pt + r * d;
    for (int j = 0; j < d; ++j) {
      double c = a[j] - b[j];
      loss += c * c;
    }
  }
  loss /= denom;
  auto mask = std::make_shared<std::vector<std::uint8_t>>(valid);
  auto backward = [d, rows, denom, mask](detail::TensorImpl& self) {
    Tensor& p = self.parents[0];
    Tensor& t = self.parents[1];
    const double g = self.grad[0];
    if (!p.requires_grad()) return;
    double* pg = p.grad();
    const double* pp = p.data();
    const double* pt = t.data();
    const double c = 2.0 * g / denom;
    for (std::size_t r = 0; r < rows; ++r) {
      if (!(*mask)[r]) continue;
      double* dst = pg + r * d;
      const double* a = pp + r * d;
      const double* b = pt + r * d;
      for (int j = 0; j < d; ++j) dst[j] += c * (a[j] - b[j]);
    }
  };
  return detail::make_op_result({1}, {loss}, {pred, target},
                                std::move(backward), "masked_mse");
}

inline Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  const double* px = x.data();
  for (std::size_t i = 0; i < x.numel(); ++i) s += px[i];
  auto backward = [](detail::TensorImpl& self) {
    Tensor& p = self.parents[0];
    if (!p.requires_grad()) return;
    double* pg = p.grad();
    const double g = self.grad[0];
    for (std::size_t i = 0; i < p.numel(); ++i) pg[i] += g;
  };
  return detail::make_op_result({1}, {s}, {x}, std::move(backward), "sum_all");
}

// ---------------------------------------------------------------------------
// fused multi-head attention core
// ---------------------------------------------------------------------------
// q, k, v: [B, T, D] already projected. key_valid (empty = all valid) marks
// real tokens per (batch, position); invalid queries fall back to a one-hot
// on themselves so their output stays finite (downstream masks discard it).
// Causal mode zeroes weights to any j > i exactly (-inf logits).
struct AttentionProbe {
  int batch = 0, heads = 0, length = 0;
  std::vector<double> weights;  // post-softmax, pre-dropout [B,h,T,T]
};

inline Tensor attention_mix(const Tensor& q, const Tensor& k, const Tensor& v,
                            int num_heads, bool causal,
                            const std::vector<std::uint8_t>& key_valid,
                            double attn_drop_p, bool train_mode,
                            std::uint64_t seed,
                            AttentionProbe* probe = nullptr) {
  if (q.ndim() != 3 || q.shape() != k.shape() || q.shape() != v.shape())
    throw DimensionError("attention_mix: q/k/v must share [B,T,D]");
  const int bsz = q.dim(0), t = q.dim(1), d = q.dim(2);
  if (num_heads <= 0 || d % num_heads != 0)
    throw DimensionError("attention_mix: heads must divide hidden size");
  if (!key_valid.empty() &&
      key_valid.size() != static_cast<std::size_t>(bsz) * t)
    throw DimensionError("attention_mix: key_valid must be [B*T]");
  const int dh = d / num_heads;
  const double alpha = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t tt = static_cast<std::size_t>(t) * t;
  auto weights = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(bsz) * num_heads * tt);
  std::shared_ptr<std::vector<double>> dropmask;
  const bool use_drop = train_mode && attn_drop_p > 0.0;
  if (use_drop) {
    dropmask = std::make_shared<std::vector<double>>(weights->size());
    Rng rng(seed);
    const double keep = 1.0 / (1.0 - attn_drop_p);
    for (auto& m : *dropmask) m = rng.uniform() < attn_drop_p ? 0.0 : keep;
  }
  std::vector<double> out(q.numel(), 0.0);
  std::vector<double> logits(tt);
  auto valid_at = [&](int b, int i) {
    return key_valid.empty() || key_valid[static_cast<std::size_t>(b) * t + i];
  };
  for (int b = 0; b < bsz; ++b) {
    for (int h = 0; h < num_heads; ++h) {
      const std::size_t head_off =
          (static_cast<std::size_t>(b) * t) * d + static_cast<std::size_t>(h) * dh;
      const double* qh = q.data() + head_off;
      const double* kh = k.data() + head_off;
      const double* vh = v.data() + head_off;
      detail::gemm(false, true, t, t, dh, alpha, qh, d, kh, d, 0.0,
                   logits.data(), t);
      double* w = weights->data() +
                  (static_cast<std::size_t>(b) * num_heads + h) * tt;
      for (int i = 0; i < t; ++i) {
        double* wrow = w + static_cast<std::size_t>(i) * t;
        if (!valid_at(b, i)) {
          for (int j = 0; j < t; ++j) wrow[j] = (j == i) ? 1.0 : 0.0;
          continue;
        }
        const double* lrow = logits.data() + static_cast<std::size_t>(i) * t;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < t; ++j) {
          bool allowed = valid_at(b, j) && (!causal || j <= i);
          if (allowed) mx = std::max(mx, lrow[j]);
        }
        double sum = 0.0;
        for (int j = 0; j < t; ++j) {
          bool allowed = valid_at(b, j) && (!causal || j <= i);
          wrow[j] = allowed ? std::exp(lrow[j] - mx) : 0.0;
          sum += wrow[j];
        }
        for (int j = 0; j < t; ++j) wrow[j] /= sum;
      }
      double* oh = out.data() + head_off;
      if (use_drop) {
        const double* m = dropmask->data() +
                          (static_cast<std::size_t>(b) * num_heads + h) * tt;
        std::vector<double> wtilde(tt);
        for (std::size_t i = 0; i < tt; ++i) wtilde[i] = w[i] * m[i];
        detail::gemm(false, false, t, dh, t, 1.0, wtilde.data(), t, vh, d, 0.0,
                     oh, d);
      } else {
        detail::gemm(false, false, t, dh, t, 1.0, w, t, vh, d, 0.0, oh, d);
      }
    }
  }
  if (probe) {
    probe->batch = bsz;
    probe->heads = num_heads;
    probe->length = t;
    probe->weights = *weights;
  }
  auto backward = [bsz, t, d, dh, num_heads, alpha, tt, weights,
                   dropmask](detail::TensorImpl& self) {
    Tensor& pq = self.parents[0];
    Tensor& pk = self.parents[1];
    Tensor& pv = self.parents[2];
    const bool need_q = pq.requires_grad(), need_k = pk.requires_grad(),
               need_v = pv.requires_grad();
    std::vector<double> dW(tt), dL(tt), wtilde(tt);
    for (int b = 0; b < bsz; ++b) {
      for (int h = 0; h < num_heads; ++h) {
        const std::size_t head_off = (static_cast<std::size_t>(b) * t) * d +
                                     static_cast<std::size_t>(h) * dh;
        const double* go = self.grad.data() + head_off;
        const double* w =
            weights->data() + (static_cast<std::size_t>(b) * num_heads + h) * tt;
        const double* m =
            dropmask ? dropmask->data() +
                           (static_cast<std::size_t>(b) * num_heads + h) * tt
                     : nullptr;
        for (std::size_t i = 0; i < tt; ++i)
          wtilde[i] = m ? w[i] * m[i] : w[i];
        // dW~ = dOut * V^T
        detail::gemm(false, true, t, t, dh, 1.0, go, d, pv.data() + head_off,
                     d, 0.0, dW.data(), t);
        if (need_v)  // dV += W~^T * dOut
          detail::gemm(true, false, t, dh, t, 1.0, wtilde.data(), t, go, d,
                       1.0, pv.grad() + head_off, d);
        if (!need_q && !need_k) continue;
        // softmax Jacobian (uses pre-dropout weights; one-hot rows vanish)
        for (int i = 0; i < t; ++i) {
          const double* wr = w + static_cast<std::size_t>(i) * t;
          double* dwr = dW.data() + static_cast<std::size_t>(i) * t;
          if (m) {
            const double* mr = m + static_cast<std::size_t>(i) * t;
            for (int j = 0; j < t; ++j) dwr[j] *= mr[j];
          }
          double dot = 0.0;
          for (int j = 0; j < t; ++j) dot += dwr[j] * wr[j];
          double* dlr = dL.data() + static_cast<std::size_t>(i) * t;
          for (int j = 0; j < t; ++j) dlr[j] = (dwr[j] - dot) * wr[j];
        }
        if (need_q)  // dQ += alpha * dL * K
          detail::gemm(false, false, t, dh, t, alpha, dL.data(), t,
                       pk.data() + head_off, d, 1.0, pq.grad() + head_off, d);
        if (need_k)  // dK += alpha * dL^T * Q
          detail::gemm(true, false, t, dh, t, alpha, dL.data(), t,
                       pq.data() + head_off, d, 1.0, pk.grad() + head_off, d);
      }
    }
  };
  return detail::make_op_result(q.shape(), std::move(out), {q, k, v},
                                std::move(backward), "attention_mix");
}

}  // namespace pcdt
