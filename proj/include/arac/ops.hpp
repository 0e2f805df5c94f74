#pragma once

// Linear-algebra, normalization and pooling operations on top of the tape.
//
// matmul and linear share one accumulation kernel so that
// linear(x, W, b) is bit-identical to add(matmul(x, W), expanded b).

#include <cmath>
#include <cstddef>
#include <vector>

#include "arac/tensor.hpp"

namespace arac {

namespace detail {

// c[m,n] += a[m,k] * b[k,n]
template <typename T>
void mm_nn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
               std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const T av = arow[l];
      const T* brow = b + l * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,k] += a[m,n] * b[k,n]^T
template <typename T>
void mm_nt_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t n,
               std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * n;
    T* crow = c + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const T* brow = b + l * n;
      T acc = T(0);
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[l] += acc;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
template <typename T>
void mm_tn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
               std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const T av = arow[l];
      T* crow = c + l * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

struct MatDims {
  std::size_t batch_a, batch_b, batch_out, m, k, n;
};

// Leading extents must match exactly, or one operand is rank-2 and is
// broadcast across the other's batch.
template <typename T>
MatDims matmul_dims(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2)
    throw ShapeError("matmul: rank must be >= 2, got " + shape_str(sa) +
                     " and " + shape_str(sb));
  MatDims d{};
  d.m = sa[sa.size() - 2];
  d.k = sa[sa.size() - 1];
  const std::size_t kb = sb[sb.size() - 2];
  d.n = sb[sb.size() - 1];
  if (d.k != kb)
    throw ShapeError("matmul: inner extents differ, " + shape_str(sa) +
                     " vs " + shape_str(sb));
  d.batch_a = outer_extent(sa, sa.size() - 2);
  d.batch_b = outer_extent(sb, sb.size() - 2);
  const bool a_bcast = sa.size() == 2;
  const bool b_bcast = sb.size() == 2;
  if (!a_bcast && !b_bcast) {
    Shape la(sa.begin(), sa.end() - 2), lb(sb.begin(), sb.end() - 2);
    if (la != lb)
      throw ShapeError("matmul: leading extents differ, " + shape_str(sa) +
                       " vs " + shape_str(sb));
  }
  d.batch_out = std::max(d.batch_a, d.batch_b);
  return d;
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto d = detail::matmul_dims(a, b);
  const Shape& lead = a.rank() >= b.rank() ? a.shape() : b.shape();
  Shape os(lead.begin(), lead.end() - 2);
  os.push_back(d.m);
  os.push_back(d.n);
  std::vector<T> out(d.batch_out * d.m * d.n, T(0));
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t bt = 0; bt < d.batch_out; ++bt) {
    const T* pa = av.data() + (d.batch_a == 1 ? 0 : bt) * d.m * d.k;
    const T* pb = bv.data() + (d.batch_b == 1 ? 0 : bt) * d.k * d.n;
    detail::mm_nn_acc(pa, pb, out.data() + bt * d.m * d.n, d.m, d.k, d.n);
  }
  auto* an = a.node();
  auto* bn = b.node();
  return detail::make_op<T>(
      std::move(os), std::move(out), {a, b},
      [an, bn, d](const std::vector<T>& g, BackwardSweep<T>& sw) {
        // a_grad += g * b^T, b_grad += a^T * g (summed over broadcast batch)
        if (auto* ga = sw.find(an)) {
          for (std::size_t bt = 0; bt < d.batch_out; ++bt) {
            const T* pg = g.data() + bt * d.m * d.n;
            const T* pb =
                bn->value.data() + (d.batch_b == 1 ? 0 : bt) * d.k * d.n;
            T* pga = ga->data() + (d.batch_a == 1 ? 0 : bt) * d.m * d.k;
            detail::mm_nt_acc(pg, pb, pga, d.m, d.n, d.k);
          }
        }
        if (auto* gb = sw.find(bn)) {
          for (std::size_t bt = 0; bt < d.batch_out; ++bt) {
            const T* pg = g.data() + bt * d.m * d.n;
            const T* pa =
                an->value.data() + (d.batch_a == 1 ? 0 : bt) * d.m * d.k;
            T* pgb = gb->data() + (d.batch_b == 1 ? 0 : bt) * d.k * d.n;
            detail::mm_tn_acc(pa, pg, pgb, d.m, d.k, d.n);
          }
        }
      });
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  if (a.rank() < 2)
    throw ShapeError("transpose_last2: rank must be >= 2, got " +
                     shape_str(a.shape()));
  const std::size_t m = a.dim(a.rank() - 2);
  const std::size_t n = a.dim(a.rank() - 1);
  const std::size_t batch = outer_extent(a.shape(), a.rank() - 2);
  Shape os = a.shape();
  std::swap(os[os.size() - 2], os[os.size() - 1]);
  std::vector<T> out(a.size());
  const auto& av = a.values();
  for (std::size_t bt = 0; bt < batch; ++bt) {
    const T* src = av.data() + bt * m * n;
    T* dst = out.data() + bt * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  }
  auto* an = a.node();
  return detail::make_op<T>(
      std::move(os), std::move(out), {a},
      [an, batch, m, n](const std::vector<T>& g, BackwardSweep<T>& sw) {
        if (auto* ga = sw.find(an)) {
          for (std::size_t bt = 0; bt < batch; ++bt) {
            const T* src = g.data() + bt * m * n;
            T* dst = ga->data() + bt * m * n;
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < n; ++j)
                dst[i * n + j] += src[j * m + i];
          }
        }
      });
}

// x [.., d_in] * W [d_in, d_out] + b [d_out]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() < 1 || w.rank() != 2 || b.rank() != 1)
    throw ShapeError("linear: expected x[..,d_in], W[d_in,d_out], b[d_out], "
                     "got " + shape_str(x.shape()) + ", " +
                     shape_str(w.shape()) + ", " + shape_str(b.shape()));
  const std::size_t din = x.dim(x.rank() - 1);
  const std::size_t dout = w.dim(1);
  if (w.dim(0) != din || b.dim(0) != dout)
    throw ShapeError("linear: shape mismatch x" + shape_str(x.shape()) +
                     " W" + shape_str(w.shape()) + " b" +
                     shape_str(b.shape()));
  const std::size_t rows = x.size() / din;
  Shape os = x.shape();
  os[os.size() - 1] = dout;
  std::vector<T> out(rows * dout, T(0));
  detail::mm_nn_acc(x.values().data(), w.values().data(), out.data(), rows,
                    din, dout);
  const auto& bvals = b.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < dout; ++j) out[r * dout + j] += bvals[j];
  auto* xn = x.node();
  auto* wn = w.node();
  auto* bn = b.node();
  return detail::make_op<T>(
      std::move(os), std::move(out), {x, w, b},
      [xn, wn, bn, rows, din, dout](const std::vector<T>& g,
                                    BackwardSweep<T>& sw) {
        if (auto* gx = sw.find(xn))
          detail::mm_nt_acc(g.data(), wn->value.data(), gx->data(), rows, dout,
                            din);
        if (auto* gw = sw.find(wn))
          detail::mm_tn_acc(xn->value.data(), g.data(), gw->data(), rows, din,
                            dout);
        if (auto* gb = sw.find(bn)) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < dout; ++j)
              (*gb)[j] += g[r * dout + j];
        }
      });
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& a) {
  if (a.rank() < 1 || a.dim(a.rank() - 1) < 1)
    throw ShapeError("softmax_lastdim: last extent must be >= 1, got " +
                     shape_str(a.shape()));
  const std::size_t d = a.dim(a.rank() - 1);
  const std::size_t rows = a.size() / d;
  std::vector<T> out(a.size());
  const auto& av = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * d;
    T* y = out.data() + r * d;
    T mx = x[0];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, x[j]);
    if (!std::isfinite(mx))
      throw ValueError("softmax_lastdim: non-finite input in row " +
                       std::to_string(r));
    T sum = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < d; ++j) y[j] *= inv;
  }
  auto* an = a.node();
  auto res = detail::make_op<T>(a.shape(), std::move(out), {a}, nullptr);
  if (res.tracked()) {
    auto* rn = res.node();
    rn->backward_fn = [an, rn, rows, d](const std::vector<T>& g,
                                        BackwardSweep<T>& sw) {
      // per row: gx = s * (g - <g, s>)
      if (auto* ga = sw.find(an)) {
        const auto& s = rn->value;
        for (std::size_t r = 0; r < rows; ++r) {
          const T* srow = s.data() + r * d;
          const T* grow = g.data() + r * d;
          T dot = T(0);
          for (std::size_t j = 0; j < d; ++j) dot += grow[j] * srow[j];
          T* out = ga->data() + r * d;
          for (std::size_t j = 0; j < d; ++j)
            out[j] += srow[j] * (grow[j] - dot);
        }
      }
    };
  }
  return res;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  if (x.rank() < 1)
    throw ShapeError("layer_norm: scalar input " + shape_str(x.shape()));
  const std::size_t d = x.dim(x.rank() - 1);
  if (d < 2)
    throw ShapeError("layer_norm: last extent must be >= 2, got " +
                     shape_str(x.shape()));
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d})
    throw ShapeError("layer_norm: gamma/beta must be [" + std::to_string(d) +
                     "], got " + shape_str(gamma.shape()) + " and " +
                     shape_str(beta.shape()));
  const std::size_t rows = x.size() / d;
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(rows);
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T mean = T(0);
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      const T c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mean) * inv;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  auto* xn = x.node();
  auto* gn = gamma.node();
  auto* bn = beta.node();
  return detail::make_op<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, rows, d, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](const std::vector<T>& g,
                                     BackwardSweep<T>& sw) {
        auto* gx = sw.find(xn);
        auto* gg = sw.find(gn);
        auto* gb = sw.find(bn);
        const auto& gv = gn->value;
        for (std::size_t r = 0; r < rows; ++r) {
          const T* grow = g.data() + r * d;
          const T* hrow = xhat.data() + r * d;
          if (gx) {
            T mean_gh = T(0), mean_ghh = T(0);
            for (std::size_t j = 0; j < d; ++j) {
              const T gh = grow[j] * gv[j];
              mean_gh += gh;
              mean_ghh += gh * hrow[j];
            }
            mean_gh /= static_cast<T>(d);
            mean_ghh /= static_cast<T>(d);
            T* out = gx->data() + r * d;
            for (std::size_t j = 0; j < d; ++j)
              out[j] += inv_std[r] *
                        (grow[j] * gv[j] - mean_gh - hrow[j] * mean_ghh);
          }
          if (gg)
            for (std::size_t j = 0; j < d; ++j)
              (*gg)[j] += grow[j] * hrow[j];
          if (gb)
            for (std::size_t j = 0; j < d; ++j) (*gb)[j] += grow[j];
        }
      });
}

// non-padded window means along the last dim; d_out = (d - k)/s + 1
template <typename T>
Tensor<T> avg_pool_lastdim(const Tensor<T>& a, std::size_t kernel,
                           std::size_t stride) {
  if (a.rank() < 1 || kernel == 0 || stride == 0)
    throw ShapeError("avg_pool_lastdim: bad kernel/stride");
  const std::size_t d = a.dim(a.rank() - 1);
  if (kernel > d)
    throw ShapeError("avg_pool_lastdim: kernel " + std::to_string(kernel) +
                     " exceeds last extent of " + shape_str(a.shape()));
  const std::size_t dout = (d - kernel) / stride + 1;
  const std::size_t rows = a.size() / d;
  Shape os = a.shape();
  os[os.size() - 1] = dout;
  std::vector<T> out(rows * dout);
  const auto& av = a.values();
  const T inv = T(1) / static_cast<T>(kernel);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * d;
    T* y = out.data() + r * dout;
    for (std::size_t o = 0; o < dout; ++o) {
      T acc = T(0);
      for (std::size_t t = 0; t < kernel; ++t) acc += x[o * stride + t];
      y[o] = acc * inv;
    }
  }
  auto* an = a.node();
  return detail::make_op<T>(
      std::move(os), std::move(out), {a},
      [an, rows, d, dout, kernel, stride, inv](const std::vector<T>& g,
                                               BackwardSweep<T>& sw) {
        if (auto* ga = sw.find(an)) {
          for (std::size_t r = 0; r < rows; ++r) {
            const T* grow = g.data() + r * dout;
            T* out = ga->data() + r * d;
            for (std::size_t o = 0; o < dout; ++o)
              for (std::size_t t = 0; t < kernel; ++t)
                out[o * stride + t] += grow[o] * inv;
          }
        }
      });
}

// elementwise binary cross entropy on logits; targets carry no gradient
template <typename T>
Tensor<T> bce_logits_elem(const Tensor<T>& logits, const Tensor<T>& targets) {
  detail::require_same_shape(logits, targets, "bce_logits_elem");
  for (T t : targets.values())
    if (!(t >= T(0) && t <= T(1)))
      throw ValueError("bce_logits_elem: target outside [0,1]");
  std::vector<T> out(logits.size());
  const auto& xv = logits.values();
  const auto& tv = targets.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = xv[i];
    // max(x,0) - x*t + log(1 + exp(-|x|))
    out[i] = std::max(x, T(0)) - x * tv[i] + std::log1p(std::exp(-std::abs(x)));
  }
  auto* xn = logits.node();
  auto* tn = targets.node();
  return detail::make_op<T>(
      logits.shape(), std::move(out), {logits, targets},
      [xn, tn](const std::vector<T>& g, BackwardSweep<T>& sw) {
        if (auto* gx = sw.find(xn)) {
          const auto& xv = xn->value;
          const auto& tv = tn->value;
          for (std::size_t i = 0; i < g.size(); ++i) {
            const T x = xv[i];
            T s;
            if (x >= T(0))
              s = T(1) / (T(1) + std::exp(-x));
            else {
              const T e = std::exp(x);
              s = e / (T(1) + e);
            }
            (*gx)[i] += g[i] * (s - tv[i]);
          }
        }
      });
}

}  // namespace arac
