#pragma once

// Primitive ops over TensorT. Forward math runs in double where precision
// matters (reductions, cdf boxes) and stores back in the tensor scalar type.
// Each op validates shapes up front and registers a closure that accumulates
// vector-Jacobian products into whichever parents participate in gradients.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "entro/tensor.hpp"

namespace entro {

namespace detail {

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapM = Eigen::Map<MatRM<S>>;
template <typename S>
using CMapM = Eigen::Map<const MatRM<S>>;

template <typename S>
void maybe_accum(TensorT<S>& p, const std::vector<S>& g) {
  if (wants_grad(p)) p.accumulate_grad(g.data(), static_cast<int64_t>(g.size()));
}

template <typename S>
void check_rank(const TensorT<S>& t, int rank, const char* op, const char* arg) {
  if (t.rank() != rank)
    throw ShapeError(std::string(op) + ": " + arg + " must have rank " + std::to_string(rank) +
                     ", got " + shape_str(t.shape()));
}

template <typename S>
void check_same_shape(const TensorT<S>& a, const TensorT<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

// Generic elementwise unary: value = f(x), vjp = g * df(x, value).
template <typename S, class F, class DF>
TensorT<S> unary_op(const TensorT<S>& x, F f, DF df) {
  const auto& xv = x.values();
  std::vector<S> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = static_cast<S>(f(static_cast<double>(xv[i])));
  TensorT<S> xc = x;
  return make_node<S>(x.shape(), std::move(out), {x}, [xc, df](Node<S>& self) mutable {
    const auto& xv = xc.values();
    std::vector<S> gx(xv.size());
    for (size_t i = 0; i < xv.size(); ++i)
      gx[i] = static_cast<S>(static_cast<double>(self.grad[i]) *
                             df(static_cast<double>(xv[i]), static_cast<double>(self.value[i])));
    maybe_accum(xc, gx);
  });
}

inline double sigmoid_d(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename S>
TensorT<S> relu(const TensorT<S>& x) {
  return detail::unary_op(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

template <typename S>
TensorT<S> abs(const TensorT<S>& x) {
  // Subgradient 0 at the kink.
  return detail::unary_op(
      x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

template <typename S>
TensorT<S> log(const TensorT<S>& x) {
  for (S v : x.values())
    if (!(static_cast<double>(v) > 0.0))
      throw ValueError("log: domain error, input must be strictly positive");
  return detail::unary_op(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

template <typename S>
TensorT<S> exp(const TensorT<S>& x) {
  return detail::unary_op(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

template <typename S>
TensorT<S> sigmoid(const TensorT<S>& x) {
  return detail::unary_op(
      x, [](double v) { return detail::sigmoid_d(v); },
      [](double, double y) { return y * (1.0 - y); });
}

template <typename S>
TensorT<S> softplus(const TensorT<S>& x) {
  return detail::unary_op(
      x, [](double v) { return softplus_d(v); },
      [](double v, double) { return detail::sigmoid_d(v); });
}

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape(a, b, "add");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<S> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  TensorT<S> ac = a, bc = b;
  return detail::make_node<S>(a.shape(), std::move(out), {a, b},
                              [ac, bc](detail::Node<S>& self) mutable {
                                detail::maybe_accum(ac, self.grad);
                                detail::maybe_accum(bc, self.grad);
                              });
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape(a, b, "mul");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<S> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  TensorT<S> ac = a, bc = b;
  return detail::make_node<S>(a.shape(), std::move(out), {a, b},
                              [ac, bc](detail::Node<S>& self) mutable {
                                std::vector<S> g(self.grad.size());
                                for (size_t i = 0; i < g.size(); ++i)
                                  g[i] = self.grad[i] * bc.values()[i];
                                detail::maybe_accum(ac, g);
                                for (size_t i = 0; i < g.size(); ++i)
                                  g[i] = self.grad[i] * ac.values()[i];
                                detail::maybe_accum(bc, g);
                              });
}

template <typename S>
TensorT<S> scale(const TensorT<S>& x, double c) {
  return detail::unary_op(
      x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

// a + c*b
template <typename S>
TensorT<S> scale_add(const TensorT<S>& a, const TensorT<S>& b, double c) {
  detail::check_same_shape(a, b, "scale_add");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<S> out(av.size());
  for (size_t i = 0; i < av.size(); ++i)
    out[i] = static_cast<S>(static_cast<double>(av[i]) + c * static_cast<double>(bv[i]));
  TensorT<S> ac = a, bc = b;
  return detail::make_node<S>(a.shape(), std::move(out), {a, b},
                              [ac, bc, c](detail::Node<S>& self) mutable {
                                detail::maybe_accum(ac, self.grad);
                                std::vector<S> g(self.grad.size());
                                for (size_t i = 0; i < g.size(); ++i)
                                  g[i] = static_cast<S>(c * static_cast<double>(self.grad[i]));
                                detail::maybe_accum(bc, g);
                              });
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  return scale_add(a, b, -1.0);
}

// ---------------------------------------------------------------------------
// Quantization surrogates and graph control

template <typename S>
TensorT<S> add_uniform_noise(const TensorT<S>& x, uint64_t seed) {
  Rng rng(seed);
  const auto& xv = x.values();
  std::vector<S> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i)
    out[i] = static_cast<S>(static_cast<double>(xv[i]) + rng.uniform(-0.5, 0.5));
  TensorT<S> xc = x;
  return detail::make_node<S>(x.shape(), std::move(out), {x},
                              [xc](detail::Node<S>& self) mutable {
                                detail::maybe_accum(xc, self.grad);
                              });
}

// round() forward, identity backward (straight-through). Ties half away
// from zero.
template <typename S>
TensorT<S> round_ste(const TensorT<S>& x) {
  const auto& xv = x.values();
  std::vector<S> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i)
    out[i] = static_cast<S>(std::round(static_cast<double>(xv[i])));
  TensorT<S> xc = x;
  return detail::make_node<S>(x.shape(), std::move(out), {x},
                              [xc](detail::Node<S>& self) mutable {
                                detail::maybe_accum(xc, self.grad);
                              });
}

template <typename S>
TensorT<S> clamp_min(const TensorT<S>& x, double lo) {
  return detail::unary_op(
      x, [lo](double v) { return v > lo ? v : lo; },
      [lo](double v, double) { return v > lo ? 1.0 : 0.0; });
}

template <typename S>
TensorT<S> detach(const TensorT<S>& x) {
  return x.detached(false);
}

// ---------------------------------------------------------------------------
// Reductions

template <typename S>
TensorT<S> sum(const TensorT<S>& x) {
  double acc = 0.0;
  for (S v : x.values()) acc += static_cast<double>(v);
  TensorT<S> xc = x;
  return detail::make_node<S>(Shape{1}, {static_cast<S>(acc)}, {x},
                              [xc](detail::Node<S>& self) mutable {
                                std::vector<S> g(xc.size(), self.grad[0]);
                                detail::maybe_accum(xc, g);
                              });
}

template <typename S>
TensorT<S> mean(const TensorT<S>& x) {
  if (x.size() == 0) throw ShapeError("mean: empty tensor");
  double acc = 0.0;
  for (S v : x.values()) acc += static_cast<double>(v);
  const double inv = 1.0 / static_cast<double>(x.size());
  TensorT<S> xc = x;
  return detail::make_node<S>(Shape{1}, {static_cast<S>(acc * inv)}, {x},
                              [xc, inv](detail::Node<S>& self) mutable {
                                std::vector<S> g(
                                    xc.size(), static_cast<S>(static_cast<double>(self.grad[0]) * inv));
                                detail::maybe_accum(xc, g);
                              });
}

// Sum over every axis but the first: [N, ...] -> [N].
template <typename S>
TensorT<S> sum_per_sample(const TensorT<S>& x) {
  if (x.rank() < 1) throw ShapeError("sum_per_sample: need rank >= 1");
  const int n = x.dim(0);
  if (n == 0) throw ShapeError("sum_per_sample: empty batch");
  const int64_t per = x.size() / n;
  const auto& xv = x.values();
  std::vector<S> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int64_t j = 0; j < per; ++j) acc += static_cast<double>(xv[i * per + j]);
    out[static_cast<size_t>(i)] = static_cast<S>(acc);
  }
  TensorT<S> xc = x;
  return detail::make_node<S>(Shape{n}, std::move(out), {x},
                              [xc, n, per](detail::Node<S>& self) mutable {
                                std::vector<S> g(xc.size());
                                for (int i = 0; i < n; ++i)
                                  for (int64_t j = 0; j < per; ++j) g[i * per + j] = self.grad[i];
                                detail::maybe_accum(xc, g);
                              });
}

template <typename S>
TensorT<S> global_avg_pool(const TensorT<S>& x) {
  detail::check_rank(x, 4, "global_avg_pool", "input");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (hw == 0) throw ShapeError("global_avg_pool: empty spatial extent");
  const auto& xv = x.values();
  std::vector<S> out(static_cast<size_t>(n) * c);
  const double inv = 1.0 / hw;
  for (int i = 0; i < n * c; ++i) {
    double acc = 0.0;
    for (int j = 0; j < hw; ++j) acc += static_cast<double>(xv[static_cast<size_t>(i) * hw + j]);
    out[static_cast<size_t>(i)] = static_cast<S>(acc * inv);
  }
  TensorT<S> xc = x;
  return detail::make_node<S>(Shape{n, c}, std::move(out), {x},
                              [xc, n, c, hw, inv](detail::Node<S>& self) mutable {
                                std::vector<S> g(xc.size());
                                for (int i = 0; i < n * c; ++i) {
                                  const S v = static_cast<S>(static_cast<double>(self.grad[i]) * inv);
                                  for (int j = 0; j < hw; ++j) g[static_cast<size_t>(i) * hw + j] = v;
                                }
                                detail::maybe_accum(xc, g);
                              });
}

// ---------------------------------------------------------------------------
// Linear layers

template <typename S>
TensorT<S> dense(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b) {
  detail::check_rank(x, 2, "dense", "input");
  detail::check_rank(w, 2, "dense", "weight");
  detail::check_rank(b, 1, "dense", "bias");
  const int n = x.dim(0), d = x.dim(1), m = w.dim(0);
  if (w.dim(1) != d || b.dim(0) != m)
    throw ShapeError("dense: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(w.shape()) + " and bias " + shape_str(b.shape()));
  std::vector<S> out(static_cast<size_t>(n) * m);
  {
    detail::CMapM<S> xm(x.values().data(), n, d);
    detail::CMapM<S> wm(w.values().data(), m, d);
    detail::MapM<S> om(out.data(), n, m);
    om.noalias() = xm * wm.transpose();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) out[static_cast<size_t>(i) * m + j] += b.values()[j];
  }
  TensorT<S> xc = x, wc = w, bc = b;
  return detail::make_node<S>(
      Shape{n, m}, std::move(out), {x, w, b}, [xc, wc, bc, n, d, m](detail::Node<S>& self) mutable {
        detail::CMapM<S> gm(self.grad.data(), n, m);
        if (detail::wants_grad(xc)) {
          std::vector<S> gx(static_cast<size_t>(n) * d);
          detail::MapM<S>(gx.data(), n, d).noalias() =
              gm * detail::CMapM<S>(wc.values().data(), m, d);
          detail::maybe_accum(xc, gx);
        }
        if (detail::wants_grad(wc)) {
          std::vector<S> gw(static_cast<size_t>(m) * d);
          detail::MapM<S>(gw.data(), m, d).noalias() =
              gm.transpose() * detail::CMapM<S>(xc.values().data(), n, d);
          detail::maybe_accum(wc, gw);
        }
        if (detail::wants_grad(bc)) {
          std::vector<S> gb(static_cast<size_t>(m));
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) gb[static_cast<size_t>(j)] += self.grad[i * m + j];
          detail::maybe_accum(bc, gb);
        }
      });
}

namespace detail {

struct ConvDims {
  int n, c, h, w, k, kh, kw, ho, wo, stride, pad;
  int64_t kdim() const { return static_cast<int64_t>(c) * kh * kw; }
  int64_t ncols() const { return static_cast<int64_t>(n) * ho * wo; }
};

inline int conv_extent(int in, int k, int stride, int pad, const char* axis) {
  const int span = in + 2 * pad - k;
  if (span < 0 || span % stride != 0)
    throw ShapeError(std::string("conv2d: ") + axis + " extent " + std::to_string(in) +
                     " with kernel " + std::to_string(k) + " stride " + std::to_string(stride) +
                     " pad " + std::to_string(pad) + " does not produce an integral output size");
  return span / stride + 1;
}

template <typename S>
void im2col(const S* x, const ConvDims& d, S* cols) {
  const int64_t ncols = d.ncols();
  for (int c = 0; c < d.c; ++c)
    for (int ki = 0; ki < d.kh; ++ki)
      for (int kj = 0; kj < d.kw; ++kj) {
        S* row = cols + ((static_cast<int64_t>(c) * d.kh + ki) * d.kw + kj) * ncols;
        for (int n = 0; n < d.n; ++n) {
          const S* plane = x + (static_cast<int64_t>(n) * d.c + c) * d.h * d.w;
          for (int oy = 0; oy < d.ho; ++oy) {
            const int iy = oy * d.stride + ki - d.pad;
            S* out = row + (static_cast<int64_t>(n) * d.ho + oy) * d.wo;
            if (iy < 0 || iy >= d.h) {
              std::fill(out, out + d.wo, S(0));
              continue;
            }
            for (int ox = 0; ox < d.wo; ++ox) {
              const int ix = ox * d.stride + kj - d.pad;
              out[ox] = (ix >= 0 && ix < d.w) ? plane[static_cast<int64_t>(iy) * d.w + ix] : S(0);
            }
          }
        }
      }
}

template <typename S>
void col2im_add(const S* cols, const ConvDims& d, S* gx) {
  const int64_t ncols = d.ncols();
  for (int c = 0; c < d.c; ++c)
    for (int ki = 0; ki < d.kh; ++ki)
      for (int kj = 0; kj < d.kw; ++kj) {
        const S* row = cols + ((static_cast<int64_t>(c) * d.kh + ki) * d.kw + kj) * ncols;
        for (int n = 0; n < d.n; ++n) {
          S* plane = gx + (static_cast<int64_t>(n) * d.c + c) * d.h * d.w;
          for (int oy = 0; oy < d.ho; ++oy) {
            const int iy = oy * d.stride + ki - d.pad;
            if (iy < 0 || iy >= d.h) continue;
            const S* in = row + (static_cast<int64_t>(n) * d.ho + oy) * d.wo;
            for (int ox = 0; ox < d.wo; ++ox) {
              const int ix = ox * d.stride + kj - d.pad;
              if (ix >= 0 && ix < d.w) plane[static_cast<int64_t>(iy) * d.w + ix] += in[ox];
            }
          }
        }
      }
}

}  // namespace detail

template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b, int stride,
                  int pad) {
  detail::check_rank(x, 4, "conv2d", "input");
  detail::check_rank(w, 4, "conv2d", "kernel");
  detail::check_rank(b, 1, "conv2d", "bias");
  if (stride < 1) throw ValueError("conv2d: stride must be >= 1");
  if (pad < 0) throw ValueError("conv2d: pad must be >= 0");
  if (w.dim(1) != x.dim(1) || b.dim(0) != w.dim(0))
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " incompatible with kernel " +
                     shape_str(w.shape()) + " and bias " + shape_str(b.shape()));
  detail::ConvDims d;
  d.n = x.dim(0);
  d.c = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.k = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.stride = stride;
  d.pad = pad;
  d.ho = detail::conv_extent(d.h, d.kh, stride, pad, "height");
  d.wo = detail::conv_extent(d.w, d.kw, stride, pad, "width");
  if (d.n < 1 || d.c < 1) throw ShapeError("conv2d: empty input " + shape_str(x.shape()));

  const int64_t kdim = d.kdim(), ncols = d.ncols();
  auto cols = std::make_shared<std::vector<S>>(static_cast<size_t>(kdim * ncols));
  detail::im2col(x.values().data(), d, cols->data());

  std::vector<S> mat(static_cast<size_t>(d.k) * ncols);
  {
    detail::CMapM<S> wm(w.values().data(), d.k, kdim);
    detail::CMapM<S> cm(cols->data(), kdim, ncols);
    detail::MapM<S>(mat.data(), d.k, ncols).noalias() = wm * cm;
  }
  // mat[k][(n*ho+oy)*wo+ox] -> out[n][k][oy][ox], plus bias
  const int64_t plane = static_cast<int64_t>(d.ho) * d.wo;
  std::vector<S> out(static_cast<size_t>(d.n) * d.k * plane);
  for (int k = 0; k < d.k; ++k) {
    const S bias = b.values()[static_cast<size_t>(k)];
    for (int n = 0; n < d.n; ++n) {
      const S* src = mat.data() + k * ncols + n * plane;
      S* dst = out.data() + (static_cast<int64_t>(n) * d.k + k) * plane;
      for (int64_t i = 0; i < plane; ++i) dst[i] = src[i] + bias;
    }
  }

  TensorT<S> xc = x, wc = w, bc = b;
  return detail::make_node<S>(
      Shape{d.n, d.k, d.ho, d.wo}, std::move(out), {x, w, b},
      [xc, wc, bc, cols, d, kdim, ncols, plane](detail::Node<S>& self) mutable {
        std::vector<S> gmat(static_cast<size_t>(d.k) * ncols);
        for (int k = 0; k < d.k; ++k)
          for (int n = 0; n < d.n; ++n) {
            const S* src = self.grad.data() + (static_cast<int64_t>(n) * d.k + k) * plane;
            S* dst = gmat.data() + k * ncols + n * plane;
            std::copy(src, src + plane, dst);
          }
        detail::CMapM<S> gm(gmat.data(), d.k, ncols);
        if (detail::wants_grad(wc)) {
          std::vector<S> gw(static_cast<size_t>(d.k) * kdim);
          detail::MapM<S>(gw.data(), d.k, kdim).noalias() =
              gm * detail::CMapM<S>(cols->data(), kdim, ncols).transpose();
          detail::maybe_accum(wc, gw);
        }
        if (detail::wants_grad(bc)) {
          std::vector<S> gb(static_cast<size_t>(d.k));
          for (int k = 0; k < d.k; ++k) {
            double acc = 0.0;
            for (int64_t i = 0; i < ncols; ++i) acc += static_cast<double>(gmat[k * ncols + i]);
            gb[static_cast<size_t>(k)] = static_cast<S>(acc);
          }
          detail::maybe_accum(bc, gb);
        }
        if (detail::wants_grad(xc)) {
          std::vector<S> gcols(static_cast<size_t>(kdim) * ncols);
          detail::MapM<S>(gcols.data(), kdim, ncols).noalias() =
              detail::CMapM<S>(wc.values().data(), d.k, kdim).transpose() * gm;
          std::vector<S> gx(xc.size(), S(0));
          detail::col2im_add(gcols.data(), d, gx.data());
          detail::maybe_accum(xc, gx);
        }
      });
}

// ---------------------------------------------------------------------------
// Structure ops

template <typename S>
TensorT<S> upsample_nearest2x(const TensorT<S>& x) {
  detail::check_rank(x, 4, "upsample_nearest2x", "input");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto& xv = x.values();
  std::vector<S> out(static_cast<size_t>(n) * c * 4 * h * w);
  for (int p = 0; p < n * c; ++p)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        const S v = xv[(static_cast<int64_t>(p) * h + y) * w + xx];
        const int64_t base = (static_cast<int64_t>(p) * 2 * h + 2 * y) * 2 * w + 2 * xx;
        out[base] = v;
        out[base + 1] = v;
        out[base + 2 * w] = v;
        out[base + 2 * w + 1] = v;
      }
  TensorT<S> xc = x;
  return detail::make_node<S>(Shape{n, c, 2 * h, 2 * w}, std::move(out), {x},
                              [xc, n, c, h, w](detail::Node<S>& self) mutable {
                                std::vector<S> g(xc.size());
                                for (int p = 0; p < n * c; ++p)
                                  for (int y = 0; y < h; ++y)
                                    for (int xx = 0; xx < w; ++xx) {
                                      const int64_t base =
                                          (static_cast<int64_t>(p) * 2 * h + 2 * y) * 2 * w + 2 * xx;
                                      g[(static_cast<int64_t>(p) * h + y) * w + xx] =
                                          self.grad[base] + self.grad[base + 1] +
                                          self.grad[base + 2 * w] + self.grad[base + 2 * w + 1];
                                    }
                                detail::maybe_accum(xc, g);
                              });
}

template <typename S>
TensorT<S> slice_channels(const TensorT<S>& x, int c0, int c1) {
  detail::check_rank(x, 4, "slice_channels", "input");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (c0 < 0 || c1 > c || c0 >= c1)
    throw ShapeError("slice_channels: range [" + std::to_string(c0) + ", " + std::to_string(c1) +
                     ") invalid for " + shape_str(x.shape()));
  const int cs = c1 - c0;
  const int64_t hw = static_cast<int64_t>(h) * w;
  const auto& xv = x.values();
  std::vector<S> out(static_cast<size_t>(n) * cs * hw);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < cs; ++j)
      std::copy(xv.data() + ((static_cast<int64_t>(i) * c) + c0 + j) * hw,
                xv.data() + ((static_cast<int64_t>(i) * c) + c0 + j + 1) * hw,
                out.data() + (static_cast<int64_t>(i) * cs + j) * hw);
  TensorT<S> xc = x;
  return detail::make_node<S>(Shape{n, cs, h, w}, std::move(out), {x},
                              [xc, n, c, cs, c0, hw](detail::Node<S>& self) mutable {
                                std::vector<S> g(xc.size(), S(0));
                                for (int i = 0; i < n; ++i)
                                  for (int j = 0; j < cs; ++j)
                                    std::copy(self.grad.data() + (static_cast<int64_t>(i) * cs + j) * hw,
                                              self.grad.data() +
                                                  (static_cast<int64_t>(i) * cs + j + 1) * hw,
                                              g.data() + ((static_cast<int64_t>(i) * c) + c0 + j) * hw);
                                detail::maybe_accum(xc, g);
                              });
}

// ---------------------------------------------------------------------------
// Loss

template <typename S>
TensorT<S> softmax_cross_entropy(const TensorT<S>& logits, const std::vector<int>& labels) {
  detail::check_rank(logits, 2, "softmax_cross_entropy", "logits");
  const int n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int>(labels.size()) != n)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(n));
  for (int y : labels)
    if (y < 0 || y >= k)
      throw ValueError("softmax_cross_entropy: label " + std::to_string(y) + " outside [0, " +
                       std::to_string(k) + ")");
  auto probs = std::make_shared<std::vector<S>>(static_cast<size_t>(n) * k);
  const auto& lv = logits.values();
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    double m = -1e300;
    for (int j = 0; j < k; ++j) m = std::max(m, static_cast<double>(lv[i * k + j]));
    double z = 0.0;
    for (int j = 0; j < k; ++j) z += std::exp(static_cast<double>(lv[i * k + j]) - m);
    const double lse = m + std::log(z);
    for (int j = 0; j < k; ++j)
      (*probs)[static_cast<size_t>(i) * k + j] =
          static_cast<S>(std::exp(static_cast<double>(lv[i * k + j]) - lse));
    loss += lse - static_cast<double>(lv[i * k + labels[static_cast<size_t>(i)]]);
  }
  loss /= n;
  TensorT<S> lc = logits;
  return detail::make_node<S>(Shape{1}, {static_cast<S>(loss)}, {logits},
                              [lc, probs, labels, n, k](detail::Node<S>& self) mutable {
                                const double g = static_cast<double>(self.grad[0]) / n;
                                std::vector<S> gl(static_cast<size_t>(n) * k);
                                for (int i = 0; i < n; ++i)
                                  for (int j = 0; j < k; ++j) {
                                    double p = static_cast<double>((*probs)[static_cast<size_t>(i) * k + j]);
                                    if (j == labels[static_cast<size_t>(i)]) p -= 1.0;
                                    gl[static_cast<size_t>(i) * k + j] = static_cast<S>(p * g);
                                  }
                                detail::maybe_accum(lc, gl);
                              });
}

// ---------------------------------------------------------------------------
// Discretized-box likelihoods. p(v) = F(v + 1/2) - F(v - 1/2) evaluated in
// double with mirrored tails so nothing cancels catastrophically.

namespace detail {

// logistic F with location mu and scale s
inline double logistic_box_d(double zm, double s) {
  // p = sig((zm+.5)/s) - sig((zm-.5)/s); mirror to keep both args negative-side
  if (zm > 0.0) return sigmoid_d((0.5 - zm) / s) - sigmoid_d((-0.5 - zm) / s);
  return sigmoid_d((zm + 0.5) / s) - sigmoid_d((zm - 0.5) / s);
}

inline double std_normal_cdf(double v) { return 0.5 * std::erfc(-v * 0.7071067811865475244); }

inline double gaussian_box_d(double zm, double sigma) {
  const double hi = (zm + 0.5) / sigma, lo = (zm - 0.5) / sigma;
  if (zm > 0.0) return std_normal_cdf(-lo) - std_normal_cdf(-hi);
  return std_normal_cdf(hi) - std_normal_cdf(lo);
}

inline double std_normal_pdf(double v) { return 0.3989422804014326779 * std::exp(-0.5 * v * v); }

inline double sigmoid_deriv_d(double u) {
  const double s = sigmoid_d(u);
  return s * (1.0 - s);
}

}  // namespace detail

// z: [N, C, h, w]; mu, s: [C]. Per-element probability that a unit-width box
// around z falls under a per-channel logistic.
template <typename S>
TensorT<S> logistic_box(const TensorT<S>& z, const TensorT<S>& mu, const TensorT<S>& s) {
  detail::check_rank(z, 4, "logistic_box", "z");
  detail::check_rank(mu, 1, "logistic_box", "mu");
  detail::check_rank(s, 1, "logistic_box", "scale");
  const int n = z.dim(0), c = z.dim(1);
  const int64_t hw = static_cast<int64_t>(z.dim(2)) * z.dim(3);
  if (mu.dim(0) != c || s.dim(0) != c)
    throw ShapeError("logistic_box: channel params " + shape_str(mu.shape()) + "/" +
                     shape_str(s.shape()) + " do not match z " + shape_str(z.shape()));
  for (S v : s.values())
    if (!(static_cast<double>(v) > 0.0)) throw ValueError("logistic_box: non-positive scale");

  const auto& zv = z.values();
  std::vector<S> out(zv.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      const double m = static_cast<double>(mu.values()[static_cast<size_t>(j)]);
      const double sc = static_cast<double>(s.values()[static_cast<size_t>(j)]);
      const int64_t base = (static_cast<int64_t>(i) * c + j) * hw;
      for (int64_t e = 0; e < hw; ++e)
        out[static_cast<size_t>(base + e)] =
            static_cast<S>(detail::logistic_box_d(static_cast<double>(zv[base + e]) - m, sc));
    }

  TensorT<S> zc = z, mc = mu, sc_ = s;
  return detail::make_node<S>(
      z.shape(), std::move(out), {z, mu, s}, [zc, mc, sc_, n, c, hw](detail::Node<S>& self) mutable {
        const bool wz = detail::wants_grad(zc), wm = detail::wants_grad(mc),
                   ws = detail::wants_grad(sc_);
        if (!wz && !wm && !ws) return;
        std::vector<S> gz(wz ? zc.size() : 0);
        std::vector<S> gm(wm ? static_cast<size_t>(c) : 0, S(0));
        std::vector<S> gs(ws ? static_cast<size_t>(c) : 0, S(0));
        const auto& zv = zc.values();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < c; ++j) {
            const double m = static_cast<double>(mc.values()[static_cast<size_t>(j)]);
            const double s = static_cast<double>(sc_.values()[static_cast<size_t>(j)]);
            const int64_t base = (static_cast<int64_t>(i) * c + j) * hw;
            double acc_m = 0.0, acc_s = 0.0;
            for (int64_t e = 0; e < hw; ++e) {
              const double zm = static_cast<double>(zv[base + e]) - m;
              const double up = (zm + 0.5) / s, dn = (zm - 0.5) / s;
              const double du = detail::sigmoid_deriv_d(up), dd = detail::sigmoid_deriv_d(dn);
              const double g = static_cast<double>(self.grad[static_cast<size_t>(base + e)]);
              const double dpdz = (du - dd) / s;
              if (wz) gz[static_cast<size_t>(base + e)] = static_cast<S>(g * dpdz);
              acc_m -= g * dpdz;
              acc_s -= g * (du * up - dd * dn) / s;
            }
            if (wm) gm[static_cast<size_t>(j)] += static_cast<S>(acc_m);
            if (ws) gs[static_cast<size_t>(j)] += static_cast<S>(acc_s);
          }
        if (wz) detail::maybe_accum(zc, gz);
        if (wm) detail::maybe_accum(mc, gm);
        if (ws) detail::maybe_accum(sc_, gs);
      });
}

// z, mu, sigma all the same shape. Per-element probability that a unit-width
// box around z falls under N(mu, sigma).
template <typename S>
TensorT<S> gaussian_box(const TensorT<S>& z, const TensorT<S>& mu, const TensorT<S>& sigma) {
  detail::check_same_shape(z, mu, "gaussian_box");
  detail::check_same_shape(z, sigma, "gaussian_box");
  for (S v : sigma.values())
    if (!(static_cast<double>(v) > 0.0)) throw ValueError("gaussian_box: non-positive scale");
  const auto& zv = z.values();
  const auto& mv = mu.values();
  const auto& sv = sigma.values();
  std::vector<S> out(zv.size());
  for (size_t i = 0; i < zv.size(); ++i)
    out[i] = static_cast<S>(detail::gaussian_box_d(
        static_cast<double>(zv[i]) - static_cast<double>(mv[i]), static_cast<double>(sv[i])));

  TensorT<S> zc = z, mc = mu, sc = sigma;
  return detail::make_node<S>(
      z.shape(), std::move(out), {z, mu, sigma}, [zc, mc, sc](detail::Node<S>& self) mutable {
        const bool wz = detail::wants_grad(zc), wm = detail::wants_grad(mc),
                   ws = detail::wants_grad(sc);
        if (!wz && !wm && !ws) return;
        const auto& zv = zc.values();
        const auto& mv = mc.values();
        const auto& sv = sc.values();
        std::vector<S> gz(wz ? zv.size() : 0);
        std::vector<S> gm(wm ? zv.size() : 0);
        std::vector<S> gs(ws ? zv.size() : 0);
        for (size_t i = 0; i < zv.size(); ++i) {
          const double s = static_cast<double>(sv[i]);
          const double zm = static_cast<double>(zv[i]) - static_cast<double>(mv[i]);
          const double up = (zm + 0.5) / s, dn = (zm - 0.5) / s;
          const double pu = detail::std_normal_pdf(up), pd = detail::std_normal_pdf(dn);
          const double g = static_cast<double>(self.grad[i]);
          const double dpdz = (pu - pd) / s;
          if (wz) gz[i] = static_cast<S>(g * dpdz);
          if (wm) gm[i] = static_cast<S>(-g * dpdz);
          if (ws) gs[i] = static_cast<S>(-g * (pu * up - pd * dn) / s);
        }
        if (wz) detail::maybe_accum(zc, gz);
        if (wm) detail::maybe_accum(mc, gm);
        if (ws) detail::maybe_accum(sc, gs);
      });
}

}  // namespace entro
