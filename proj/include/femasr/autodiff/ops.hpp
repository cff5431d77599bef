// Copyright (c) 2026 The femasr Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "femasr/autodiff/tensor.hpp"

namespace femasr::ad {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    require(a.shape() == b.shape(),
            std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class T>
void check_rank(const Tensor<T>& a, std::size_t rank, const char* op) {
    require(a.ndim() == rank, std::string(op) + ": expected rank " + std::to_string(rank) + " tensor, got " +
                                  shape_str(a.shape()));
}

/// Reflect-101 index (edge not repeated). A length-1 axis maps everything to 0.
inline std::size_t reflect(long c, long n) {
    if (n == 1) return 0;
    while (c < 0 || c >= n) {
        if (c < 0) c = -c;
        if (c >= n) c = 2 * (n - 1) - c;
    }
    return static_cast<std::size_t>(c);
}

template <class T, class F>
Tensor<T> unary(const Tensor<T>& a, const char* op, F&& f, BackwardFn<T> bw) {
    std::vector<T> out(a.numel());
    const auto in = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
    return make_result<T>(a.shape(), std::move(out), op, {a.node()}, std::move(bw));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return make_result<T>(a.shape(), std::move(out), "add", {a.node(), b.node()},
                          [](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
                              for (auto* buf : pg)
                                  if (buf)
                                      for (std::size_t i = 0; i < g.size(); ++i) (*buf)[i] += g[i];
                          });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return make_result<T>(a.shape(), std::move(out), "sub", {a.node(), b.node()},
                          [](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
                              if (pg[0])
                                  for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
                              if (pg[1])
                                  for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] -= g[i];
                          });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return make_result<T>(a.shape(), std::move(out), "mul", {a.node(), b.node()},
                          [](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
                              const auto& x = self.parents[0]->data;
                              const auto& y = self.parents[1]->data;
                              if (pg[0])
                                  for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * y[i];
                              if (pg[1])
                                  for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] += g[i] * x[i];
                          });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    return detail::unary<T>(
        a, "scale", [c](T x) { return x * c; },
        [c](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
            for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * c;
        });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    return detail::unary<T>(
        a, "add_scalar", [c](T x) { return x + c; },
        [](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
            for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
        });
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
    return detail::unary<T>(
        a, "square", [](T x) { return x * x; },
        [](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
            const auto& x = self.parents[0]->data;
            for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += T(2) * x[i] * g[i];
        });
}

/// |x| with subgradient 0 at the origin.
template <class T>
Tensor<T> abs(const Tensor<T>& a) {
    return detail::unary<T>(
        a, "abs", [](T x) { return std::abs(x); },
        [](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
            const auto& x = self.parents[0]->data;
            for (std::size_t i = 0; i < g.size(); ++i)
                (*pg[0])[i] += x[i] > T(0) ? g[i] : (x[i] < T(0) ? -g[i] : T(0));
        });
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope) {
    return detail::unary<T>(
        a, "leaky_relu", [slope](T x) { return x > T(0) ? x : slope * x; },
        [slope](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
            const auto& x = self.parents[0]->data;
            for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += x[i] > T(0) ? g[i] : slope * g[i];
        });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    return leaky_relu(a, T(0));
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
    T acc = 0;
    for (T v : a.data()) acc += v;
    return make_result<T>({1}, {acc}, "sum", {a.node()},
                          [](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
                              for (auto& v : *pg[0]) v += g[0];
                          });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
    detail::require(a.numel() > 0, "mean: empty tensor");
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// a / s for a one-element tensor s.
template <class T>
Tensor<T> div_scalar(const Tensor<T>& a, const Tensor<T>& s) {
    detail::require(s.numel() == 1, "div_scalar: divisor must be a scalar, got " + shape_str(s.shape()));
    const T d = s.item();
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / d;
    return make_result<T>(a.shape(), std::move(out), "div_scalar", {a.node(), s.node()},
                          [](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
                              const auto& x = self.parents[0]->data;
                              const T d = self.parents[1]->data[0];
                              if (pg[0])
                                  for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] / d;
                              if (pg[1]) {
                                  T acc = 0;
                                  for (std::size_t i = 0; i < g.size(); ++i) acc -= g[i] * x[i];
                                  (*pg[1])[0] += acc / (d * d);
                              }
                          });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    detail::require(numel(shape) == a.numel(),
                    "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    return make_result<T>(std::move(shape), a.values(), "reshape", {a.node()},
                          [](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
                              for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
                          });
}

/// sg[.]: same values, no gradient path.
template <class T>
Tensor<T> stop_gradient(const Tensor<T>& a) {
    return a.detach();
}

/// Forward value of `quantized`; backward copies the incoming gradient to
/// `zhat` unchanged. `quantized` is deliberately not a graph parent.
template <class T>
Tensor<T> straight_through(const Tensor<T>& quantized, const Tensor<T>& zhat) {
    detail::check_same_shape(quantized, zhat, "straight_through");
    return make_result<T>(quantized.shape(), quantized.values(), "straight_through", {zhat.node()},
                          [](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
                              for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
                          });
}

// ---------------------------------------------------------------------------
// Dense linear algebra

/// [m,k] x [k,n] -> [m,n]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_rank(a, 2, "matmul");
    detail::check_rank(b, 2, "matmul");
    const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
    detail::require(b.dim(0) == k, "matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                                       shape_str(b.shape()));
    std::vector<T> out(m * n);
    detail::MapMat<T>(out.data(), m, n).noalias() =
        detail::CMapMat<T>(a.data().data(), m, k) * detail::CMapMat<T>(b.data().data(), k, n);
    return make_result<T>({m, n}, std::move(out), "matmul", {a.node(), b.node()},
                          [m, k, n](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
                              detail::CMapMat<T> G(g.data(), m, n);
                              detail::CMapMat<T> A(self.parents[0]->data.data(), m, k);
                              detail::CMapMat<T> B(self.parents[1]->data.data(), k, n);
                              if (pg[0]) detail::MapMat<T>(pg[0]->data(), m, k).noalias() += G * B.transpose();
                              if (pg[1]) detail::MapMat<T>(pg[1]->data(), k, n).noalias() += A.transpose() * G;
                          });
}

/// x [N,F] , weight [O,F], bias [O] (optional) -> [N,O]
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    detail::check_rank(x, 2, "linear");
    detail::check_rank(weight, 2, "linear");
    const auto n = x.dim(0), f = x.dim(1), o = weight.dim(0);
    detail::require(weight.dim(1) == f,
                    "linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(weight.shape()));
    const bool has_bias = bias.defined();
    if (has_bias) detail::require(bias.numel() == o, "linear: bias shape " + shape_str(bias.shape()));
    std::vector<T> out(n * o);
    detail::MapMat<T> Y(out.data(), n, o);
    Y.noalias() = detail::CMapMat<T>(x.data().data(), n, f) * detail::CMapMat<T>(weight.data().data(), o, f).transpose();
    if (has_bias)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < o; ++j) Y(i, j) += bias.data()[j];
    std::vector<NodePtr<T>> parents{x.node(), weight.node()};
    if (has_bias) parents.push_back(bias.node());
    return make_result<T>({n, o}, std::move(out), "linear", std::move(parents),
                          [n, f, o](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
                              detail::CMapMat<T> G(g.data(), n, o);
                              detail::CMapMat<T> X(self.parents[0]->data.data(), n, f);
                              detail::CMapMat<T> W(self.parents[1]->data.data(), o, f);
                              if (pg[0]) detail::MapMat<T>(pg[0]->data(), n, f).noalias() += G * W;
                              if (pg[1]) detail::MapMat<T>(pg[1]->data(), o, f).noalias() += G.transpose() * X;
                              if (pg.size() > 2 && pg[2])
                                  for (std::size_t i = 0; i < n; ++i)
                                      for (std::size_t j = 0; j < o; ++j) (*pg[2])[j] += G(i, j);
                          });
}

// ---------------------------------------------------------------------------
// Image-shaped ops, NCHW layout

namespace detail {

struct ConvGeometry {
    std::size_t h, w, k, stride, pad, oh, ow;
    std::vector<std::uint32_t> src;  // [k*k][oh*ow] -> offset in an input plane

    ConvGeometry(std::size_t h_, std::size_t w_, std::size_t k_, std::size_t stride_)
        : h(h_), w(w_), k(k_), stride(stride_), pad(k_ / 2) {
        oh = (h + 2 * pad - k) / stride + 1;
        ow = (w + 2 * pad - k) / stride + 1;
        src.resize(k * k * oh * ow);
        const std::size_t p = oh * ow;
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx)
                for (std::size_t oy = 0; oy < oh; ++oy)
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const auto sy = reflect(static_cast<long>(oy * stride + ky) - static_cast<long>(pad),
                                                static_cast<long>(h));
                        const auto sx = reflect(static_cast<long>(ox * stride + kx) - static_cast<long>(pad),
                                                static_cast<long>(w));
                        src[(ky * k + kx) * p + oy * ow + ox] = static_cast<std::uint32_t>(sy * w + sx);
                    }
    }
};

template <class T>
void im2col(const T* x, std::size_t cin, const ConvGeometry& geo, T* cols) {
    const std::size_t p = geo.oh * geo.ow, kk = geo.k * geo.k, plane = geo.h * geo.w;
    for (std::size_t c = 0; c < cin; ++c) {
        const T* xp = x + c * plane;
        for (std::size_t j = 0; j < kk; ++j) {
            T* dst = cols + (c * kk + j) * p;
            const std::uint32_t* idx = geo.src.data() + j * p;
            for (std::size_t q = 0; q < p; ++q) dst[q] = xp[idx[q]];
        }
    }
}

template <class T>
void col2im_add(const T* cols, std::size_t cin, const ConvGeometry& geo, T* gx) {
    const std::size_t p = geo.oh * geo.ow, kk = geo.k * geo.k, plane = geo.h * geo.w;
    for (std::size_t c = 0; c < cin; ++c) {
        T* gp = gx + c * plane;
        for (std::size_t j = 0; j < kk; ++j) {
            const T* s = cols + (c * kk + j) * p;
            const std::uint32_t* idx = geo.src.data() + j * p;
            for (std::size_t q = 0; q < p; ++q) gp[idx[q]] += s[q];
        }
    }
}

}  // namespace detail

/// 2-D convolution with reflect padding k/2, so stride 1 preserves the
/// spatial size and stride 2 halves even sizes.
/// x [N,Cin,H,W], weight [Cout,Cin,k,k], bias [Cout] or undefined.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride = 1) {
    detail::check_rank(x, 4, "conv2d");
    detail::check_rank(weight, 4, "conv2d");
    const auto n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const auto cout = weight.dim(0), k = weight.dim(2);
    detail::require(weight.dim(1) == cin && weight.dim(3) == k && k % 2 == 1,
                    "conv2d: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(weight.shape()));
    detail::require(stride >= 1, "conv2d: stride must be positive");
    detail::require((h > k / 2 || h == 1) && (w > k / 2 || w == 1),
                    "conv2d: spatial size " + shape_str(x.shape()) + " too small for reflect padding of kernel " +
                        std::to_string(k));
    const bool has_bias = bias.defined();
    if (has_bias) detail::require(bias.numel() == cout, "conv2d: bias shape " + shape_str(bias.shape()));

    auto geo = std::make_shared<detail::ConvGeometry>(h, w, k, stride);
    const std::size_t p = geo->oh * geo->ow, ckk = cin * k * k;
    std::vector<T> out(n * cout * p);
    std::vector<T> cols(ckk * p);
    detail::CMapMat<T> W(weight.data().data(), cout, ckk);
    for (std::size_t b = 0; b < n; ++b) {
        detail::im2col(x.data().data() + b * cin * h * w, cin, *geo, cols.data());
        detail::MapMat<T> Y(out.data() + b * cout * p, cout, p);
        Y.noalias() = W * detail::CMapMat<T>(cols.data(), ckk, p);
        if (has_bias)
            for (std::size_t c = 0; c < cout; ++c) Y.row(c).array() += bias.data()[c];
    }
    std::vector<NodePtr<T>> parents{x.node(), weight.node()};
    if (has_bias) parents.push_back(bias.node());
    return make_result<T>(
        {n, cout, geo->oh, geo->ow}, std::move(out), "conv2d", std::move(parents),
        [geo, n, cin, cout, ckk, p](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
            const auto& xd = self.parents[0]->data;
            detail::CMapMat<T> W(self.parents[1]->data.data(), cout, ckk);
            const std::size_t plane = geo->h * geo->w;
            std::vector<T> cols(ckk * p), gcols;
            if (pg[0]) gcols.resize(ckk * p);
            for (std::size_t b = 0; b < n; ++b) {
                detail::CMapMat<T> G(g.data() + b * cout * p, cout, p);
                if (pg[1]) {
                    detail::im2col(xd.data() + b * cin * plane, cin, *geo, cols.data());
                    detail::MapMat<T>(pg[1]->data(), cout, ckk).noalias() +=
                        G * detail::CMapMat<T>(cols.data(), ckk, p).transpose();
                }
                if (pg.size() > 2 && pg[2])
                    for (std::size_t c = 0; c < cout; ++c) (*pg[2])[c] += G.row(c).sum();
                if (pg[0]) {
                    detail::MapMat<T>(gcols.data(), ckk, p).noalias() = W.transpose() * G;
                    detail::col2im_add(gcols.data(), cin, *geo, pg[0]->data() + b * cin * plane);
                }
            }
        });
}

/// Group normalization over (C/groups, H, W) per sample, then per-channel
/// affine. Variance is the biased estimator; `eps` is added before the sqrt.
template <class T>
Tensor<T> group_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, std::size_t groups,
                     T eps = T(1e-6)) {
    detail::check_rank(x, 4, "group_norm");
    const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    detail::require(groups > 0 && c % groups == 0,
                    "group_norm: " + std::to_string(groups) + " groups do not divide " + std::to_string(c) + " channels");
    detail::require(gamma.numel() == c && beta.numel() == c, "group_norm: affine parameters must have " +
                                                                 std::to_string(c) + " entries");
    const std::size_t cg = c / groups, m = cg * hw;
    std::vector<T> out(x.numel());
    const auto xd = x.data();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t gi = 0; gi < groups; ++gi) {
            const std::size_t off = (b * c + gi * cg) * hw;
            double s = 0, ss = 0;
            for (std::size_t i = 0; i < m; ++i) s += xd[off + i];
            const double mu = s / static_cast<double>(m);
            for (std::size_t i = 0; i < m; ++i) ss += (xd[off + i] - mu) * (xd[off + i] - mu);
            const double rstd = 1.0 / std::sqrt(ss / static_cast<double>(m) + static_cast<double>(eps));
            for (std::size_t cc = 0; cc < cg; ++cc) {
                const std::size_t ch = gi * cg + cc;
                for (std::size_t i = 0; i < hw; ++i) {
                    const std::size_t idx = off + cc * hw + i;
                    out[idx] = static_cast<T>((xd[idx] - mu) * rstd) * gamma.data()[ch] + beta.data()[ch];
                }
            }
        }
    return make_result<T>(
        x.shape(), std::move(out), "group_norm", {x.node(), gamma.node(), beta.node()},
        [n, c, hw, groups, cg, m, eps](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
            const auto& xd = self.parents[0]->data;
            const auto& gm = self.parents[1]->data;
            std::vector<double> xhat(m), dxhat(m);
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t gi = 0; gi < groups; ++gi) {
                    const std::size_t off = (b * c + gi * cg) * hw;
                    double s = 0, ss = 0;
                    for (std::size_t i = 0; i < m; ++i) s += xd[off + i];
                    const double mu = s / static_cast<double>(m);
                    for (std::size_t i = 0; i < m; ++i) ss += (xd[off + i] - mu) * (xd[off + i] - mu);
                    const double rstd = 1.0 / std::sqrt(ss / static_cast<double>(m) + static_cast<double>(eps));
                    double sum_d = 0, sum_dx = 0;
                    for (std::size_t cc = 0; cc < cg; ++cc) {
                        const std::size_t ch = gi * cg + cc;
                        for (std::size_t i = 0; i < hw; ++i) {
                            const std::size_t j = cc * hw + i;
                            xhat[j] = (xd[off + j] - mu) * rstd;
                            const double gy = g[off + j];
                            if (pg[1]) (*pg[1])[ch] += static_cast<T>(gy * xhat[j]);
                            if (pg[2]) (*pg[2])[ch] += static_cast<T>(gy);
                            dxhat[j] = gy * gm[ch];
                            sum_d += dxhat[j];
                            sum_dx += dxhat[j] * xhat[j];
                        }
                    }
                    if (pg[0]) {
                        const double md = static_cast<double>(m);
                        for (std::size_t j = 0; j < m; ++j)
                            (*pg[0])[off + j] +=
                                static_cast<T>(rstd / md * (md * dxhat[j] - sum_d - xhat[j] * sum_dx));
                    }
                }
        });
}

/// Nearest-neighbour upsampling by an integer factor.
template <class T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t factor) {
    detail::check_rank(x, 4, "upsample_nearest");
    detail::require(factor >= 1, "upsample_nearest: factor must be positive");
    const auto nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    const auto oh = h * factor, ow = w * factor;
    std::vector<T> out(nc * oh * ow);
    const auto xd = x.data();
    for (std::size_t p = 0; p < nc; ++p)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xx = 0; xx < ow; ++xx)
                out[(p * oh + y) * ow + xx] = xd[(p * h + y / factor) * w + xx / factor];
    return make_result<T>({x.dim(0), x.dim(1), oh, ow}, std::move(out), "upsample_nearest", {x.node()},
                          [nc, h, w, factor](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
                              const auto oh = h * factor, ow = w * factor;
                              for (std::size_t p = 0; p < nc; ++p)
                                  for (std::size_t y = 0; y < oh; ++y)
                                      for (std::size_t xx = 0; xx < ow; ++xx)
                                          (*pg[0])[(p * h + y / factor) * w + xx / factor] +=
                                              g[(p * oh + y) * ow + xx];
                          });
}

/// Non-overlapping average pooling by an integer factor.
template <class T>
Tensor<T> avg_pool(const Tensor<T>& x, std::size_t factor) {
    detail::check_rank(x, 4, "avg_pool");
    const auto nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    detail::require(factor >= 1 && h % factor == 0 && w % factor == 0,
                    "avg_pool: factor " + std::to_string(factor) + " does not divide " + shape_str(x.shape()));
    const auto oh = h / factor, ow = w / factor;
    const T inv = T(1) / static_cast<T>(factor * factor);
    std::vector<T> out(nc * oh * ow, T(0));
    const auto xd = x.data();
    for (std::size_t p = 0; p < nc; ++p)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < w; ++xx) out[(p * oh + y / factor) * ow + xx / factor] += xd[(p * h + y) * w + xx];
    for (auto& v : out) v *= inv;
    return make_result<T>({x.dim(0), x.dim(1), oh, ow}, std::move(out), "avg_pool", {x.node()},
                          [nc, h, w, factor, inv](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
                              const auto oh = h / factor, ow = w / factor;
                              for (std::size_t p = 0; p < nc; ++p)
                                  for (std::size_t y = 0; y < h; ++y)
                                      for (std::size_t xx = 0; xx < w; ++xx)
                                          (*pg[0])[(p * h + y) * w + xx] +=
                                              g[(p * oh + y / factor) * ow + xx / factor] * inv;
                          });
}

/// Per-sample Gram matrix: [N,C,H,W] -> [N,C,C], G = F F^T / (H W).
template <class T>
Tensor<T> gram(const Tensor<T>& x) {
    detail::check_rank(x, 4, "gram");
    const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    detail::require(n > 0 && c > 0 && hw > 0, "gram: empty feature map " + shape_str(x.shape()));
    const T inv = T(1) / static_cast<T>(hw);
    std::vector<T> out(n * c * c);
    for (std::size_t b = 0; b < n; ++b) {
        detail::CMapMat<T> F(x.data().data() + b * c * hw, c, hw);
        detail::MapMat<T> G(out.data() + b * c * c, c, c);
        G.noalias() = F * F.transpose();
        G *= inv;
    }
    return make_result<T>({n, c, c}, std::move(out), "gram", {x.node()},
                          [n, c, hw, inv](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>*> pg) {
                              for (std::size_t b = 0; b < n; ++b) {
                                  detail::CMapMat<T> F(self.parents[0]->data.data() + b * c * hw, c, hw);
                                  detail::CMapMat<T> G(g.data() + b * c * c, c, c);
                                  detail::RowMat<T> sym = (G + G.transpose()) * inv;
                                  detail::MapMat<T>(pg[0]->data() + b * c * hw, c, hw).noalias() += sym * F;
                              }
                          });
}

/// Builds an [N,C,H,W] map whose position (n,h,w) holds row indices[n,h,w]
/// of `table` [K,C]. Gradients scatter-add back into the rows.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<int>& indices, std::size_t n, std::size_t h,
                      std::size_t w) {
    detail::check_rank(table, 2, "gather_rows");
    const auto k = table.dim(0), c = table.dim(1), hw = h * w;
    detail::require(indices.size() == n * hw, "gather_rows: index count does not match output positions");
    std::vector<T> out(n * c * hw);
    const auto td = table.data();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t q = 0; q < hw; ++q) {
            const int idx = indices[b * hw + q];
            detail::require(idx >= 0 && static_cast<std::size_t>(idx) < k, "gather_rows: index out of range");
            for (std::size_t ch = 0; ch < c; ++ch) out[(b * c + ch) * hw + q] = td[static_cast<std::size_t>(idx) * c + ch];
        }
    return make_result<T>({n, c, h, w}, std::move(out), "gather_rows", {table.node()},
                          [indices, n, c, hw](const Node<T>&, std::span<const T> g, std::span<std::vector<T>*> pg) {
                              for (std::size_t b = 0; b < n; ++b)
                                  for (std::size_t q = 0; q < hw; ++q) {
                                      const auto row = static_cast<std::size_t>(indices[b * hw + q]);
                                      for (std::size_t ch = 0; ch < c; ++ch)
                                          (*pg[0])[row * c + ch] += g[(b * c + ch) * hw + q];
                                  }
                          });
}

// ---------------------------------------------------------------------------
// Composite helpers

/// Mean over elements of (a-b)^2.
template <class T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "mse");
    return mean(square(sub(a, b)));
}

/// Mean over elements of |a-b|.
template <class T>
Tensor<T> l1(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "l1");
    return mean(abs(sub(a, b)));
}

/// Mean over spatial positions of the squared channel-vector distance,
/// for [N,C,H,W] maps.
template <class T>
Tensor<T> mean_sq_dist(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "mean_sq_dist");
    detail::check_rank(a, 4, "mean_sq_dist");
    const auto positions = a.dim(0) * a.dim(2) * a.dim(3);
    return scale(sum(square(sub(a, b))), T(1) / static_cast<T>(positions));
}

}  // namespace femasr::ad
