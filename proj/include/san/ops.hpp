#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "san/autograd.hpp"

// Differentiable tensor operations. Every op computes its forward value
// eagerly and, when recording, registers a closure that pushes the output
// gradient into its inputs.

namespace san::ops {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

struct ConvGeom {
    int channels, height, width;  // image side
    int kh, kw, stride, pad;
    int out_h, out_w;             // patch-grid side

    int rows() const { return channels * kh * kw; }
    int cols() const { return out_h * out_w; }
};

inline ConvGeom conv_geom(int c, int h, int w, int kh, int kw, int stride, int pad) {
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (w + 2 * pad - kw) / stride + 1;
    if (oh <= 0 || ow <= 0) throw ShapeError("convolution kernel larger than padded input");
    return {c, h, w, kh, kw, stride, pad, oh, ow};
}

template <class T>
void im2col(const T* img, const ConvGeom& g, T* col) {
    const int cols = g.cols();
    for (int c = 0; c < g.channels; ++c)
        for (int ky = 0; ky < g.kh; ++ky)
            for (int kx = 0; kx < g.kw; ++kx) {
                T* row = col + static_cast<std::size_t>((c * g.kh + ky) * g.kw + kx) * cols;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    T* dst = row + oy * g.out_w;
                    if (iy < 0 || iy >= g.height) {
                        std::fill(dst, dst + g.out_w, T(0));
                        continue;
                    }
                    const T* src = img + (static_cast<std::size_t>(c) * g.height + iy) * g.width;
                    for (int ox = 0; ox < g.out_w; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        dst[ox] = (ix >= 0 && ix < g.width) ? src[ix] : T(0);
                    }
                }
            }
}

// Adjoint of im2col: scatters patch columns back and accumulates.
template <class T>
void col2im(const T* col, const ConvGeom& g, T* img) {
    const int cols = g.cols();
    for (int c = 0; c < g.channels; ++c)
        for (int ky = 0; ky < g.kh; ++ky)
            for (int kx = 0; kx < g.kw; ++kx) {
                const T* row = col + static_cast<std::size_t>((c * g.kh + ky) * g.kw + kx) * cols;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.height) continue;
                    T* dst = img + (static_cast<std::size_t>(c) * g.height + iy) * g.width;
                    const T* src = row + oy * g.out_w;
                    for (int ox = 0; ox < g.out_w; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        if (ix >= 0 && ix < g.width) dst[ix] += src[ox];
                    }
                }
            }
}

}  // namespace detail

/// 2-D convolution. x: N×Cin×H×W, w: Cout×Cin×k×k, b: Cout or undefined.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
    using namespace detail;
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (xs.rank() != 4 || ws.rank() != 4 || xs.c() != ws[1])
        throw ShapeError("conv2d input " + xs.str() + " weight " + ws.str());
    const int n = xs.n(), cout = ws[0];
    const ConvGeom g = conv_geom(xs.c(), xs.h(), xs.w(), ws[2], ws[3], stride, pad);
    const int K = g.rows(), P = g.cols();
    const bool keep = grad_enabled() && (x.requires_grad() || w.requires_grad() || (b.defined() && b.requires_grad()));

    Tensor<T> y(Shape{n, cout, g.out_h, g.out_w});
    Buffer<T> cols(keep ? static_cast<std::size_t>(n) * K * P : static_cast<std::size_t>(K) * P);
    CMapMat<T> W(w.value().data(), cout, K);
    const std::size_t in_stride = static_cast<std::size_t>(g.channels) * g.height * g.width;
    for (int i = 0; i < n; ++i) {
        T* col = cols.data() + (keep ? static_cast<std::size_t>(i) * K * P : 0);
        im2col(x.value().data() + i * in_stride, g, col);
        MapMat<T> Y(y.data() + static_cast<std::size_t>(i) * cout * P, cout, P);
        Y.noalias() = W * CMapMat<T>(col, K, P);
        if (b.defined())
            for (int c = 0; c < cout; ++c) Y.row(c).array() += b.value()[c];
    }

    std::vector<Var<T>> inputs{x, w};
    if (b.defined()) inputs.push_back(b);
    return make_result<T>(std::move(y), inputs,
                          [g, n, cout, K, P, in_stride, cols = std::move(cols)](Node<T>& self) {
                              auto& px = *self.parents[0];
                              auto& pw = *self.parents[1];
                              CMapMat<T> W(pw.value.data(), cout, K);
                              Buffer<T> dcol(static_cast<std::size_t>(K) * P);
                              for (int i = 0; i < n; ++i) {
                                  CMapMat<T> dY(self.grad.data() + static_cast<std::size_t>(i) * cout * P, cout, P);
                                  CMapMat<T> col(cols.data() + static_cast<std::size_t>(i) * K * P, K, P);
                                  if (pw.requires_grad) {
                                      MapMat<T> dW(pw.grad_buffer().data(), cout, K);
                                      dW.noalias() += dY * col.transpose();
                                  }
                                  if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
                                      auto& db = self.parents[2]->grad_buffer();
                                      for (int c = 0; c < cout; ++c) db[c] += dY.row(c).sum();
                                  }
                                  if (px.requires_grad) {
                                      MapMat<T>(dcol.data(), K, P).noalias() = W.transpose() * dY;
                                      col2im(dcol.data(), g, px.grad_buffer().data() + i * in_stride);
                                  }
                              }
                          });
}

/// Transposed convolution (fractionally strided). x: N×Cin×H×W,
/// w: Cin×Cout×k×k. Output side is (H-1)*stride - 2*pad + k.
template <class T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
    using namespace detail;
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (xs.rank() != 4 || ws.rank() != 4 || xs.c() != ws[0])
        throw ShapeError("conv_transpose2d input " + xs.str() + " weight " + ws.str());
    const int n = xs.n(), cin = ws[0], cout = ws[1];
    const int oh = (xs.h() - 1) * stride - 2 * pad + ws[2];
    const int ow = (xs.w() - 1) * stride - 2 * pad + ws[3];
    const ConvGeom g = conv_geom(cout, oh, ow, ws[2], ws[3], stride, pad);
    if (g.out_h != xs.h() || g.out_w != xs.w()) throw ShapeError("conv_transpose2d geometry");
    const int K = g.rows(), P = g.cols();
    const std::size_t out_stride = static_cast<std::size_t>(cout) * oh * ow;

    Tensor<T> y(Shape{n, cout, oh, ow});
    Buffer<T> col(static_cast<std::size_t>(K) * P);
    CMapMat<T> W(w.value().data(), cin, K);
    for (int i = 0; i < n; ++i) {
        CMapMat<T> X(x.value().data() + static_cast<std::size_t>(i) * cin * P, cin, P);
        MapMat<T>(col.data(), K, P).noalias() = W.transpose() * X;
        T* out = y.data() + i * out_stride;
        col2im(col.data(), g, out);
        if (b.defined())
            for (int c = 0; c < cout; ++c)
                for (int p = 0; p < oh * ow; ++p) out[static_cast<std::size_t>(c) * oh * ow + p] += b.value()[c];
    }

    std::vector<Var<T>> inputs{x, w};
    if (b.defined()) inputs.push_back(b);
    return make_result<T>(std::move(y), inputs, [g, n, cin, cout, K, P, out_stride](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        CMapMat<T> W(pw.value.data(), cin, K);
        Buffer<T> dcol(static_cast<std::size_t>(K) * P);
        for (int i = 0; i < n; ++i) {
            const T* dy = self.grad.data() + i * out_stride;
            im2col(dy, g, dcol.data());
            CMapMat<T> dC(dcol.data(), K, P);
            if (pw.requires_grad) {
                CMapMat<T> X(px.value.data() + static_cast<std::size_t>(i) * cin * P, cin, P);
                MapMat<T>(pw.grad_buffer().data(), cin, K).noalias() += X * dC.transpose();
            }
            if (px.requires_grad)
                MapMat<T>(px.grad_buffer().data() + static_cast<std::size_t>(i) * cin * P, cin, P).noalias() +=
                    W * dC;
            if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
                auto& db = self.parents[2]->grad_buffer();
                const std::size_t hw = static_cast<std::size_t>(g.height) * g.width;
                for (int c = 0; c < cout; ++c) {
                    T s = 0;
                    for (std::size_t p = 0; p < hw; ++p) s += dy[c * hw + p];
                    db[c] += s;
                }
            }
        }
    });
}

/// Running statistics carried by a batch-normalization layer.
template <class T>
struct RunningStats {
    Tensor<T> mean;
    Tensor<T> var;
    T momentum = T(0.1);
};

enum class NormKind { batch, instance, none };

/// Batch or instance normalization with affine parameters.
/// Batch mode in training uses batch statistics and updates `stats`;
/// in evaluation it normalizes with the running statistics.
template <class T>
Var<T> normalize(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, NormKind kind, bool training,
                 RunningStats<T>* stats, T eps = T(1e-5)) {
    const Shape& s = x.shape();
    if (s.rank() != 4) throw ShapeError("normalize expects NCHW, got " + s.str());
    const int n = s.n(), c = s.c();
    const std::size_t hw = static_cast<std::size_t>(s.h()) * s.w();
    const bool per_instance = kind == NormKind::instance;
    const bool use_running = kind == NormKind::batch && !training;
    const int groups = per_instance ? n * c : c;
    const std::size_t group_size = per_instance ? hw : hw * n;

    // Visits every element index belonging to group g.
    auto for_group = [&](int g, auto&& f) {
        if (per_instance) {
            const std::size_t base = static_cast<std::size_t>(g) * hw;
            for (std::size_t p = 0; p < hw; ++p) f(base + p);
        } else {
            for (int i = 0; i < n; ++i) {
                const std::size_t base = (static_cast<std::size_t>(i) * c + g) * hw;
                for (std::size_t p = 0; p < hw; ++p) f(base + p);
            }
        }
    };

    const auto& xv = x.value().vec();
    Tensor<T> xhat(s), y(s);
    std::vector<T> inv_std(static_cast<std::size_t>(groups));
    for (int g = 0; g < groups; ++g) {
        T mean = 0, var = 0;
        if (use_running) {
            mean = stats->mean[g];
            var = stats->var[g];
        } else {
            double acc = 0;
            for_group(g, [&](std::size_t i) { acc += xv[i]; });
            mean = static_cast<T>(acc / group_size);
            double acc2 = 0;
            for_group(g, [&](std::size_t i) { acc2 += double(xv[i] - mean) * double(xv[i] - mean); });
            var = static_cast<T>(acc2 / group_size);
            if (kind == NormKind::batch && training && stats) {
                const T unbiased = group_size > 1 ? static_cast<T>(acc2 / (group_size - 1)) : var;
                stats->mean[g] = (T(1) - stats->momentum) * stats->mean[g] + stats->momentum * mean;
                stats->var[g] = (T(1) - stats->momentum) * stats->var[g] + stats->momentum * unbiased;
            }
        }
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[g] = is;
        const int ch = per_instance ? g % c : g;
        const T ga = gamma.value()[ch], be = beta.value()[ch];
        for_group(g, [&](std::size_t i) {
            xhat[i] = (xv[i] - mean) * is;
            y[i] = ga * xhat[i] + be;
        });
    }

    return make_result<T>(std::move(y), {x, gamma, beta},
                          [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
                              auto visit = [&](int g, auto&& f) {
                                  if (per_instance) {
                                      const std::size_t base = static_cast<std::size_t>(g) * hw;
                                      for (std::size_t p = 0; p < hw; ++p) f(base + p);
                                  } else {
                                      for (int i = 0; i < n; ++i) {
                                          const std::size_t base = (static_cast<std::size_t>(i) * c + g) * hw;
                                          for (std::size_t p = 0; p < hw; ++p) f(base + p);
                                      }
                                  }
                              };
                              auto& px = *self.parents[0];
                              auto& pg = *self.parents[1];
                              auto& pb = *self.parents[2];
                              const auto& dy = self.grad.vec();
                              for (int g = 0; g < groups; ++g) {
                                  const int ch = per_instance ? g % c : g;
                                  T sum_dy = 0, sum_dy_xhat = 0;
                                  visit(g, [&](std::size_t i) {
                                      sum_dy += dy[i];
                                      sum_dy_xhat += dy[i] * xhat[i];
                                  });
                                  if (pg.requires_grad) pg.grad_buffer()[ch] += sum_dy_xhat;
                                  if (pb.requires_grad) pb.grad_buffer()[ch] += sum_dy;
                                  if (!px.requires_grad) continue;
                                  const T ga = pg.value[ch];
                                  auto& dx = px.grad_buffer();
                                  if (use_running) {
                                      visit(g, [&](std::size_t i) { dx[i] += dy[i] * ga * inv_std[g]; });
                                  } else {
                                      const T m = static_cast<T>(group_size);
                                      const T k = ga * inv_std[g] / m;
                                      visit(g, [&](std::size_t i) {
                                          dx[i] += k * (m * dy[i] - sum_dy - xhat[i] * sum_dy_xhat);
                                      });
                                  }
                              }
                          });
}

template <class T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
    Tensor<T> y(x.shape());
    const auto& xv = x.value().vec();
    for (std::size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] > 0 ? xv[i] : slope * xv[i];
    return make_result<T>(std::move(y), {x}, [slope](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& dx = px.grad_buffer();
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[i] * (px.value[i] > 0 ? T(1) : slope);
    });
}

template <class T>
T sigmoid_scalar(T v) {
    return v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
    Tensor<T> y(x.shape());
    const auto& xv = x.value().vec();
    for (std::size_t i = 0; i < xv.size(); ++i) y[i] = sigmoid_scalar(xv[i]);
    return make_result<T>(std::move(y), {x}, [](Node<T>& self) {
        auto& dx = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[i] * self.value[i] * (T(1) - self.value[i]);
    });
}

template <class T>
Var<T> tanh(const Var<T>& x) {
    Tensor<T> y(x.shape());
    const auto& xv = x.value().vec();
    for (std::size_t i = 0; i < xv.size(); ++i) y[i] = std::tanh(xv[i]);
    return make_result<T>(std::move(y), {x}, [](Node<T>& self) {
        auto& dx = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[i] * (T(1) - self.value[i] * self.value[i]);
    });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.shape(), b.shape(), "add");
    Tensor<T> y(a.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] + b.value()[i];
    return make_result<T>(std::move(y), {a, b}, [](Node<T>& self) {
        for (auto& p : self.parents)
            if (p->requires_grad) {
                auto& d = p->grad_buffer();
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
            }
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.shape(), b.shape(), "sub");
    Tensor<T> y(a.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] - b.value()[i];
    return make_result<T>(std::move(y), {a, b}, [](Node<T>& self) {
        for (std::size_t k = 0; k < 2; ++k)
            if (self.parents[k]->requires_grad) {
                auto& d = self.parents[k]->grad_buffer();
                const T sign = k == 0 ? T(1) : T(-1);
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += sign * self.grad[i];
            }
    });
}

/// Element-wise product of equally shaped tensors.
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.shape(), b.shape(), "mul");
    Tensor<T> y(a.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
    return make_result<T>(std::move(y), {a, b}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            auto& d = pa.grad_buffer();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
            auto& d = pb.grad_buffer();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * pa.value[i];
        }
    });
}

/// x: N×C×H×W times a single-channel m: N×1×H×W broadcast over channels.
template <class T>
Var<T> mul_channel_broadcast(const Var<T>& x, const Var<T>& m) {
    const Shape& s = x.shape();
    if (m.shape() != Shape{s.n(), 1, s.h(), s.w()}) throw ShapeError("mask " + m.shape().str() + " for " + s.str());
    const std::size_t hw = static_cast<std::size_t>(s.h()) * s.w();
    const int n = s.n(), c = s.c();
    Tensor<T> y(s);
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < hw; ++p)
                y[(static_cast<std::size_t>(i) * c + ch) * hw + p] =
                    x.value()[(static_cast<std::size_t>(i) * c + ch) * hw + p] * m.value()[i * hw + p];
    return make_result<T>(std::move(y), {x, m}, [n, c, hw](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pm = *self.parents[1];
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch)
                for (std::size_t p = 0; p < hw; ++p) {
                    const std::size_t k = (static_cast<std::size_t>(i) * c + ch) * hw + p;
                    if (px.requires_grad) px.grad_buffer()[k] += self.grad[k] * pm.value[i * hw + p];
                    if (pm.requires_grad) pm.grad_buffer()[i * hw + p] += self.grad[k] * px.value[k];
                }
    });
}

template <class T>
Var<T> scale(const Var<T>& x, T s) {
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = x.value()[i] * s;
    return make_result<T>(std::move(y), {x}, [s](Node<T>& self) {
        auto& d = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * s;
    });
}

/// Depth (channel) concatenation of NCHW tensors sharing N, H, W.
template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
    if (xs.empty()) throw ShapeError("concat of nothing");
    const Shape& s0 = xs[0].shape();
    int total = 0;
    for (const auto& x : xs) {
        const Shape& s = x.shape();
        if (s.rank() != 4 || s.n() != s0.n() || s.h() != s0.h() || s.w() != s0.w())
            throw ShapeError("concat " + s.str() + " with " + s0.str());
        total += s.c();
    }
    const int n = s0.n();
    const std::size_t hw = static_cast<std::size_t>(s0.h()) * s0.w();
    Tensor<T> y(Shape{n, total, s0.h(), s0.w()});
    std::vector<int> offsets;
    int off = 0;
    for (const auto& x : xs) {
        offsets.push_back(off);
        const int c = x.shape().c();
        for (int i = 0; i < n; ++i)
            std::copy_n(x.value().data() + static_cast<std::size_t>(i) * c * hw, c * hw,
                        y.data() + (static_cast<std::size_t>(i) * total + off) * hw);
        off += c;
    }
    return make_result<T>(std::move(y), xs, [n, total, hw, offsets](Node<T>& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            auto& p = *self.parents[k];
            if (!p.requires_grad) continue;
            const int c = p.value.shape().c();
            auto& d = p.grad_buffer();
            for (int i = 0; i < n; ++i) {
                const T* src = self.grad.data() + (static_cast<std::size_t>(i) * total + offsets[k]) * hw;
                T* dst = d.data() + static_cast<std::size_t>(i) * c * hw;
                for (std::size_t j = 0; j < c * hw; ++j) dst[j] += src[j];
            }
        }
    });
}

/// N×C×H×W → N×C spatial mean.
template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
    const Shape& s = x.shape();
    const int n = s.n(), c = s.c();
    const std::size_t hw = static_cast<std::size_t>(s.h()) * s.w();
    Tensor<T> y(Shape{n, c});
    for (int i = 0; i < n * c; ++i) {
        T acc = 0;
        for (std::size_t p = 0; p < hw; ++p) acc += x.value()[i * hw + p];
        y[i] = acc / static_cast<T>(hw);
    }
    return make_result<T>(std::move(y), {x}, [n, c, hw](Node<T>& self) {
        auto& d = self.parents[0]->grad_buffer();
        for (int i = 0; i < n * c; ++i)
            for (std::size_t p = 0; p < hw; ++p) d[i * hw + p] += self.grad[i] / static_cast<T>(hw);
    });
}

/// x: N×F, w: O×F, b: O (or undefined) → N×O.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    using namespace detail;
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (xs.rank() != 2 || ws.rank() != 2 || xs[1] != ws[1]) throw ShapeError("linear " + xs.str() + " " + ws.str());
    const int n = xs[0], f = xs[1], o = ws[0];
    Tensor<T> y(Shape{n, o});
    MapMat<T> Y(y.data(), n, o);
    Y.noalias() = CMapMat<T>(x.value().data(), n, f) * CMapMat<T>(w.value().data(), o, f).transpose();
    if (b.defined())
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < o; ++j) Y(i, j) += b.value()[j];
    std::vector<Var<T>> inputs{x, w};
    if (b.defined()) inputs.push_back(b);
    return make_result<T>(std::move(y), inputs, [n, f, o](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        CMapMat<T> dY(self.grad.data(), n, o);
        if (px.requires_grad)
            MapMat<T>(px.grad_buffer().data(), n, f).noalias() += dY * CMapMat<T>(pw.value.data(), o, f);
        if (pw.requires_grad)
            MapMat<T>(pw.grad_buffer().data(), o, f).noalias() += dY.transpose() * CMapMat<T>(px.value.data(), n, f);
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
            auto& db = self.parents[2]->grad_buffer();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < o; ++j) db[j] += dY(i, j);
        }
    });
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape s) {
    Tensor<T> y = x.value().reshaped(std::move(s));
    return make_result<T>(std::move(y), {x}, [](Node<T>& self) {
        auto& d = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
    });
}

/// Mean over every element, as a {1} scalar.
template <class T>
Var<T> mean(const Var<T>& x) {
    T acc = 0;
    for (T v : x.value().vec()) acc += v;
    const T count = static_cast<T>(x.value().size());
    return make_result<T>(Tensor<T>(Shape{1}, acc / count), {x}, [count](Node<T>& self) {
        auto& d = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[0] / count;
    });
}

/// Sum of x ⊙ w for a constant weight tensor w (used to probe gradients).
template <class T>
Var<T> dot_const(const Var<T>& x, const Tensor<T>& w) {
    require_same_shape(x.shape(), w.shape(), "dot_const");
    T acc = 0;
    for (std::size_t i = 0; i < w.size(); ++i) acc += x.value()[i] * w[i];
    return make_result<T>(Tensor<T>(Shape{1}, acc), {x}, [w](Node<T>& self) {
        auto& d = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[0] * w[i];
    });
}

/// Mean absolute difference over all elements.
template <class T>
Var<T> mean_abs_diff(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.shape(), b.shape(), "mean_abs_diff");
    const std::size_t n = a.value().size();
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += std::abs(a.value()[i] - b.value()[i]);
    return make_result<T>(Tensor<T>(Shape{1}, acc / static_cast<T>(n)), {a, b}, [n](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const T g = self.grad[0] / static_cast<T>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const T diff = pa.value[i] - pb.value[i];
            const T s = diff > 0 ? g : (diff < 0 ? -g : T(0));
            if (pa.requires_grad) pa.grad_buffer()[i] += s;
            if (pb.requires_grad) pb.grad_buffer()[i] -= s;
        }
    });
}

/// Mean squared difference over all elements.
template <class T>
Var<T> mean_sq_diff(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.shape(), b.shape(), "mean_sq_diff");
    const std::size_t n = a.value().size();
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const T d = a.value()[i] - b.value()[i];
        acc += d * d;
    }
    return make_result<T>(Tensor<T>(Shape{1}, acc / static_cast<T>(n)), {a, b}, [n](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const T g = T(2) * self.grad[0] / static_cast<T>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const T diff = pa.value[i] - pb.value[i];
            if (pa.requires_grad) pa.grad_buffer()[i] += g * diff;
            if (pb.requires_grad) pb.grad_buffer()[i] -= g * diff;
        }
    });
}

/// log(clamp(p, eps, 1 - eps)); the gradient is zero where clamped.
template <class T>
Var<T> log_clamped(const Var<T>& p, T eps) {
    Tensor<T> y(p.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::log(std::clamp(p.value()[i], eps, T(1) - eps));
    return make_result<T>(std::move(y), {p}, [eps](Node<T>& self) {
        auto& pp = *self.parents[0];
        auto& d = pp.grad_buffer();
        for (std::size_t i = 0; i < d.size(); ++i) {
            const T v = pp.value[i];
            if (v > eps && v < T(1) - eps) d[i] += self.grad[i] / v;
        }
    });
}

/// 1 - p element-wise.
template <class T>
Var<T> one_minus(const Var<T>& p) {
    Tensor<T> y(p.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = T(1) - p.value()[i];
    return make_result<T>(std::move(y), {p}, [](Node<T>& self) {
        auto& d = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] -= self.grad[i];
    });
}

/// Mean softmax cross-entropy of N×K logits against integer labels.
template <class T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
    const Shape& s = logits.shape();
    if (s.rank() != 2 || s[0] != static_cast<int>(labels.size())) throw ShapeError("cross entropy " + s.str());
    const int n = s[0], k = s[1];
    Tensor<T> probs(s);
    T loss = 0;
    for (int i = 0; i < n; ++i) {
        const T* row = logits.value().data() + static_cast<std::size_t>(i) * k;
        const T mx = *std::max_element(row, row + k);
        T z = 0;
        for (int j = 0; j < k; ++j) z += std::exp(row[j] - mx);
        for (int j = 0; j < k; ++j) probs[static_cast<std::size_t>(i) * k + j] = std::exp(row[j] - mx) / z;
        const int label = labels[static_cast<std::size_t>(i)];
        if (label < 0 || label >= k) throw ShapeError("class label " + std::to_string(label));
        loss -= (row[label] - mx) - std::log(z);
    }
    return make_result<T>(Tensor<T>(Shape{1}, loss / n), {logits}, [n, k, labels, probs](Node<T>& self) {
        auto& d = self.parents[0]->grad_buffer();
        const T g = self.grad[0] / n;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < k; ++j) {
                const std::size_t idx = static_cast<std::size_t>(i) * k + j;
                d[idx] += g * (probs[idx] - (j == labels[static_cast<std::size_t>(i)] ? T(1) : T(0)));
            }
    });
}

/// Weighted sum of {1}-shaped scalars.
template <class T>
Var<T> weighted_sum(const std::vector<Var<T>>& xs, const std::vector<T>& weights) {
    T acc = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) acc += weights[i] * xs[i].value()[0];
    return make_result<T>(Tensor<T>(Shape{1}, acc), xs, [weights](Node<T>& self) {
        for (std::size_t i = 0; i < self.parents.size(); ++i)
            if (self.parents[i]->requires_grad) self.parents[i]->grad_buffer()[0] += weights[i] * self.grad[0];
    });
}

}  // namespace san::ops
