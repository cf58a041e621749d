#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "tdnnforge/error.hpp"
#include "tdnnforge/tensor.hpp"

// Differentiable primitives every other module composes: affine maps,
// sigmoid, concatenation, 1-D max-pooling, and the finite-difference
// gradient oracle. All functions are pure.

namespace tdnnforge {

// ---- Affine layer ----

struct AffineParams {
    Tensor W;  // [out_dim x in_dim]
    Tensor b;  // [out_dim]

    AffineParams() = default;
    AffineParams(Tensor weights, Tensor bias) : W(std::move(weights)), b(std::move(bias)) {
        if (W.ndim() != 2 || b.ndim() != 1 || W.size(0) != b.size(0)) {
            throw DimensionError("affine params: W " + W.shape_str() + " vs b " + b.shape_str());
        }
    }

    static AffineParams zeros(std::size_t out_dim, std::size_t in_dim) {
        return AffineParams(Tensor({out_dim, in_dim}), Tensor({out_dim}));
    }

    std::size_t out_dim() const { return W.size(0); }
    std::size_t in_dim() const { return W.size(1); }
    std::size_t param_count() const { return W.numel() + b.numel(); }
};

struct AffineGrads {
    Tensor W;
    Tensor b;
    Tensor x;  // grad w.r.t. the input batch
};

// out[i] = W * x[i] + b for every batch row i.
inline Tensor affine_forward(const Tensor& x, const AffineParams& p) {
    if (x.ndim() != 2 || x.size(1) != p.in_dim()) {
        throw DimensionError("affine_forward: input " + x.shape_str() + " vs W " +
                             p.W.shape_str());
    }
    const std::size_t batch = x.size(0), in = p.in_dim(), out = p.out_dim();
    Tensor y({batch, out});
    for (std::size_t i = 0; i < batch; ++i) {
        const double* xi = x.row(i);
        double* yi = y.row(i);
        for (std::size_t o = 0; o < out; ++o) {
            const double* w = p.W.row(o);
            double acc = 0.0;
            for (std::size_t j = 0; j < in; ++j) acc += w[j] * xi[j];
            yi[o] = acc + p.b[o];
        }
    }
    return y;
}

// grad_W = grad_out^T * x; grad_b = column-sum(grad_out); grad_x = grad_out * W.
inline AffineGrads affine_backward(const Tensor& x, const AffineParams& p,
                                   const Tensor& grad_out) {
    if (x.ndim() != 2 || x.size(1) != p.in_dim()) {
        throw DimensionError("affine_backward: input " + x.shape_str() + " vs W " +
                             p.W.shape_str());
    }
    if (grad_out.ndim() != 2 || grad_out.size(0) != x.size(0) ||
        grad_out.size(1) != p.out_dim()) {
        throw DimensionError("affine_backward: grad_out " + grad_out.shape_str() +
                             " vs expected [" + std::to_string(x.size(0)) + "x" +
                             std::to_string(p.out_dim()) + "]");
    }
    const std::size_t batch = x.size(0), in = p.in_dim(), out = p.out_dim();
    AffineGrads g;
    g.W = Tensor({out, in});
    g.b = Tensor({out});
    g.x = Tensor({batch, in});
    for (std::size_t i = 0; i < batch; ++i) {
        const double* xi = x.row(i);
        const double* go = grad_out.row(i);
        double* gx = g.x.row(i);
        for (std::size_t o = 0; o < out; ++o) {
            const double go_o = go[o];
            g.b[o] += go_o;
            double* gw = g.W.row(o);
            const double* w = p.W.row(o);
            for (std::size_t j = 0; j < in; ++j) {
                gw[j] += go_o * xi[j];
                gx[j] += go_o * w[j];
            }
        }
    }
    return g;
}

// Accumulate rhs into lhs (same shapes). Used by shared-weight reductions.
inline void accumulate(Tensor& lhs, const Tensor& rhs) {
    if (!lhs.same_shape(rhs)) {
        throw DimensionError("accumulate: " + lhs.shape_str() + " vs " + rhs.shape_str());
    }
    double* a = lhs.data();
    const double* b = rhs.data();
    for (std::size_t i = 0; i < lhs.numel(); ++i) a[i] += b[i];
}

inline void scale(Tensor& t, double factor) {
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] *= factor;
}

// ---- Sigmoid ----

// Input clamped to [-500, 500] before exponentiation; saturation at that
// range is below 1e-12 in 64-bit.
inline double sigmoid_scalar(double x) {
    const double c = std::clamp(x, -500.0, 500.0);
    return 1.0 / (1.0 + std::exp(-c));
}

inline Tensor sigmoid(const Tensor& x) {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) y[i] = sigmoid_scalar(x[i]);
    return y;
}

inline void sigmoid_inplace(Tensor& x) {
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] = sigmoid_scalar(x[i]);
}

// Backward from the forward *output* y: grad_x = y * (1 - y) * grad_out.
inline Tensor sigmoid_backward(const Tensor& y, const Tensor& grad_out) {
    if (!y.same_shape(grad_out)) {
        throw DimensionError("sigmoid_backward: y " + y.shape_str() + " vs grad " +
                             grad_out.shape_str());
    }
    Tensor gx(y.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) gx[i] = y[i] * (1.0 - y[i]) * grad_out[i];
    return gx;
}

// ---- Concatenation ----

// Column-wise concatenation of 2-D tensors with equal batch size.
inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.size(0) != b.size(0)) {
        throw DimensionError("concat_cols: " + a.shape_str() + " vs " + b.shape_str());
    }
    const std::size_t batch = a.size(0), ca = a.size(1), cb = b.size(1);
    Tensor out({batch, ca + cb});
    for (std::size_t i = 0; i < batch; ++i) {
        double* o = out.row(i);
        std::copy(a.row(i), a.row(i) + ca, o);
        std::copy(b.row(i), b.row(i) + cb, o + ca);
    }
    return out;
}

// ---- 1-D max pooling ----

struct MaxPool1dResult {
    std::vector<double> pooled;
    std::vector<std::size_t> argmax;  // input index per window, for backward routing
};

inline MaxPool1dResult max_pool_1d(const double* x, std::size_t n, std::size_t size,
                                   std::size_t stride) {
    if (size == 0 || stride == 0 || n < size || (n - size) % stride != 0) {
        throw GeometryError("max_pool_1d: indivisible geometry N=" + std::to_string(n) +
                            " size=" + std::to_string(size) +
                            " stride=" + std::to_string(stride));
    }
    const std::size_t n_out = (n - size) / stride + 1;
    MaxPool1dResult r;
    r.pooled.resize(n_out);
    r.argmax.resize(n_out);
    for (std::size_t j = 0; j < n_out; ++j) {
        std::size_t base = j * stride;
        std::size_t best = base;
        double best_v = x[base];
        for (std::size_t k = 1; k < size; ++k) {
            if (x[base + k] > best_v) {  // ties keep the first maximum
                best_v = x[base + k];
                best = base + k;
            }
        }
        r.pooled[j] = best_v;
        r.argmax[j] = best;
    }
    return r;
}

inline MaxPool1dResult max_pool_1d(const std::vector<double>& x, std::size_t size,
                                   std::size_t stride) {
    return max_pool_1d(x.data(), x.size(), size, stride);
}

// Routes each window's incoming gradient to its recorded argmax element.
inline std::vector<double> max_pool_1d_backward(const MaxPool1dResult& fwd, std::size_t n,
                                                const std::vector<double>& grad_pooled) {
    if (grad_pooled.size() != fwd.pooled.size()) {
        throw DimensionError("max_pool_1d_backward: grad length " +
                             std::to_string(grad_pooled.size()) + " vs pooled " +
                             std::to_string(fwd.pooled.size()));
    }
    std::vector<double> gx(n, 0.0);
    for (std::size_t j = 0; j < grad_pooled.size(); ++j) gx[fwd.argmax[j]] += grad_pooled[j];
    return gx;
}

// ---- Finite-difference gradient oracle ----

using LossFn = std::function<double(const Tensor&)>;

// Central differences (loss(p + eps e_i) - loss(p - eps e_i)) / (2 eps).
// The reference every analytic backward pass in this library is checked
// against.
inline Tensor finite_diff_grad(const LossFn& loss_fn, const Tensor& params, double eps) {
    if (!(eps > 0.0)) throw NumericError("finite_diff_grad: eps must be > 0");
    Tensor p = params;
    Tensor grad(params.shape());
    for (std::size_t i = 0; i < p.numel(); ++i) {
        const double orig = p[i];
        p[i] = orig + eps;
        const double up = loss_fn(p);
        p[i] = orig - eps;
        const double down = loss_fn(p);
        p[i] = orig;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw NumericError("finite_diff_grad: non-finite loss at coordinate " +
                               std::to_string(i));
        }
        grad[i] = (up - down) / (2.0 * eps);
    }
    return grad;
}

// Guarded relative error between a finite-difference estimate and an
// analytic gradient. The denominator floor compares near-zero entries
// absolutely at the 1e-8 level instead of amplifying oracle roundoff.
inline double gradient_rel_error(const Tensor& fd, const Tensor& analytic) {
    if (!fd.same_shape(analytic)) {
        throw DimensionError("gradient_rel_error: " + fd.shape_str() + " vs " +
                             analytic.shape_str());
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < fd.numel(); ++i) {
        const double denom = std::max({std::abs(fd[i]), std::abs(analytic[i]), 1e-4});
        worst = std::max(worst, std::abs(fd[i] - analytic[i]) / denom);
    }
    return worst;
}

}  // namespace tdnnforge
