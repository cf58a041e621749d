#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "tdnnforge/error.hpp"
#include "tdnnforge/numerics.hpp"
#include "tdnnforge/tensor.hpp"

// Temporal-kernel family: the parameterized map applied at each TDNN
// position. Four kinds:
//   standard      y = sigmoid(A1 x)                       (1 layer)
//   double        y = sigmoid(A2 sigmoid(A1 x))           (2 layers)
//   resnet        h1 = sigmoid(A1 x)
//                 y  = A3 sigmoid(A2 h1) + h1             (3 layers)
//   deep_stack(n) n chained sigmoid-affine layers
// The resnet final layer is linear and nothing is applied after the
// residual addition; the consuming kernel supplies its own sigmoid.

namespace tdnnforge {

enum class KernelKind { standard, double_kernel, resnet, deep_stack };

inline const char* kernel_kind_name(KernelKind k) {
    switch (k) {
        case KernelKind::standard: return "standard";
        case KernelKind::double_kernel: return "double";
        case KernelKind::resnet: return "resnet";
        case KernelKind::deep_stack: return "deep_stack";
    }
    return "?";
}

struct KernelConfig {
    KernelKind kind = KernelKind::standard;
    std::size_t in_dim = 1;
    std::size_t width = 1;
    std::size_t n_layers = 1;  // deep_stack only

    std::size_t layer_count() const {
        switch (kind) {
            case KernelKind::standard: return 1;
            case KernelKind::double_kernel: return 2;
            case KernelKind::resnet: return 3;
            case KernelKind::deep_stack: return n_layers;
        }
        return 0;
    }

    void validate() const {
        if (width < 1 || in_dim < 1) {
            throw ConfigError("kernel config: width and in_dim must be >= 1");
        }
        if (kind == KernelKind::deep_stack && n_layers < 1) {
            throw ConfigError("kernel config: deep_stack needs n_layers >= 1");
        }
    }
};

// Ordered affine layers; layer 0 maps in_dim -> width, the rest width -> width.
struct KernelParams {
    std::vector<AffineParams> layers;

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.param_count();
        return n;
    }
};

// Exact scalar count including biases.
inline std::size_t kernel_param_count(const KernelConfig& cfg) {
    cfg.validate();
    const std::size_t first = cfg.in_dim * cfg.width + cfg.width;
    const std::size_t inner = cfg.width * cfg.width + cfg.width;
    return first + (cfg.layer_count() - 1) * inner;
}

inline KernelParams make_kernel_params(const KernelConfig& cfg) {
    cfg.validate();
    KernelParams p;
    p.layers.push_back(AffineParams::zeros(cfg.width, cfg.in_dim));
    for (std::size_t i = 1; i < cfg.layer_count(); ++i) {
        p.layers.push_back(AffineParams::zeros(cfg.width, cfg.width));
    }
    return p;
}

// Uniform [-r, r] with r = gain * sqrt(6 / (fan_in + fan_out)), biases
// zero. Layers feeding a sigmoid use gain 4 (compensates sigmoid's 1/4
// derivative); linear outputs use gain 1.
inline void init_affine(AffineParams& p, std::mt19937_64& rng, double gain = 4.0) {
    const double r = gain * std::sqrt(6.0 / double(p.in_dim() + p.out_dim()));
    std::uniform_real_distribution<double> dist(-r, r);
    for (std::size_t i = 0; i < p.W.numel(); ++i) p.W[i] = dist(rng);
    p.b.fill(0.0);
}

inline void init_kernel_params(const KernelConfig& cfg, KernelParams& p,
                               std::mt19937_64& rng) {
    for (std::size_t li = 0; li < p.layers.size(); ++li) {
        const bool linear_out = cfg.kind == KernelKind::resnet && li + 1 == p.layers.size();
        init_affine(p.layers[li], rng, linear_out ? 1.0 : 4.0);
    }
}

// Forward cache: the input plus every layer's sigmoid output (for resnet,
// h1 and h2; the final linear output needs no activation record).
struct KernelCache {
    Tensor input;
    std::vector<Tensor> activations;
};

inline void check_kernel_shapes(const KernelConfig& cfg, const KernelParams& p) {
    if (p.layers.size() != cfg.layer_count()) {
        throw DimensionError("kernel params: " + std::to_string(p.layers.size()) +
                             " layers, config expects " + std::to_string(cfg.layer_count()));
    }
    if (p.layers[0].in_dim() != cfg.in_dim || p.layers[0].out_dim() != cfg.width) {
        throw DimensionError("kernel layer 0: W " + p.layers[0].W.shape_str() +
                             " vs config in_dim=" + std::to_string(cfg.in_dim) +
                             " width=" + std::to_string(cfg.width));
    }
    for (std::size_t i = 1; i < p.layers.size(); ++i) {
        if (p.layers[i].in_dim() != cfg.width || p.layers[i].out_dim() != cfg.width) {
            throw DimensionError("kernel layer " + std::to_string(i) + ": W " +
                                 p.layers[i].W.shape_str() + " vs width " +
                                 std::to_string(cfg.width));
        }
    }
}

inline Tensor kernel_forward(const KernelConfig& cfg, const KernelParams& p, const Tensor& x,
                             KernelCache& cache) {
    check_kernel_shapes(cfg, p);
    if (x.ndim() != 2 || x.size(1) != cfg.in_dim) {
        throw DimensionError("kernel_forward: input " + x.shape_str() + " vs in_dim " +
                             std::to_string(cfg.in_dim));
    }
    cache.input = x;
    cache.activations.clear();

    if (cfg.kind == KernelKind::resnet) {
        Tensor h1 = affine_forward(x, p.layers[0]);
        sigmoid_inplace(h1);
        Tensor h2 = affine_forward(h1, p.layers[1]);
        sigmoid_inplace(h2);
        Tensor y = affine_forward(h2, p.layers[2]);  // linear last layer
        accumulate(y, h1);                           // residual connection
        cache.activations.push_back(h1);
        cache.activations.push_back(h2);
        return y;
    }

    // standard / double / deep_stack: chained sigmoid-affine layers
    Tensor h = x;
    for (const auto& layer : p.layers) {
        h = affine_forward(h, layer);
        sigmoid_inplace(h);
        cache.activations.push_back(h);
    }
    return h;
}

struct KernelGrads {
    std::vector<AffineGrads> layers;
    Tensor x;  // grad w.r.t. the kernel input
};

inline std::size_t expected_cache_activations(const KernelConfig& cfg) {
    return cfg.kind == KernelKind::resnet ? 2 : cfg.layer_count();
}

inline KernelGrads kernel_backward(const KernelConfig& cfg, const KernelParams& p,
                                   const KernelCache& cache, const Tensor& grad_y) {
    check_kernel_shapes(cfg, p);
    if (cache.input.ndim() != 2 || cache.input.size(1) != cfg.in_dim ||
        cache.activations.size() != expected_cache_activations(cfg)) {
        throw UsageError("kernel_backward: cache does not match this kernel's forward");
    }
    const std::size_t batch = cache.input.size(0);
    if (grad_y.ndim() != 2 || grad_y.size(0) != batch || grad_y.size(1) != cfg.width) {
        throw DimensionError("kernel_backward: grad_y " + grad_y.shape_str() +
                             " vs expected [" + std::to_string(batch) + "x" +
                             std::to_string(cfg.width) + "]");
    }

    KernelGrads g;
    g.layers.resize(p.layers.size());

    if (cfg.kind == KernelKind::resnet) {
        const Tensor& h1 = cache.activations[0];
        const Tensor& h2 = cache.activations[1];
        // y = A3 h2 + h1: gradient reaches h1 both through the layers and
        // directly through the identity path.
        AffineGrads g3 = affine_backward(h2, p.layers[2], grad_y);
        Tensor gh2 = sigmoid_backward(h2, g3.x);
        AffineGrads g2 = affine_backward(h1, p.layers[1], gh2);
        Tensor gh1 = g2.x;
        accumulate(gh1, grad_y);  // identity path
        Tensor gz1 = sigmoid_backward(h1, gh1);
        AffineGrads g1 = affine_backward(cache.input, p.layers[0], gz1);
        g.x = g1.x;
        g.layers[0] = std::move(g1);
        g.layers[1] = std::move(g2);
        g.layers[2] = std::move(g3);
        return g;
    }

    Tensor grad = grad_y;
    for (std::size_t li = p.layers.size(); li-- > 0;) {
        const Tensor& y = cache.activations[li];
        Tensor gz = sigmoid_backward(y, grad);
        const Tensor& input = li == 0 ? cache.input : cache.activations[li - 1];
        AffineGrads gl = affine_backward(input, p.layers[li], gz);
        grad = gl.x;
        g.layers[li] = std::move(gl);
    }
    g.x = grad;
    return g;
}

}  // namespace tdnnforge
