#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "tdnnforge/error.hpp"
#include "tdnnforge/frontends.hpp"
#include "tdnnforge/kernels.hpp"
#include "tdnnforge/numerics.hpp"
#include "tdnnforge/tensor.hpp"

// The sub-sampled TDNN graph: kernel 1 replicated over the time-bins of the
// input window, a binary-tree combination through the remaining kernels, and
// an affine output layer producing logits. Kernel parameters are shared
// across instantiations; during backward the shared gradients are
// accumulated over all instantiations and then normalised (mean).

namespace tdnnforge {

struct TdnnWindow {
    int left = -13;   // first frame offset relative to the centre frame
    int right = 9;    // last frame offset (inclusive)
    std::size_t context = 5;  // frames per first-layer instantiation
    std::size_t shift = 3;    // shift between instantiations

    std::size_t length() const { return std::size_t(right - left + 1); }
};

struct FrontendConfig {
    FrontendKind kind = FrontendKind::none;
    BandedConvConfig banded;  // used when kind == banded_cnn
    GridRnnConfig grid;       // used by the recurrent family
};

// Per-time-bin dimensionality delivered to kernel 1.
inline std::size_t frontend_output_dim(const FrontendConfig& f, std::size_t context,
                                       std::size_t feat_dim) {
    switch (f.kind) {
        case FrontendKind::none: return context * feat_dim;
        case FrontendKind::banded_cnn: return f.banded.output_dim(context);
        case FrontendKind::grid_rnn:
        case FrontendKind::fd_grid_rnn:
        case FrontendKind::tf_rnn: return f.grid.n_freq_bins * f.grid.sigma_width;
        case FrontendKind::bd_fd_grid_rnn:
        case FrontendKind::coupled_grid:
            return 2 * f.grid.n_freq_bins * f.grid.sigma_width;
    }
    return 0;
}

inline std::size_t frontend_param_count(const FrontendConfig& f, std::size_t context,
                                        std::size_t feat_dim) {
    (void)feat_dim;
    const GridRnnConfig& g = f.grid;
    const std::size_t in = g.cell_input_dim(), s = g.sigma_width, lw = g.linear_width;
    switch (f.kind) {
        case FrontendKind::none: return 0;
        case FrontendKind::banded_cnn: return f.banded.param_count();
        case FrontendKind::grid_rnn:
        case FrontendKind::fd_grid_rnn:
        case FrontendKind::bd_fd_grid_rnn: {
            const std::size_t per_dir =
                g.stored_bins() * (s * in + s * lw + s) + lw * s + lw * lw + lw;
            return (f.kind == FrontendKind::bd_fd_grid_rnn ? 2 : 1) * per_dir;
        }
        case FrontendKind::tf_rnn: return s * in + 2 * s * s + s;
        case FrontendKind::coupled_grid: return 2 * (s * in) + 2 * s * s + 2 * s;
    }
    (void)context;
    return 0;
}

using TreePairing = std::vector<std::vector<std::pair<std::size_t, std::size_t>>>;

// Default tree over 7 bins: 7 -> 4 -> 2 -> 1, reusing bin 6 (0-based 5) so
// every node stays binary and every bin is consumed.
inline TreePairing default_tree_pairing() {
    return {{{0, 1}, {2, 3}, {4, 5}, {5, 6}}, {{0, 1}, {2, 3}}, {{0, 1}}};
}

struct TdnnSpec {
    TdnnWindow window;
    std::size_t n_time_bins = 7;
    TreePairing tree_pairing = default_tree_pairing();
    std::vector<KernelConfig> kernels;  // kernels[0] per time bin, rest per tree layer
    FrontendConfig frontend;
    std::size_t feat_dim = 40;
    std::size_t out_dim = 1;

    // First-layer instantiation start offsets, relative to the centre frame.
    std::vector<int> time_bin_offsets() const {
        std::vector<int> offs;
        for (int o = window.left; o + int(window.context) - 1 <= window.right;
             o += int(window.shift)) {
            offs.push_back(o);
        }
        return offs;
    }

    // Same offsets as 0-based row indices into the materialized window.
    std::vector<std::size_t> time_bin_start_rows() const {
        std::vector<std::size_t> rows;
        for (int o : time_bin_offsets()) rows.push_back(std::size_t(o - window.left));
        return rows;
    }
};

// Validates the spec, reporting the first violated constraint.
inline void validate_tdnn_spec(const TdnnSpec& spec) {
    if (spec.window.right <= spec.window.left) {
        throw ConfigError("tdnn spec: window right must exceed left");
    }
    if (spec.window.context < 1 || spec.window.shift < 1) {
        throw ConfigError("tdnn spec: context and shift must be >= 1");
    }
    if (spec.feat_dim < 1 || spec.out_dim < 1) {
        throw ConfigError("tdnn spec: feat_dim and out_dim must be >= 1");
    }
    const auto offsets = spec.time_bin_offsets();
    if (offsets.size() != spec.n_time_bins) {
        throw ConfigError("tdnn spec: window geometry yields " +
                          std::to_string(offsets.size()) + " time bins, spec says " +
                          std::to_string(spec.n_time_bins));
    }
    if (offsets.empty() || offsets.back() + int(spec.window.context) - 1 != spec.window.right) {
        throw ConfigError("tdnn spec: instantiations do not end at the window's right edge");
    }
    if (spec.kernels.size() != spec.tree_pairing.size() + 1) {
        throw ConfigError("tdnn spec: " + std::to_string(spec.kernels.size()) +
                          " kernels for " + std::to_string(spec.tree_pairing.size()) +
                          " tree layers (need tree layers + 1)");
    }
    for (const auto& k : spec.kernels) k.validate();

    // frontend geometry and kernel-1 input dim
    switch (spec.frontend.kind) {
        case FrontendKind::banded_cnn:
            spec.frontend.banded.validate(spec.window.context, spec.feat_dim);
            break;
        case FrontendKind::none: break;
        default: {
            spec.frontend.grid.validate(spec.feat_dim);
            if (spec.frontend.grid.n_time_bins != spec.n_time_bins) {
                throw ConfigError("tdnn spec: grid n_time_bins " +
                                  std::to_string(spec.frontend.grid.n_time_bins) +
                                  " != tdnn n_time_bins " + std::to_string(spec.n_time_bins));
            }
            if (spec.frontend.grid.context != spec.window.context) {
                throw ConfigError("tdnn spec: grid context differs from window context");
            }
            const bool fd = spec.frontend.kind == FrontendKind::fd_grid_rnn ||
                            spec.frontend.kind == FrontendKind::bd_fd_grid_rnn;
            if (spec.frontend.grid.frequency_dependent != fd) {
                throw ConfigError("tdnn spec: grid frequency_dependent flag does not match "
                                  "frontend kind");
            }
            const bool bd = spec.frontend.kind == FrontendKind::bd_fd_grid_rnn;
            if (spec.frontend.grid.bidirectional != bd) {
                throw ConfigError(
                    "tdnn spec: grid bidirectional flag does not match frontend kind");
            }
            break;
        }
    }
    const std::size_t d1 = frontend_output_dim(spec.frontend, spec.window.context, spec.feat_dim);
    if (spec.kernels[0].in_dim != d1) {
        throw ConfigError("tdnn spec: kernel 1 in_dim " +
                          std::to_string(spec.kernels[0].in_dim) + " != frontend output dim " +
                          std::to_string(d1));
    }

    // tree shape: sizes must shrink to a single node, every node consumed
    std::size_t level_size = spec.n_time_bins;
    for (std::size_t L = 0; L < spec.tree_pairing.size(); ++L) {
        const auto& pairs = spec.tree_pairing[L];
        if (pairs.empty()) throw ConfigError("tdnn spec: empty tree layer");
        std::vector<bool> used(level_size, false);
        for (const auto& [a, b] : pairs) {
            if (a >= level_size || b >= level_size) {
                throw ConfigError("tdnn spec: tree layer " + std::to_string(L + 1) +
                                  " references node " + std::to_string(std::max(a, b)) +
                                  " of " + std::to_string(level_size));
            }
            used[a] = used[b] = true;
        }
        for (std::size_t n = 0; n < level_size; ++n) {
            if (!used[n]) {
                throw ConfigError("tdnn spec: tree layer " + std::to_string(L + 1) +
                                  " leaves node " + std::to_string(n) + " unconsumed");
            }
        }
        if (spec.kernels[L + 1].in_dim != 2 * spec.kernels[L].width) {
            throw ConfigError("tdnn spec: kernel " + std::to_string(L + 2) + " in_dim " +
                              std::to_string(spec.kernels[L + 1].in_dim) + " != 2 * " +
                              std::to_string(spec.kernels[L].width));
        }
        level_size = pairs.size();
    }
    if (level_size != 1) {
        throw ConfigError("tdnn spec: tree must reduce to a single node, got " +
                          std::to_string(level_size));
    }
}

// ---- parameters ----

using FrontendParams =
    std::variant<std::monostate, BandedConvParams, GridRnnParams, TfRnnParams,
                 CoupledGridParams>;

struct TdnnParams {
    std::vector<KernelParams> kernels;  // one per kernel location (shared weights)
    AffineParams output;
    FrontendParams frontend;
};

struct TdnnModel {
    TdnnSpec spec;
    TdnnParams params;
};

inline FrontendParams make_frontend_params(const FrontendConfig& f) {
    switch (f.kind) {
        case FrontendKind::none: return std::monostate{};
        case FrontendKind::banded_cnn: return make_banded_conv_params(f.banded);
        case FrontendKind::grid_rnn:
        case FrontendKind::fd_grid_rnn:
        case FrontendKind::bd_fd_grid_rnn: return make_grid_rnn_params(f.grid);
        case FrontendKind::tf_rnn: return make_tf_rnn_params(f.grid);
        case FrontendKind::coupled_grid: return make_coupled_grid_params(f.grid);
    }
    return std::monostate{};
}

// Zero-initialized parameter set matching the spec (also the gradient
// container: gradients have exactly the parameter shapes).
inline TdnnParams make_tdnn_params(const TdnnSpec& spec) {
    TdnnParams p;
    for (const auto& k : spec.kernels) p.kernels.push_back(make_kernel_params(k));
    const std::size_t last_w = spec.kernels.back().width;
    p.output = AffineParams::zeros(spec.out_dim, last_w);
    p.frontend = make_frontend_params(spec.frontend);
    return p;
}

// ---- parameter registry ----

struct BlockMeta {
    bool is_bias = false;          // biases are excluded from L2
    std::size_t instantiations = 1;  // shared-gradient normalisation divisor
    std::size_t fan_in = 1, fan_out = 1;  // for initialization
    // init gain: 4 for matrices feeding a sigmoid (compensates the 1/4
    // derivative so per-layer signal variance survives the stack), 1 for
    // linear outputs
    double init_gain = 4.0;
};

// Walks every parameter block in a fixed order (frontend, kernels, output).
// This order defines initialization, serialization and reporting.
template <typename Fn>
inline void for_each_param_block(const TdnnSpec& spec, TdnnParams& params, Fn&& fn) {
    const auto grid_dir = [&](GridRnnDirectionParams& d, const std::string& prefix) {
        const GridRnnConfig& g = spec.frontend.grid;
        for (std::size_t k = 0; k < d.W_f.size(); ++k) {
            const std::string bin =
                d.W_f.size() > 1 ? ".bin" + std::to_string(k + 1) : ".shared";
            fn(prefix + bin + ".W_f", d.W_f[k],
               BlockMeta{false, 1, g.cell_input_dim(), g.sigma_width});
            fn(prefix + bin + ".V_f", d.V_f[k],
               BlockMeta{false, 1, g.linear_width, g.sigma_width});
            fn(prefix + bin + ".b_f", d.b_f[k], BlockMeta{true, 1, 1, 1});
        }
        fn(prefix + ".Vi_F", d.Vi_F,
           BlockMeta{false, 1, g.sigma_width, g.linear_width, 1.0});
        fn(prefix + ".Vi_I", d.Vi_I,
           BlockMeta{false, 1, g.linear_width, g.linear_width, 1.0});
        fn(prefix + ".b_i", d.b_i, BlockMeta{true, 1, 1, 1});
    };

    if (auto* banded = std::get_if<BandedConvParams>(&params.frontend)) {
        const auto& c = spec.frontend.banded;
        const std::size_t rf = c.filter_time * c.filter_freq;
        fn("frontend.filters", banded->filters, BlockMeta{false, 1, rf, rf});
        fn("frontend.biases", banded->biases, BlockMeta{true, 1, 1, 1});
    } else if (auto* grid = std::get_if<GridRnnParams>(&params.frontend)) {
        grid_dir(grid->fwd, "frontend.fwd");
        if (grid->bwd) grid_dir(*grid->bwd, "frontend.bwd");
    } else if (auto* tf = std::get_if<TfRnnParams>(&params.frontend)) {
        const GridRnnConfig& g = spec.frontend.grid;
        fn("frontend.W", tf->W, BlockMeta{false, 1, g.cell_input_dim(), g.sigma_width});
        fn("frontend.V_T", tf->V_T, BlockMeta{false, 1, g.sigma_width, g.sigma_width});
        fn("frontend.V_F", tf->V_F, BlockMeta{false, 1, g.sigma_width, g.sigma_width});
        fn("frontend.b", tf->b, BlockMeta{true, 1, 1, 1});
    } else if (auto* cp = std::get_if<CoupledGridParams>(&params.frontend)) {
        const GridRnnConfig& g = spec.frontend.grid;
        fn("frontend.W_T", cp->W_T, BlockMeta{false, 1, g.cell_input_dim(), g.sigma_width});
        fn("frontend.W_F", cp->W_F, BlockMeta{false, 1, g.cell_input_dim(), g.sigma_width});
        fn("frontend.V_T", cp->V_T, BlockMeta{false, 1, g.sigma_width, g.sigma_width});
        fn("frontend.V_F", cp->V_F, BlockMeta{false, 1, g.sigma_width, g.sigma_width});
        fn("frontend.b_T", cp->b_T, BlockMeta{true, 1, 1, 1});
        fn("frontend.b_F", cp->b_F, BlockMeta{true, 1, 1, 1});
    }

    for (std::size_t ki = 0; ki < params.kernels.size(); ++ki) {
        const std::size_t inst = ki == 0 ? spec.n_time_bins : spec.tree_pairing[ki - 1].size();
        auto& layers = params.kernels[ki].layers;
        const bool resnet = spec.kernels[ki].kind == KernelKind::resnet;
        for (std::size_t li = 0; li < layers.size(); ++li) {
            const std::string base =
                "kernel" + std::to_string(ki + 1) + ".layer" + std::to_string(li + 1);
            const bool linear_out = resnet && li + 1 == layers.size();
            fn(base + ".W", layers[li].W,
               BlockMeta{false, inst, layers[li].in_dim(), layers[li].out_dim(),
                         linear_out ? 1.0 : 4.0});
            fn(base + ".b", layers[li].b, BlockMeta{true, inst, 1, 1});
        }
    }

    fn("output.W", params.output.W,
       BlockMeta{false, 1, params.output.in_dim(), params.output.out_dim(), 1.0});
    fn("output.b", params.output.b, BlockMeta{true, 1, 1, 1});
}

template <typename Fn>
inline void for_each_param_block(const TdnnModel& m, Fn&& fn) {
    // registry access is shape-driven and read-only for const models
    for_each_param_block(m.spec, const_cast<TdnnParams&>(m.params), std::forward<Fn>(fn));
}

// Walks parameter and gradient blocks in lockstep (identical structure).
template <typename Fn>
inline void for_each_param_grad_pair(const TdnnSpec& spec, TdnnParams& params,
                                     TdnnParams& grads, Fn&& fn) {
    std::vector<Tensor*> gt;
    for_each_param_block(spec, grads, [&](const std::string&, Tensor& t, const BlockMeta&) {
        gt.push_back(&t);
    });
    std::size_t i = 0;
    for_each_param_block(spec, params,
                         [&](const std::string& name, Tensor& t, const BlockMeta& meta) {
                             fn(name, t, *gt[i++], meta);
                         });
}

inline std::size_t param_count(const TdnnModel& m) {
    std::size_t n = 0;
    for_each_param_block(m, [&](const std::string&, const Tensor& t, const BlockMeta&) {
        n += t.numel();
    });
    return n;
}

// Closed-form count from the spec alone.
inline std::size_t tdnn_param_count(const TdnnSpec& spec) {
    std::size_t n = frontend_param_count(spec.frontend, spec.window.context, spec.feat_dim);
    for (const auto& k : spec.kernels) n += kernel_param_count(k);
    n += spec.kernels.back().width * spec.out_dim + spec.out_dim;
    return n;
}

// Network depth including the output layer: the sum of kernel layer counts
// plus one.
inline std::size_t layer_depth(const TdnnSpec& spec) {
    std::size_t d = 1;
    for (const auto& k : spec.kernels) d += k.layer_count();
    return d;
}

// Deterministic initialization: uniform [-r, r] with
// r = gain * sqrt(6 / (fan_in + fan_out)) for weights, zero biases, drawn
// in registry order from a seeded generator. The gain is 4 on matrices
// feeding a sigmoid and 1 on linear outputs.
inline TdnnModel build_tdnn(const TdnnSpec& spec, std::uint64_t seed) {
    validate_tdnn_spec(spec);
    TdnnModel m{spec, make_tdnn_params(spec)};
    std::mt19937_64 rng(seed);
    for_each_param_block(m.spec, m.params,
                         [&](const std::string&, Tensor& t, const BlockMeta& meta) {
                             if (meta.is_bias) {
                                 t.fill(0.0);
                                 return;
                             }
                             const double r = meta.init_gain *
                                 std::sqrt(6.0 / double(meta.fan_in + meta.fan_out));
                             std::uniform_real_distribution<double> dist(-r, r);
                             for (std::size_t i = 0; i < t.numel(); ++i) t[i] = dist(rng);
                         });
    return m;
}

// ---- forward ----

struct TdnnCache {
    std::size_t batch = 0;
    // frontend caches, per example
    std::vector<std::vector<BandedConvCache>> banded;  // [B][time_bin]
    std::vector<GridRnnCache> grid;                    // [B]
    std::vector<BdGridRnnCache> bd_grid;               // [B]
    std::vector<TfRnnCache> tf;                        // [B]
    std::vector<CoupledGridCache> coupled;             // [B]
    // graph caches
    std::vector<KernelCache> kernel1;               // per time bin
    std::vector<std::vector<KernelCache>> tree;     // [layer][node]
    Tensor final_hidden;                            // input to the output layer
};

inline Tensor example_window(const Tensor& x, std::size_t b) {
    const std::size_t rows = x.size(1), cols = x.size(2);
    Tensor w({rows, cols});
    std::copy(&x(b, 0, 0), &x(b, 0, 0) + rows * cols, w.data());
    return w;
}

// x: [B, window_length, feat_dim]; returns logits [B, out_dim] (no softmax,
// losses consume logits).
inline Tensor tdnn_forward(const TdnnModel& m, const Tensor& x, TdnnCache& cache) {
    const TdnnSpec& spec = m.spec;
    if (x.ndim() != 3 || x.size(1) != spec.window.length() || x.size(2) != spec.feat_dim) {
        throw DimensionError("tdnn_forward: input " + x.shape_str() + " vs expected [Bx" +
                             std::to_string(spec.window.length()) + "x" +
                             std::to_string(spec.feat_dim) + "]");
    }
    const std::size_t B = x.size(0);
    const std::size_t T = spec.n_time_bins;
    const auto rows = spec.time_bin_start_rows();
    const std::size_t d1 = frontend_output_dim(spec.frontend, spec.window.context, spec.feat_dim);

    cache = TdnnCache{};
    cache.batch = B;

    // per-time-bin inputs to kernel 1
    std::vector<Tensor> bins(T, Tensor({B, d1}));
    switch (spec.frontend.kind) {
        case FrontendKind::none: {
            for (std::size_t t = 0; t < T; ++t) {
                for (std::size_t b = 0; b < B; ++b) {
                    double* dst = bins[t].row(b);
                    for (std::size_t c = 0; c < spec.window.context; ++c) {
                        const double* src = &x(b, rows[t] + c, 0);
                        std::copy(src, src + spec.feat_dim, dst + c * spec.feat_dim);
                    }
                }
            }
            break;
        }
        case FrontendKind::banded_cnn: {
            cache.banded.resize(B);
            for (std::size_t b = 0; b < B; ++b) {
                cache.banded[b].resize(T);
                for (std::size_t t = 0; t < T; ++t) {
                    Tensor slice({spec.window.context, spec.feat_dim});
                    std::copy(&x(b, rows[t], 0),
                              &x(b, rows[t], 0) + spec.window.context * spec.feat_dim,
                              slice.data());
                    const auto& p = std::get<BandedConvParams>(m.params.frontend);
                    std::vector<double> out =
                        banded_conv_forward(slice, spec.frontend.banded, p, cache.banded[b][t]);
                    std::copy(out.begin(), out.end(), bins[t].row(b));
                }
            }
            break;
        }
        default: {
            // recurrent family: one grid per example covering all time bins
            for (std::size_t b = 0; b < B; ++b) {
                Tensor window = example_window(x, b);
                Tensor x_grid = build_grid_input(window, rows, spec.frontend.grid);
                Tensor out;  // [T, d1]
                switch (spec.frontend.kind) {
                    case FrontendKind::grid_rnn:
                    case FrontendKind::fd_grid_rnn: {
                        cache.grid.resize(B);
                        const auto& p = std::get<GridRnnParams>(m.params.frontend);
                        out = grid_rnn_forward(spec.frontend.grid, p.fwd, x_grid,
                                               cache.grid[b]);
                        break;
                    }
                    case FrontendKind::bd_fd_grid_rnn: {
                        cache.bd_grid.resize(B);
                        const auto& p = std::get<GridRnnParams>(m.params.frontend);
                        out = bd_grid_rnn_forward(spec.frontend.grid, p, x_grid,
                                                  cache.bd_grid[b]);
                        break;
                    }
                    case FrontendKind::tf_rnn: {
                        cache.tf.resize(B);
                        const auto& p = std::get<TfRnnParams>(m.params.frontend);
                        out = tf_rnn_forward(spec.frontend.grid, p, x_grid, cache.tf[b]);
                        break;
                    }
                    case FrontendKind::coupled_grid: {
                        cache.coupled.resize(B);
                        const auto& p = std::get<CoupledGridParams>(m.params.frontend);
                        out = coupled_grid_forward(spec.frontend.grid, p, x_grid,
                                                   cache.coupled[b]);
                        break;
                    }
                    default: break;
                }
                for (std::size_t t = 0; t < T; ++t) {
                    std::copy(out.row(t), out.row(t) + d1, bins[t].row(b));
                }
            }
            break;
        }
    }

    // kernel 1 at every time bin (shared parameters)
    cache.kernel1.resize(T);
    std::vector<Tensor> level;
    level.reserve(T);
    for (std::size_t t = 0; t < T; ++t) {
        level.push_back(
            kernel_forward(spec.kernels[0], m.params.kernels[0], bins[t], cache.kernel1[t]));
    }

    // binary-tree combination: concatenate each pair and apply the layer's kernel
    cache.tree.resize(spec.tree_pairing.size());
    for (std::size_t L = 0; L < spec.tree_pairing.size(); ++L) {
        const auto& pairs = spec.tree_pairing[L];
        cache.tree[L].resize(pairs.size());
        std::vector<Tensor> next;
        next.reserve(pairs.size());
        for (std::size_t n = 0; n < pairs.size(); ++n) {
            Tensor z = concat_cols(level[pairs[n].first], level[pairs[n].second]);
            next.push_back(kernel_forward(spec.kernels[L + 1], m.params.kernels[L + 1], z,
                                          cache.tree[L][n]));
        }
        level = std::move(next);
    }

    cache.final_hidden = level[0];
    return affine_forward(cache.final_hidden, m.params.output);
}

// ---- backward ----

struct ModelGrads {
    TdnnParams g;  // gradient tensors, parameter-shaped
    // Normalisation divisor applied to each block's accumulated gradient;
    // the finite-difference oracle multiplies it back.
    std::vector<std::size_t> instantiations_by_block;
};

// Optional instrumentation: kernel-1 gradients per time bin before
// normalisation.
struct PerInstantiationGrads {
    std::vector<KernelParams> kernel1;  // [n_time_bins]
};

inline ModelGrads tdnn_backward(const TdnnModel& m, const TdnnCache& cache,
                                const Tensor& grad_logits,
                                PerInstantiationGrads* instrumentation = nullptr) {
    const TdnnSpec& spec = m.spec;
    const std::size_t B = cache.batch;
    if (B == 0 || cache.kernel1.size() != spec.n_time_bins ||
        cache.tree.size() != spec.tree_pairing.size()) {
        throw UsageError("tdnn_backward: cache does not match a completed forward");
    }
    if (grad_logits.ndim() != 2 || grad_logits.size(0) != B ||
        grad_logits.size(1) != spec.out_dim) {
        throw DimensionError("tdnn_backward: grad_logits " + grad_logits.shape_str());
    }

    ModelGrads grads{make_tdnn_params(spec), {}};
    for_each_param_block(spec, grads.g,
                         [&](const std::string&, Tensor&, const BlockMeta& meta) {
                             grads.instantiations_by_block.push_back(meta.instantiations);
                         });

    // output layer
    AffineGrads og = affine_backward(cache.final_hidden, m.params.output, grad_logits);
    grads.g.output.W = std::move(og.W);
    grads.g.output.b = std::move(og.b);

    const auto accumulate_kernel = [](KernelParams& acc, const KernelGrads& kg) {
        for (std::size_t li = 0; li < acc.layers.size(); ++li) {
            accumulate(acc.layers[li].W, kg.layers[li].W);
            accumulate(acc.layers[li].b, kg.layers[li].b);
        }
    };

    // tree, in reverse; node gradients fan back to both concatenated inputs
    std::vector<Tensor> level_grad{og.x};
    for (std::size_t L = spec.tree_pairing.size(); L-- > 0;) {
        const auto& pairs = spec.tree_pairing[L];
        const std::size_t prev_size = L == 0 ? spec.n_time_bins : spec.tree_pairing[L - 1].size();
        const std::size_t prev_w = spec.kernels[L].width;
        std::vector<Tensor> prev_grad(prev_size, Tensor({B, prev_w}));
        for (std::size_t n = 0; n < pairs.size(); ++n) {
            KernelGrads kg = kernel_backward(spec.kernels[L + 1], m.params.kernels[L + 1],
                                             cache.tree[L][n], level_grad[n]);
            accumulate_kernel(grads.g.kernels[L + 1], kg);
            // split the concat gradient into its two halves
            for (std::size_t b = 0; b < B; ++b) {
                const double* gz = kg.x.row(b);
                double* ga = prev_grad[pairs[n].first].row(b);
                double* gb = prev_grad[pairs[n].second].row(b);
                for (std::size_t j = 0; j < prev_w; ++j) {
                    ga[j] += gz[j];
                    gb[j] += gz[prev_w + j];
                }
            }
        }
        level_grad = std::move(prev_grad);
    }

    // kernel 1 at each time bin; keep per-bin input grads for the frontend
    if (instrumentation) instrumentation->kernel1.clear();
    std::vector<Tensor> bin_grad;
    bin_grad.reserve(spec.n_time_bins);
    for (std::size_t t = 0; t < spec.n_time_bins; ++t) {
        KernelGrads kg =
            kernel_backward(spec.kernels[0], m.params.kernels[0], cache.kernel1[t], level_grad[t]);
        accumulate_kernel(grads.g.kernels[0], kg);
        if (instrumentation) {
            KernelParams per_bin = make_kernel_params(spec.kernels[0]);
            for (std::size_t li = 0; li < per_bin.layers.size(); ++li) {
                per_bin.layers[li].W = kg.layers[li].W;
                per_bin.layers[li].b = kg.layers[li].b;
            }
            instrumentation->kernel1.push_back(std::move(per_bin));
        }
        bin_grad.push_back(std::move(kg.x));
    }

    // accumulated over all instantiations, then normalised (mean)
    for (std::size_t ki = 0; ki < grads.g.kernels.size(); ++ki) {
        const double inv =
            1.0 / double(ki == 0 ? spec.n_time_bins : spec.tree_pairing[ki - 1].size());
        for (auto& layer : grads.g.kernels[ki].layers) {
            scale(layer.W, inv);
            scale(layer.b, inv);
        }
    }

    // frontend: gradients accumulate (sum) over time bins and examples
    switch (spec.frontend.kind) {
        case FrontendKind::none: break;
        case FrontendKind::banded_cnn: {
            const auto& p = std::get<BandedConvParams>(m.params.frontend);
            auto& fg = std::get<BandedConvParams>(grads.g.frontend);
            std::vector<double> go(frontend_output_dim(spec.frontend, spec.window.context,
                                                       spec.feat_dim));
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t t = 0; t < spec.n_time_bins; ++t) {
                    const double* src = bin_grad[t].row(b);
                    std::copy(src, src + go.size(), go.begin());
                    banded_conv_backward(spec.frontend.banded, p, cache.banded[b][t], go, fg);
                }
            }
            break;
        }
        default: {
            const std::size_t d1 =
                frontend_output_dim(spec.frontend, spec.window.context, spec.feat_dim);
            Tensor go({spec.n_time_bins, d1});
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t t = 0; t < spec.n_time_bins; ++t) {
                    std::copy(bin_grad[t].row(b), bin_grad[t].row(b) + d1, go.row(t));
                }
                switch (spec.frontend.kind) {
                    case FrontendKind::grid_rnn:
                    case FrontendKind::fd_grid_rnn: {
                        const auto& p = std::get<GridRnnParams>(m.params.frontend);
                        auto& fg = std::get<GridRnnParams>(grads.g.frontend);
                        grid_rnn_backward(spec.frontend.grid, p.fwd, cache.grid[b], go,
                                          fg.fwd);
                        break;
                    }
                    case FrontendKind::bd_fd_grid_rnn: {
                        const auto& p = std::get<GridRnnParams>(m.params.frontend);
                        auto& fg = std::get<GridRnnParams>(grads.g.frontend);
                        bd_grid_rnn_backward(spec.frontend.grid, p, cache.bd_grid[b], go, fg);
                        break;
                    }
                    case FrontendKind::tf_rnn: {
                        const auto& p = std::get<TfRnnParams>(m.params.frontend);
                        auto& fg = std::get<TfRnnParams>(grads.g.frontend);
                        tf_rnn_backward(spec.frontend.grid, p, cache.tf[b], go, fg);
                        break;
                    }
                    case FrontendKind::coupled_grid: {
                        const auto& p = std::get<CoupledGridParams>(m.params.frontend);
                        auto& fg = std::get<CoupledGridParams>(grads.g.frontend);
                        coupled_grid_backward(spec.frontend.grid, p, cache.coupled[b], go, fg);
                        break;
                    }
                    default: break;
                }
            }
            break;
        }
    }

    return grads;
}

}  // namespace tdnnforge
