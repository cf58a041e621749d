#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "tdnnforge/error.hpp"
#include "tdnnforge/numerics.hpp"
#include "tdnnforge/tensor.hpp"

// Spectro-temporal front-ends that replace the raw per-time-bin frame stack
// feeding the first TDNN kernel:
//
//   banded_cnn      per-band frequency convolution + within-band max-pooling,
//                   band outputs concatenated
//   grid_rnn        two coupled vanilla RNNs unfolded over (time-bin,
//                   freq-bin): a sigmoid-RNN extracting features and a linear
//                   combination RNN carrying state between instantiations
//   fd_grid_rnn     grid_rnn with sigma-RNN parameters untied per freq bin
//   bd_fd_grid_rnn  two fd grids, the second with both axes reversed,
//                   outputs concatenated
//   tf_rnn          single recurrence fed by both time- and freq-adjacent
//                   states
//   coupled_grid    two sigmoid recurrences sharing their recurrent matrices
//
// All forwards are per example; batching is the caller's loop.

namespace tdnnforge {

enum class FrontendKind {
    none,
    banded_cnn,
    grid_rnn,
    fd_grid_rnn,
    bd_fd_grid_rnn,
    tf_rnn,
    coupled_grid
};

inline const char* frontend_kind_name(FrontendKind k) {
    switch (k) {
        case FrontendKind::none: return "none";
        case FrontendKind::banded_cnn: return "banded_cnn";
        case FrontendKind::grid_rnn: return "grid_rnn";
        case FrontendKind::fd_grid_rnn: return "fd_grid_rnn";
        case FrontendKind::bd_fd_grid_rnn: return "bd_fd_grid_rnn";
        case FrontendKind::tf_rnn: return "tf_rnn";
        case FrontendKind::coupled_grid: return "coupled_grid";
    }
    return "?";
}

// ---- small dense helpers (fixed accumulation order) ----

// out[o] = sum_j M[o][j] v[j]
inline void matvec_assign(const Tensor& M, const double* v, double* out) {
    const std::size_t rows = M.size(0), cols = M.size(1);
    for (std::size_t o = 0; o < rows; ++o) {
        const double* m = M.data() + o * cols;
        double acc = 0.0;
        for (std::size_t j = 0; j < cols; ++j) acc += m[j] * v[j];
        out[o] = acc;
    }
}

// out[o] += sum_j M[o][j] v[j]
inline void matvec_add(const Tensor& M, const double* v, double* out) {
    const std::size_t rows = M.size(0), cols = M.size(1);
    for (std::size_t o = 0; o < rows; ++o) {
        const double* m = M.data() + o * cols;
        double acc = 0.0;
        for (std::size_t j = 0; j < cols; ++j) acc += m[j] * v[j];
        out[o] += acc;
    }
}

// out[j] += sum_o M[o][j] v[o]   (transpose apply)
inline void matvec_transpose_add(const Tensor& M, const double* v, double* out) {
    const std::size_t rows = M.size(0), cols = M.size(1);
    for (std::size_t o = 0; o < rows; ++o) {
        const double* m = M.data() + o * cols;
        const double vo = v[o];
        for (std::size_t j = 0; j < cols; ++j) out[j] += vo * m[j];
    }
}

// G[o][j] += d[o] x[j]
inline void outer_add(Tensor& G, const double* d, const double* x) {
    const std::size_t rows = G.size(0), cols = G.size(1);
    for (std::size_t o = 0; o < rows; ++o) {
        double* g = G.data() + o * cols;
        const double doo = d[o];
        for (std::size_t j = 0; j < cols; ++j) g[j] += doo * x[j];
    }
}

inline void vec_add(const Tensor& b, double* out) {
    for (std::size_t i = 0; i < b.numel(); ++i) out[i] += b[i];
}

// accumulate raw vector into tensor (helper for the backward passes)
inline void vec_add_raw(Tensor& acc, const double* v) {
    for (std::size_t i = 0; i < acc.numel(); ++i) acc[i] += v[i];
}

// ---- frequency convolution ----

struct BandedConvConfig {
    std::size_t band_size = 10;   // M: frequency dims per band
    std::size_t band_shift = 5;   // S: shift between band starts
    std::size_t n_bands = 7;
    std::size_t filter_time = 5;  // T
    std::size_t filter_freq = 5;  // F
    std::size_t n_filters = 100;  // K, per band
    std::size_t pool_size = 2;    // non-overlapping max-pool along frequency

    std::size_t conv_len_time(std::size_t context) const {
        return context - filter_time + 1;
    }
    std::size_t conv_len_freq() const { return band_size - filter_freq + 1; }
    std::size_t pooled_len() const { return (conv_len_freq() - pool_size) / pool_size + 1; }

    // Per-time-bin output dimension: bands x filters x time rows x pooled values.
    std::size_t output_dim(std::size_t context) const {
        return n_bands * n_filters * conv_len_time(context) * pooled_len();
    }

    std::size_t weight_count() const {
        return n_bands * n_filters * filter_time * filter_freq;
    }
    std::size_t bias_count() const { return n_bands * n_filters; }
    std::size_t param_count() const { return weight_count() + bias_count(); }

    void validate(std::size_t context, std::size_t feat_dim) const {
        if (n_bands < 1 || n_filters < 1) {
            throw ConfigError("banded conv: n_bands and n_filters must be >= 1");
        }
        if (filter_time > context) {
            throw GeometryError("banded conv: filter_time " + std::to_string(filter_time) +
                                " exceeds context " + std::to_string(context));
        }
        if (filter_freq > band_size) {
            throw GeometryError("banded conv: filter_freq " + std::to_string(filter_freq) +
                                " exceeds band_size " + std::to_string(band_size));
        }
        if ((n_bands - 1) * band_shift + band_size != feat_dim) {
            throw GeometryError("banded conv: bands (" + std::to_string(n_bands) + " x size " +
                                std::to_string(band_size) + ", shift " +
                                std::to_string(band_shift) + ") do not tile feat_dim " +
                                std::to_string(feat_dim));
        }
        if (n_bands > 1 && (band_shift < 1 || band_shift > band_size)) {
            throw GeometryError("banded conv: band_shift " + std::to_string(band_shift) +
                                " must lie in [1, band_size] for covering bands");
        }
        const std::size_t cf = conv_len_freq();
        if (pool_size == 0 || cf < pool_size || (cf - pool_size) % pool_size != 0) {
            throw GeometryError("banded conv: pool size " + std::to_string(pool_size) +
                                " does not divide conv output length " + std::to_string(cf));
        }
    }
};

struct BandedConvParams {
    Tensor filters;  // [n_bands, K, T, F]
    Tensor biases;   // [n_bands, K]
};

inline BandedConvParams make_banded_conv_params(const BandedConvConfig& cfg) {
    BandedConvParams p;
    p.filters = Tensor({cfg.n_bands, cfg.n_filters, cfg.filter_time, cfg.filter_freq});
    p.biases = Tensor({cfg.n_bands, cfg.n_filters});
    return p;
}

// Valid correlation of one filter window anchored at (i0, j0).
inline double correlate_window(const Tensor& x, std::size_t i0, std::size_t j0,
                               const double* w, std::size_t t, std::size_t f) {
    const std::size_t cols = x.size(1);
    const double* base = x.data() + i0 * cols + j0;
    double acc = 0.0;
    for (std::size_t l = 0; l < t; ++l) {
        const double* xr = base + l * cols;
        const double* wr = w + l * f;
        for (std::size_t m = 0; m < f; ++m) acc += xr[m] * wr[m];
    }
    return acc;
}

// Full-weight-sharing convolution: x [L x M], filters [K x T x F], biases [K].
// Output: K maps of shape (L-T+1) x (M-F+1), sigmoid applied elementwise.
inline Tensor full_conv_forward(const Tensor& x, const Tensor& filters, const Tensor& biases) {
    if (x.ndim() != 2 || filters.ndim() != 3 || biases.ndim() != 1 ||
        filters.size(0) != biases.size(0)) {
        throw DimensionError("full_conv_forward: x " + x.shape_str() + ", filters " +
                             filters.shape_str() + ", biases " + biases.shape_str());
    }
    const std::size_t L = x.size(0), M = x.size(1);
    const std::size_t K = filters.size(0), T = filters.size(1), F = filters.size(2);
    if (T > L || F > M) {
        throw GeometryError("full_conv_forward: filter " + std::to_string(T) + "x" +
                            std::to_string(F) + " larger than input " + std::to_string(L) +
                            "x" + std::to_string(M));
    }
    const std::size_t lo = L - T + 1, mo = M - F + 1;
    Tensor out({K, lo, mo});
    for (std::size_t k = 0; k < K; ++k) {
        const double* w = filters.data() + k * T * F;
        for (std::size_t i = 0; i < lo; ++i) {
            for (std::size_t j = 0; j < mo; ++j) {
                out(k, i, j) = sigmoid_scalar(correlate_window(x, i, j, w, T, F) + biases[k]);
            }
        }
    }
    return out;
}

struct BandedConvCache {
    Tensor input;                     // [context x feat_dim]
    Tensor activations;               // sigmoid outputs [n_bands, K, out_t, out_f]
    std::vector<std::size_t> argmax;  // per pooled value, index along the out_f axis
};

// Per-band convolution restricted to columns [f*S, f*S + M), sigmoid,
// max-pool along frequency, outputs concatenated band-major:
//   index = ((band * K + filter) * out_t + time_row) * pooled + pooled_pos
inline std::vector<double> banded_conv_forward(const Tensor& x, const BandedConvConfig& cfg,
                                               const BandedConvParams& p,
                                               BandedConvCache& cache) {
    if (x.ndim() != 2) throw DimensionError("banded_conv_forward: input " + x.shape_str());
    cfg.validate(x.size(0), x.size(1));
    const std::size_t K = cfg.n_filters, T = cfg.filter_time, F = cfg.filter_freq;
    const std::size_t out_t = cfg.conv_len_time(x.size(0));
    const std::size_t out_f = cfg.conv_len_freq();
    const std::size_t pooled = cfg.pooled_len();

    cache.input = x;
    cache.activations = Tensor({cfg.n_bands, K, out_t, out_f});
    cache.argmax.assign(cfg.n_bands * K * out_t * pooled, 0);

    std::vector<double> out(cfg.output_dim(x.size(0)));
    std::size_t oi = 0;
    for (std::size_t b = 0; b < cfg.n_bands; ++b) {
        const std::size_t col0 = b * cfg.band_shift;
        for (std::size_t k = 0; k < K; ++k) {
            const double* w = p.filters.data() + (b * K + k) * T * F;
            const double bias = p.biases(b, k);
            for (std::size_t i = 0; i < out_t; ++i) {
                double* act = &cache.activations(b, k, i, 0);
                for (std::size_t j = 0; j < out_f; ++j) {
                    act[j] = sigmoid_scalar(correlate_window(x, i, col0 + j, w, T, F) + bias);
                }
                MaxPool1dResult pr = max_pool_1d(act, out_f, cfg.pool_size, cfg.pool_size);
                for (std::size_t q = 0; q < pooled; ++q) {
                    cache.argmax[oi] = pr.argmax[q];
                    out[oi++] = pr.pooled[q];
                }
            }
        }
    }
    return out;
}

// Accumulates filter/bias gradients into a zero-initialized params-shaped
// container; input gradients are not needed (this is the first layer of the
// model).
inline void banded_conv_backward(const BandedConvConfig& cfg, const BandedConvParams& p,
                                 const BandedConvCache& cache,
                                 const std::vector<double>& grad_out, BandedConvParams& g) {
    (void)p;
    const Tensor& x = cache.input;
    const std::size_t K = cfg.n_filters, T = cfg.filter_time, F = cfg.filter_freq;
    const std::size_t out_t = cfg.conv_len_time(x.size(0));
    const std::size_t out_f = cfg.conv_len_freq();
    const std::size_t pooled = cfg.pooled_len();
    if (grad_out.size() != cfg.output_dim(x.size(0)) ||
        cache.argmax.size() != cfg.n_bands * K * out_t * pooled) {
        throw UsageError("banded_conv_backward: cache/grad do not match this forward");
    }
    const std::size_t cols = x.size(1);

    std::size_t oi = 0;
    for (std::size_t b = 0; b < cfg.n_bands; ++b) {
        const std::size_t col0 = b * cfg.band_shift;
        for (std::size_t k = 0; k < K; ++k) {
            double* gw = g.filters.data() + (b * K + k) * T * F;
            for (std::size_t i = 0; i < out_t; ++i) {
                const double* act = &cache.activations(b, k, i, 0);
                for (std::size_t q = 0; q < pooled; ++q, ++oi) {
                    const double go = grad_out[oi];
                    if (go == 0.0) continue;
                    const std::size_t j = cache.argmax[oi];  // winning conv cell
                    const double a = act[j];
                    const double gz = go * a * (1.0 - a);
                    const double* base = x.data() + i * cols + col0 + j;
                    for (std::size_t l = 0; l < T; ++l) {
                        const double* xr = base + l * cols;
                        double* gwr = gw + l * F;
                        for (std::size_t m = 0; m < F; ++m) gwr[m] += gz * xr[m];
                    }
                    g.biases(b, k) += gz;
                }
            }
        }
    }
}

// ---- Grid-RNN family ----

struct GridRnnConfig {
    std::size_t n_time_bins = 7;
    std::size_t n_freq_bins = 5;
    std::size_t freq_bin_size = 10;
    std::vector<std::size_t> freq_bin_starts = {0, 8, 15, 23, 30};
    std::size_t sigma_width = 250;   // feature-extracting sigmoid RNN
    std::size_t linear_width = 500;  // linear combination RNN
    bool frequency_dependent = false;
    bool bidirectional = false;
    std::size_t context = 5;  // frames per time bin

    std::size_t cell_input_dim() const { return context * freq_bin_size; }
    std::size_t stored_bins() const { return frequency_dependent ? n_freq_bins : 1; }

    void validate(std::size_t feat_dim) const {
        if (n_time_bins < 1 || n_freq_bins < 1 || sigma_width < 1 || linear_width < 1 ||
            context < 1 || freq_bin_size < 1) {
            throw ConfigError("grid rnn: all widths/counts must be >= 1");
        }
        if (freq_bin_starts.size() != n_freq_bins) {
            throw ConfigError("grid rnn: " + std::to_string(freq_bin_starts.size()) +
                              " freq_bin_starts for " + std::to_string(n_freq_bins) + " bins");
        }
        for (std::size_t s : freq_bin_starts) {
            if (s + freq_bin_size > feat_dim) {
                throw ConfigError("grid rnn: freq bin at " + std::to_string(s) + " size " +
                                  std::to_string(freq_bin_size) + " exceeds feat_dim " +
                                  std::to_string(feat_dim));
            }
        }
    }
};

// One direction's parameters. The sigma-RNN triples (W_f, V_f, b_f) hold
// n_freq_bins copies in frequency-dependent mode and one shared copy
// otherwise; the linear combination RNN is always shared across bins.
struct GridRnnDirectionParams {
    std::vector<Tensor> W_f;  // [sigma x cell_in] per stored bin
    std::vector<Tensor> V_f;  // [sigma x linear]  per stored bin
    std::vector<Tensor> b_f;  // [sigma]           per stored bin
    Tensor Vi_F;              // [linear x sigma]
    Tensor Vi_I;              // [linear x linear]
    Tensor b_i;               // [linear]

    const Tensor& W_for_bin(std::size_t k) const { return W_f[k < W_f.size() ? k : 0]; }
    const Tensor& V_for_bin(std::size_t k) const { return V_f[k < V_f.size() ? k : 0]; }
    const Tensor& b_for_bin(std::size_t k) const { return b_f[k < b_f.size() ? k : 0]; }
    Tensor& W_for_bin(std::size_t k) { return W_f[k < W_f.size() ? k : 0]; }
    Tensor& V_for_bin(std::size_t k) { return V_f[k < V_f.size() ? k : 0]; }
    Tensor& b_for_bin(std::size_t k) { return b_f[k < b_f.size() ? k : 0]; }

    std::size_t param_count() const {
        std::size_t n = Vi_F.numel() + Vi_I.numel() + b_i.numel();
        for (const auto& t : W_f) n += t.numel();
        for (const auto& t : V_f) n += t.numel();
        for (const auto& t : b_f) n += t.numel();
        return n;
    }
};

struct GridRnnParams {
    GridRnnDirectionParams fwd;
    std::optional<GridRnnDirectionParams> bwd;  // present iff bidirectional

    std::size_t param_count() const {
        return fwd.param_count() + (bwd ? bwd->param_count() : 0);
    }
};

inline GridRnnDirectionParams make_grid_direction_params(const GridRnnConfig& cfg) {
    GridRnnDirectionParams p;
    const std::size_t in = cfg.cell_input_dim(), s = cfg.sigma_width, lw = cfg.linear_width;
    for (std::size_t k = 0; k < cfg.stored_bins(); ++k) {
        p.W_f.push_back(Tensor({s, in}));
        p.V_f.push_back(Tensor({s, lw}));
        p.b_f.push_back(Tensor({s}));
    }
    p.Vi_F = Tensor({lw, s});
    p.Vi_I = Tensor({lw, lw});
    p.b_i = Tensor({lw});
    return p;
}

inline GridRnnParams make_grid_rnn_params(const GridRnnConfig& cfg) {
    GridRnnParams p;
    p.fwd = make_grid_direction_params(cfg);
    if (cfg.bidirectional) p.bwd = make_grid_direction_params(cfg);
    return p;
}

struct GridRnnCache {
    Tensor x;      // [T, K, cell_in]
    Tensor h_lin;  // [T, K, linear]
    Tensor h_sig;  // [T, K, sigma]
};

inline void check_grid_input(const GridRnnConfig& cfg, const Tensor& x_grid) {
    if (x_grid.ndim() != 3 || x_grid.size(0) != cfg.n_time_bins ||
        x_grid.size(1) != cfg.n_freq_bins || x_grid.size(2) != cfg.cell_input_dim()) {
        throw InputError("grid input " + x_grid.shape_str() + " vs expected [" +
                         std::to_string(cfg.n_time_bins) + "x" +
                         std::to_string(cfg.n_freq_bins) + "x" +
                         std::to_string(cfg.cell_input_dim()) + "]");
    }
}

// Unfolds, for t ascending then k ascending:
//   h_lin(t,k) = Vi_F h_sig(t,k-1) + Vi_I h_lin(t-1,k) + b_i        (linear)
//   h_sig(t,k) = sigmoid(W_f(k) x(t,k) + V_f(k) h_lin(t,k-1) + b_f(k))
// with zero boundary states. Returns per-time-bin outputs
// [T, n_freq_bins * sigma]: the sigma-RNN states concatenated over k.
inline Tensor grid_rnn_forward(const GridRnnConfig& cfg, const GridRnnDirectionParams& p,
                               const Tensor& x_grid, GridRnnCache& cache) {
    check_grid_input(cfg, x_grid);
    const std::size_t T = cfg.n_time_bins, K = cfg.n_freq_bins;
    const std::size_t s = cfg.sigma_width, lw = cfg.linear_width;

    cache.x = x_grid;
    cache.h_lin = Tensor({T, K, lw});
    cache.h_sig = Tensor({T, K, s});
    const std::vector<double> zero_lin(lw, 0.0), zero_sig(s, 0.0);

    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t k = 0; k < K; ++k) {
            const double* h_sig_km1 = k > 0 ? &cache.h_sig(t, k - 1, 0) : zero_sig.data();
            const double* h_lin_tm1 = t > 0 ? &cache.h_lin(t - 1, k, 0) : zero_lin.data();
            const double* h_lin_km1 = k > 0 ? &cache.h_lin(t, k - 1, 0) : zero_lin.data();

            double* hl = &cache.h_lin(t, k, 0);
            matvec_assign(p.Vi_F, h_sig_km1, hl);
            matvec_add(p.Vi_I, h_lin_tm1, hl);
            vec_add(p.b_i, hl);

            double* hs = &cache.h_sig(t, k, 0);
            matvec_assign(p.W_for_bin(k), &x_grid(t, k, 0), hs);
            matvec_add(p.V_for_bin(k), h_lin_km1, hs);
            vec_add(p.b_for_bin(k), hs);
            for (std::size_t i = 0; i < s; ++i) hs[i] = sigmoid_scalar(hs[i]);
        }
    }

    Tensor out({T, K * s});
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t k = 0; k < K; ++k) {
            std::copy(&cache.h_sig(t, k, 0), &cache.h_sig(t, k, 0) + s, out.row(t) + k * s);
        }
    }
    return out;
}

// Reverse-order traversal (t, k descending). Frequency-dependent gradients
// accumulate per bin; shared-mode gradients accumulate across all bins.
inline void grid_rnn_backward(const GridRnnConfig& cfg, const GridRnnDirectionParams& p,
                              const GridRnnCache& cache, const Tensor& grad_out,
                              GridRnnDirectionParams& g) {
    const std::size_t T = cfg.n_time_bins, K = cfg.n_freq_bins;
    const std::size_t s = cfg.sigma_width, lw = cfg.linear_width;
    if (cache.h_sig.numel() != T * K * s || cache.h_lin.numel() != T * K * lw) {
        throw UsageError("grid_rnn_backward: cache does not match this config");
    }
    if (grad_out.ndim() != 2 || grad_out.size(0) != T || grad_out.size(1) != K * s) {
        throw DimensionError("grid_rnn_backward: grad " + grad_out.shape_str());
    }

    Tensor d_sig({T, K, s});   // sigmoid-input adjoints
    Tensor g_lin({T, K, lw});  // adjoints on h_lin
    const std::vector<double> zero_lin(lw, 0.0), zero_sig(s, 0.0);

    for (std::size_t t = T; t-- > 0;) {
        for (std::size_t k = K; k-- > 0;) {
            // adjoint on h_sig(t,k): the output slice plus Vi_F^T routed from
            // h_lin(t,k+1)
            std::vector<double> gf(grad_out.row(t) + k * s, grad_out.row(t) + (k + 1) * s);
            if (k + 1 < K) matvec_transpose_add(p.Vi_F, &g_lin(t, k + 1, 0), gf.data());
            double* df = &d_sig(t, k, 0);
            const double* hs = &cache.h_sig(t, k, 0);
            for (std::size_t i = 0; i < s; ++i) df[i] = gf[i] * hs[i] * (1.0 - hs[i]);

            // adjoint on h_lin(t,k): Vi_I^T from h_lin(t+1,k), V_f(k+1)^T from
            // the (t,k+1) sigmoid pre-activation
            double* gl = &g_lin(t, k, 0);
            if (t + 1 < T) matvec_transpose_add(p.Vi_I, &g_lin(t + 1, k, 0), gl);
            if (k + 1 < K) matvec_transpose_add(p.V_for_bin(k + 1), &d_sig(t, k + 1, 0), gl);

            const double* h_sig_km1 = k > 0 ? &cache.h_sig(t, k - 1, 0) : zero_sig.data();
            const double* h_lin_tm1 = t > 0 ? &cache.h_lin(t - 1, k, 0) : zero_lin.data();
            const double* h_lin_km1 = k > 0 ? &cache.h_lin(t, k - 1, 0) : zero_lin.data();

            outer_add(g.W_for_bin(k), df, &cache.x(t, k, 0));
            outer_add(g.V_for_bin(k), df, h_lin_km1);
            vec_add_raw(g.b_for_bin(k), df);
            outer_add(g.Vi_F, gl, h_sig_km1);
            outer_add(g.Vi_I, gl, h_lin_tm1);
            vec_add_raw(g.b_i, gl);
        }
    }
}

// ---- bidirectional construction ----

// y(t,k,:) = x(T-1-t, K-1-k, :)
inline Tensor reverse_grid(const Tensor& x) {
    const std::size_t T = x.size(0), K = x.size(1), d = x.size(2);
    Tensor y({T, K, d});
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t k = 0; k < K; ++k) {
            const double* src = &x(T - 1 - t, K - 1 - k, 0);
            std::copy(src, src + d, &y(t, k, 0));
        }
    }
    return y;
}

struct BdGridRnnCache {
    GridRnnCache fwd;
    GridRnnCache bwd;  // computed on the double-reversed grid
};

// Two grids in parallel: the second runs on the input reversed along both
// axes; its per-time-bin outputs are re-reversed in time and concatenated
// after the forward outputs. Result: [T, 2 * n_freq_bins * sigma].
inline Tensor bd_grid_rnn_forward(const GridRnnConfig& cfg, const GridRnnParams& p,
                                  const Tensor& x_grid, BdGridRnnCache& cache) {
    if (!p.bwd) throw UsageError("bd_grid_rnn_forward: missing backward-direction params");
    Tensor out_f = grid_rnn_forward(cfg, p.fwd, x_grid, cache.fwd);
    Tensor out_r = grid_rnn_forward(cfg, *p.bwd, reverse_grid(x_grid), cache.bwd);
    const std::size_t T = cfg.n_time_bins, half = cfg.n_freq_bins * cfg.sigma_width;
    Tensor out({T, 2 * half});
    for (std::size_t t = 0; t < T; ++t) {
        std::copy(out_f.row(t), out_f.row(t) + half, out.row(t));
        std::copy(out_r.row(T - 1 - t), out_r.row(T - 1 - t) + half, out.row(t) + half);
    }
    return out;
}

inline void bd_grid_rnn_backward(const GridRnnConfig& cfg, const GridRnnParams& p,
                                 const BdGridRnnCache& cache, const Tensor& grad_out,
                                 GridRnnParams& g) {
    if (!p.bwd || !g.bwd) {
        throw UsageError("bd_grid_rnn_backward: missing backward-direction params");
    }
    const std::size_t T = cfg.n_time_bins, half = cfg.n_freq_bins * cfg.sigma_width;
    if (grad_out.ndim() != 2 || grad_out.size(0) != T || grad_out.size(1) != 2 * half) {
        throw DimensionError("bd_grid_rnn_backward: grad " + grad_out.shape_str());
    }
    Tensor gf({T, half}), gr({T, half});
    for (std::size_t t = 0; t < T; ++t) {
        std::copy(grad_out.row(t), grad_out.row(t) + half, gf.row(t));
        // second half of output row t came from reversed-pass row T-1-t
        std::copy(grad_out.row(t) + half, grad_out.row(t) + 2 * half, gr.row(T - 1 - t));
    }
    grid_rnn_backward(cfg, p.fwd, cache.fwd, gf, g.fwd);
    grid_rnn_backward(cfg, *p.bwd, cache.bwd, gr, *g.bwd);
}

// ---- TF-RNN ----

struct TfRnnParams {
    Tensor W;    // [sigma x cell_in]
    Tensor V_T;  // [sigma x sigma]
    Tensor V_F;  // [sigma x sigma]
    Tensor b;    // [sigma]

    std::size_t param_count() const {
        return W.numel() + V_T.numel() + V_F.numel() + b.numel();
    }
};

inline TfRnnParams make_tf_rnn_params(const GridRnnConfig& cfg) {
    const std::size_t s = cfg.sigma_width, in = cfg.cell_input_dim();
    return TfRnnParams{Tensor({s, in}), Tensor({s, s}), Tensor({s, s}), Tensor({s})};
}

struct TfRnnCache {
    Tensor x;  // [T, K, cell_in]
    Tensor h;  // [T, K, sigma]
};

// h(t,k) = sigmoid(W x(t,k) + V_T h(t-1,k) + V_F h(t,k-1) + b), zero
// boundaries; output [T, K * sigma].
inline Tensor tf_rnn_forward(const GridRnnConfig& cfg, const TfRnnParams& p,
                             const Tensor& x_grid, TfRnnCache& cache) {
    check_grid_input(cfg, x_grid);
    const std::size_t T = cfg.n_time_bins, K = cfg.n_freq_bins, s = cfg.sigma_width;
    cache.x = x_grid;
    cache.h = Tensor({T, K, s});
    const std::vector<double> zero(s, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t k = 0; k < K; ++k) {
            const double* h_tm1 = t > 0 ? &cache.h(t - 1, k, 0) : zero.data();
            const double* h_km1 = k > 0 ? &cache.h(t, k - 1, 0) : zero.data();
            double* h = &cache.h(t, k, 0);
            matvec_assign(p.W, &x_grid(t, k, 0), h);
            matvec_add(p.V_T, h_tm1, h);
            matvec_add(p.V_F, h_km1, h);
            vec_add(p.b, h);
            for (std::size_t i = 0; i < s; ++i) h[i] = sigmoid_scalar(h[i]);
        }
    }
    Tensor out({T, K * s});
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t k = 0; k < K; ++k) {
            std::copy(&cache.h(t, k, 0), &cache.h(t, k, 0) + s, out.row(t) + k * s);
        }
    }
    return out;
}

inline void tf_rnn_backward(const GridRnnConfig& cfg, const TfRnnParams& p,
                            const TfRnnCache& cache, const Tensor& grad_out, TfRnnParams& g) {
    const std::size_t T = cfg.n_time_bins, K = cfg.n_freq_bins, s = cfg.sigma_width;
    if (cache.h.numel() != T * K * s) {
        throw UsageError("tf_rnn_backward: cache does not match this config");
    }
    if (grad_out.ndim() != 2 || grad_out.size(0) != T || grad_out.size(1) != K * s) {
        throw DimensionError("tf_rnn_backward: grad " + grad_out.shape_str());
    }
    Tensor d({T, K, s});
    const std::vector<double> zero(s, 0.0);
    for (std::size_t t = T; t-- > 0;) {
        for (std::size_t k = K; k-- > 0;) {
            std::vector<double> gh(grad_out.row(t) + k * s, grad_out.row(t) + (k + 1) * s);
            if (t + 1 < T) matvec_transpose_add(p.V_T, &d(t + 1, k, 0), gh.data());
            if (k + 1 < K) matvec_transpose_add(p.V_F, &d(t, k + 1, 0), gh.data());
            double* dv = &d(t, k, 0);
            const double* h = &cache.h(t, k, 0);
            for (std::size_t i = 0; i < s; ++i) dv[i] = gh[i] * h[i] * (1.0 - h[i]);

            const double* h_tm1 = t > 0 ? &cache.h(t - 1, k, 0) : zero.data();
            const double* h_km1 = k > 0 ? &cache.h(t, k - 1, 0) : zero.data();
            outer_add(g.W, dv, &cache.x(t, k, 0));
            outer_add(g.V_T, dv, h_tm1);
            outer_add(g.V_F, dv, h_km1);
            vec_add_raw(g.b, dv);
        }
    }
}

// ---- coupled grid cell ----

// Two sigmoid recurrences sharing V_T and V_F exactly as the update
// equations are printed; no gating or memory cells.
struct CoupledGridParams {
    Tensor W_T, W_F;  // [sigma x cell_in]
    Tensor V_T, V_F;  // [sigma x sigma]
    Tensor b_T, b_F;  // [sigma]

    std::size_t param_count() const {
        return W_T.numel() + W_F.numel() + V_T.numel() + V_F.numel() + b_T.numel() +
               b_F.numel();
    }
};

inline CoupledGridParams make_coupled_grid_params(const GridRnnConfig& cfg) {
    const std::size_t s = cfg.sigma_width, in = cfg.cell_input_dim();
    return CoupledGridParams{Tensor({s, in}), Tensor({s, in}), Tensor({s, s}),
                             Tensor({s, s}),  Tensor({s}),     Tensor({s})};
}

struct CoupledGridCache {
    Tensor x;           // [T, K, cell_in]
    Tensor h_t, h_f;    // [T, K, sigma] each
};

// h_t(t,k) = sigmoid(W_T x + V_T h_t(t-1,k) + V_F h_f(t,k-1) + b_T)
// h_f(t,k) = sigmoid(W_F x + V_T h_t(t-1,k) + V_F h_f(t,k-1) + b_F)
// Output per time bin: all h_t over k, then all h_f over k -> [T, 2K*sigma].
inline Tensor coupled_grid_forward(const GridRnnConfig& cfg, const CoupledGridParams& p,
                                   const Tensor& x_grid, CoupledGridCache& cache) {
    check_grid_input(cfg, x_grid);
    const std::size_t T = cfg.n_time_bins, K = cfg.n_freq_bins, s = cfg.sigma_width;
    cache.x = x_grid;
    cache.h_t = Tensor({T, K, s});
    cache.h_f = Tensor({T, K, s});
    const std::vector<double> zero(s, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t k = 0; k < K; ++k) {
            const double* ht_tm1 = t > 0 ? &cache.h_t(t - 1, k, 0) : zero.data();
            const double* hf_km1 = k > 0 ? &cache.h_f(t, k - 1, 0) : zero.data();
            double* ht = &cache.h_t(t, k, 0);
            matvec_assign(p.W_T, &x_grid(t, k, 0), ht);
            matvec_add(p.V_T, ht_tm1, ht);
            matvec_add(p.V_F, hf_km1, ht);
            vec_add(p.b_T, ht);
            double* hf = &cache.h_f(t, k, 0);
            matvec_assign(p.W_F, &x_grid(t, k, 0), hf);
            matvec_add(p.V_T, ht_tm1, hf);
            matvec_add(p.V_F, hf_km1, hf);
            vec_add(p.b_F, hf);
            for (std::size_t i = 0; i < s; ++i) {
                ht[i] = sigmoid_scalar(ht[i]);
                hf[i] = sigmoid_scalar(hf[i]);
            }
        }
    }
    Tensor out({T, 2 * K * s});
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t k = 0; k < K; ++k) {
            std::copy(&cache.h_t(t, k, 0), &cache.h_t(t, k, 0) + s, out.row(t) + k * s);
            std::copy(&cache.h_f(t, k, 0), &cache.h_f(t, k, 0) + s,
                      out.row(t) + (K + k) * s);
        }
    }
    return out;
}

inline void coupled_grid_backward(const GridRnnConfig& cfg, const CoupledGridParams& p,
                                  const CoupledGridCache& cache, const Tensor& grad_out,
                                  CoupledGridParams& g) {
    const std::size_t T = cfg.n_time_bins, K = cfg.n_freq_bins, s = cfg.sigma_width;
    if (cache.h_t.numel() != T * K * s || cache.h_f.numel() != T * K * s) {
        throw UsageError("coupled_grid_backward: cache does not match this config");
    }
    if (grad_out.ndim() != 2 || grad_out.size(0) != T || grad_out.size(1) != 2 * K * s) {
        throw DimensionError("coupled_grid_backward: grad " + grad_out.shape_str());
    }
    Tensor dt({T, K, s}), df({T, K, s});
    const std::vector<double> zero(s, 0.0);
    std::vector<double> dsum(s);
    for (std::size_t t = T; t-- > 0;) {
        for (std::size_t k = K; k-- > 0;) {
            std::vector<double> gt(grad_out.row(t) + k * s, grad_out.row(t) + (k + 1) * s);
            std::vector<double> gf(grad_out.row(t) + (K + k) * s,
                                   grad_out.row(t) + (K + k + 1) * s);
            if (t + 1 < T) {
                // h_t(t,k) feeds both streams' (t+1,k) pre-activations via V_T
                for (std::size_t i = 0; i < s; ++i) {
                    dsum[i] = dt(t + 1, k, i) + df(t + 1, k, i);
                }
                matvec_transpose_add(p.V_T, dsum.data(), gt.data());
            }
            if (k + 1 < K) {
                // h_f(t,k) feeds both streams' (t,k+1) pre-activations via V_F
                for (std::size_t i = 0; i < s; ++i) {
                    dsum[i] = dt(t, k + 1, i) + df(t, k + 1, i);
                }
                matvec_transpose_add(p.V_F, dsum.data(), gf.data());
            }
            double* dtv = &dt(t, k, 0);
            double* dfv = &df(t, k, 0);
            const double* ht = &cache.h_t(t, k, 0);
            const double* hf = &cache.h_f(t, k, 0);
            for (std::size_t i = 0; i < s; ++i) {
                dtv[i] = gt[i] * ht[i] * (1.0 - ht[i]);
                dfv[i] = gf[i] * hf[i] * (1.0 - hf[i]);
            }

            const double* ht_tm1 = t > 0 ? &cache.h_t(t - 1, k, 0) : zero.data();
            const double* hf_km1 = k > 0 ? &cache.h_f(t, k - 1, 0) : zero.data();
            outer_add(g.W_T, dtv, &cache.x(t, k, 0));
            outer_add(g.W_F, dfv, &cache.x(t, k, 0));
            for (std::size_t i = 0; i < s; ++i) dsum[i] = dtv[i] + dfv[i];
            outer_add(g.V_T, dsum.data(), ht_tm1);
            outer_add(g.V_F, dsum.data(), hf_km1);
            vec_add_raw(g.b_T, dtv);
            vec_add_raw(g.b_F, dfv);
        }
    }
}

// ---- grid input construction ----

// Builds the [T, K, context * freq_bin_size] grid from one example's frame
// window. time_bin_starts are row offsets into the window; each cell is the
// bin's context frames restricted to its frequency dims, frame-major.
inline Tensor build_grid_input(const Tensor& window, const std::vector<std::size_t>& time_bin_starts,
                               const GridRnnConfig& cfg) {
    if (window.ndim() != 2) throw InputError("grid input window " + window.shape_str());
    cfg.validate(window.size(1));
    if (time_bin_starts.size() != cfg.n_time_bins) {
        throw InputError("grid input: " + std::to_string(time_bin_starts.size()) +
                         " time bins, config expects " + std::to_string(cfg.n_time_bins));
    }
    Tensor x({cfg.n_time_bins, cfg.n_freq_bins, cfg.cell_input_dim()});
    for (std::size_t t = 0; t < cfg.n_time_bins; ++t) {
        if (time_bin_starts[t] + cfg.context > window.size(0)) {
            throw InputError("grid input: time bin " + std::to_string(t) + " at row " +
                             std::to_string(time_bin_starts[t]) + " overruns window of " +
                             std::to_string(window.size(0)) + " rows");
        }
        for (std::size_t k = 0; k < cfg.n_freq_bins; ++k) {
            double* cell = &x(t, k, 0);
            for (std::size_t c = 0; c < cfg.context; ++c) {
                const double* src = window.row(time_bin_starts[t] + c) + cfg.freq_bin_starts[k];
                std::copy(src, src + cfg.freq_bin_size, cell + c * cfg.freq_bin_size);
            }
        }
    }
    return x;
}

}  // namespace tdnnforge
