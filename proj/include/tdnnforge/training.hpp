#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <ostream>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "tdnnforge/data.hpp"
#include "tdnnforge/error.hpp"
#include "tdnnforge/tdnn.hpp"

// Cross-entropy frame-classification training: L2 regularization,
// fixed-size frame minibatches with frame-level shuffling, and a
// halve-on-plateau learning-rate scheduler driven by validation loss.

namespace tdnnforge {

// ---- cross entropy ----

struct CrossEntropyResult {
    double loss = 0.0;     // mean over the batch
    Tensor grad_logits;    // (softmax - onehot) / batch
};

namespace detail {

// Sum-form cross entropy with an externally chosen gradient divisor, so
// chunked (multi-threaded) evaluation reproduces the exact batch math.
inline double cross_entropy_sum(const Tensor& logits, const std::uint32_t* labels,
                                std::size_t n, double grad_scale, Tensor* grad_out) {
    const std::size_t C = logits.size(1);
    double loss_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= C) {
            throw InputError("cross_entropy: label " + std::to_string(labels[i]) +
                             " out of range [0, " + std::to_string(C) + ")");
        }
        const double* z = logits.row(i);
        double zmax = z[0];
        for (std::size_t c = 1; c < C; ++c) zmax = std::max(zmax, z[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < C; ++c) sum += std::exp(z[c] - zmax);
        const double log_sum = std::log(sum);
        loss_sum += log_sum - (z[labels[i]] - zmax);
        if (grad_out) {
            double* g = grad_out->row(i);
            for (std::size_t c = 0; c < C; ++c) {
                g[c] = std::exp(z[c] - zmax) / sum / grad_scale;
            }
            g[labels[i]] -= 1.0 / grad_scale;
        }
    }
    return loss_sum;
}

}  // namespace detail

// loss = mean over the batch of -log softmax(logits)[label], computed with
// max-subtraction; grad = (softmax - onehot) / batch.
inline CrossEntropyResult cross_entropy_loss(const Tensor& logits,
                                             const std::vector<std::uint32_t>& labels) {
    if (logits.ndim() != 2 || logits.size(0) != labels.size()) {
        throw DimensionError("cross_entropy: logits " + logits.shape_str() + " vs " +
                             std::to_string(labels.size()) + " labels");
    }
    CrossEntropyResult r;
    r.grad_logits = Tensor(logits.shape());
    r.loss = detail::cross_entropy_sum(logits, labels.data(), labels.size(),
                                       double(labels.size()), &r.grad_logits) /
             double(labels.size());
    return r;
}

// ---- L2 regularization ----

// penalty = lambda/2 * sum of squared weights over weight matrices only;
// biases are excluded. The matching gradient contribution is lambda * W,
// applied during the update.
inline double l2_penalty(const TdnnModel& m, double lambda) {
    if (lambda < 0.0) throw InputError("l2_penalty: lambda must be >= 0");
    double ss = 0.0;
    for_each_param_block(m, [&](const std::string&, const Tensor& t, const BlockMeta& meta) {
        if (meta.is_bias) return;
        for (std::size_t i = 0; i < t.numel(); ++i) ss += t[i] * t[i];
    });
    return 0.5 * lambda * ss;
}

// ---- scheduler ----

struct SchedulerConfig {
    // relative validation improvement below which halving begins
    double ramp_threshold = 0.005;
    // improvement below which training stops once halving has begun
    double stop_threshold = 0.001;
    double halving_factor = 0.5;

    void validate() const {
        if (ramp_threshold < 0.0 || stop_threshold < 0.0 ||
            stop_threshold > ramp_threshold) {
            throw ConfigError("scheduler: need 0 <= stop_threshold <= ramp_threshold");
        }
        if (!(halving_factor > 0.0 && halving_factor < 1.0)) {
            throw ConfigError("scheduler: halving_factor must be in (0, 1)");
        }
    }
};

enum class NewbobDecision { keep_lr, halve_lr, stop };

struct NewbobState {
    double lr = 0.0;
    double best_metric = std::numeric_limits<double>::infinity();
    bool ramping = false;
};

// Halve-on-plateau with strict-inequality thresholds: before ramping, a
// relative improvement below ramp_threshold halves the rate and enters ramp
// mode; while ramping the rate halves every epoch and an improvement below
// stop_threshold stops. The rate never increases. The first observation
// only sets the baseline.
inline NewbobDecision newbob_step(NewbobState& st, double val_metric,
                                  const SchedulerConfig& cfg) {
    if (!std::isfinite(val_metric)) {
        throw InputError("newbob_step: non-finite validation metric");
    }
    const double improvement =
        std::isfinite(st.best_metric)
            ? (st.best_metric - val_metric) / std::max(std::abs(st.best_metric), 1e-12)
            : std::numeric_limits<double>::infinity();
    if (val_metric < st.best_metric) st.best_metric = val_metric;

    if (st.ramping) {
        if (improvement < cfg.stop_threshold) return NewbobDecision::stop;
        st.lr *= cfg.halving_factor;
        return NewbobDecision::halve_lr;
    }
    if (improvement < cfg.ramp_threshold) {
        st.ramping = true;
        st.lr *= cfg.halving_factor;
        return NewbobDecision::halve_lr;
    }
    return NewbobDecision::keep_lr;
}

// ---- frame indexing, shuffling, batching ----

struct FrameRef {
    std::uint32_t seq = 0;
    std::uint32_t t = 0;
};

inline std::vector<FrameRef> index_frames(const Dataset& ds) {
    std::vector<FrameRef> refs;
    for (std::size_t s = 0; s < ds.size(); ++s) {
        for (std::size_t t = 0; t < ds[s].n_frames(); ++t) {
            refs.push_back({std::uint32_t(s), std::uint32_t(t)});
        }
    }
    return refs;
}

// Deterministic permutation per (seed, epoch).
inline std::vector<FrameRef> shuffled_epoch_order(const std::vector<FrameRef>& refs,
                                                  std::uint64_t seed, std::size_t epoch) {
    std::vector<FrameRef> order = refs;
    std::mt19937_64 rng(seed ^ (0x9e3779b97f4a7c15ull * (std::uint64_t(epoch) + 1)));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

// Materializes [n, window_length, feat] input windows; utterance boundaries
// replicate the first/last frame.
inline Tensor assemble_windows(const Dataset& ds, const std::vector<FrameRef>& refs,
                               std::size_t lo, std::size_t hi, const TdnnWindow& w,
                               std::size_t feat_dim) {
    const std::size_t n = hi - lo;
    Tensor x({n, w.length(), feat_dim});
    for (std::size_t i = 0; i < n; ++i) {
        const FrameSequence& s = ds[refs[lo + i].seq];
        const std::int64_t centre = refs[lo + i].t;
        const std::int64_t last = std::int64_t(s.n_frames()) - 1;
        for (std::size_t r = 0; r < w.length(); ++r) {
            std::int64_t src = centre + w.left + std::int64_t(r);
            src = std::clamp<std::int64_t>(src, 0, last);
            const double* row = s.frames.row(std::size_t(src));
            std::copy(row, row + feat_dim, &x(i, r, 0));
        }
    }
    return x;
}

inline std::vector<std::uint32_t> gather_labels(const Dataset& ds,
                                                const std::vector<FrameRef>& refs,
                                                std::size_t lo, std::size_t hi) {
    std::vector<std::uint32_t> y(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) y[i - lo] = ds[refs[i].seq].labels[refs[i].t];
    return y;
}

// ---- evaluation ----

struct EvalResult {
    double mean_cross_entropy = 0.0;
    double frame_accuracy = 0.0;
    std::size_t n_frames = 0;
};

inline EvalResult evaluate(const TdnnModel& m, const Dataset& ds,
                           std::size_t batch_frames = 800) {
    const std::vector<FrameRef> refs = index_frames(ds);
    if (refs.empty()) throw InputError("evaluate: empty dataset");
    EvalResult r;
    r.n_frames = refs.size();
    double loss_sum = 0.0;
    std::size_t correct = 0;
    TdnnCache cache;
    for (std::size_t lo = 0; lo < refs.size(); lo += batch_frames) {
        const std::size_t hi = std::min(refs.size(), lo + batch_frames);
        Tensor x = assemble_windows(ds, refs, lo, hi, m.spec.window, m.spec.feat_dim);
        std::vector<std::uint32_t> y = gather_labels(ds, refs, lo, hi);
        Tensor logits = tdnn_forward(m, x, cache);
        loss_sum += detail::cross_entropy_sum(logits, y.data(), y.size(), 1.0, nullptr);
        const std::size_t C = logits.size(1);
        for (std::size_t i = 0; i < y.size(); ++i) {
            const double* z = logits.row(i);
            std::size_t arg = 0;
            for (std::size_t c = 1; c < C; ++c) {
                if (z[c] > z[arg]) arg = c;
            }
            if (arg == y[i]) ++correct;
        }
    }
    r.mean_cross_entropy = loss_sum / double(r.n_frames);
    r.frame_accuracy = double(correct) / double(r.n_frames);
    return r;
}

// ---- training ----

struct TrainConfig {
    double initial_lr = 2e-3;
    std::size_t minibatch_frames = 800;
    double l2_lambda = 1e-5;
    SchedulerConfig scheduler;
    std::size_t max_epochs = 20;
    std::uint64_t seed = 1;
    std::size_t threads = 1;  // fixed-order chunked parallelism; 1 = reference order

    void validate() const {
        if (!(initial_lr > 0.0)) throw ConfigError("train: initial_lr must be > 0");
        if (minibatch_frames < 1) throw ConfigError("train: minibatch_frames must be >= 1");
        if (l2_lambda < 0.0) throw ConfigError("train: l2_lambda must be >= 0");
        if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
        if (threads < 1) throw ConfigError("train: threads must be >= 1");
        scheduler.validate();
    }
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;  // mean training cross entropy over the epoch
    double val_loss = 0.0;
    double val_acc = 0.0;
    double lr = 0.0;  // rate used during this epoch
};

inline void format_epoch_record(std::ostream& os, const EpochRecord& r) {
    char buf[160];
    std::snprintf(buf, sizeof buf,
                  "epoch=%zu train_loss=%.6f val_loss=%.6f val_acc=%.4f lr=%.8g", r.epoch,
                  r.train_loss, r.val_loss, r.val_acc, r.lr);
    os << buf << "\n";
}

struct EpochEnd {
    EpochRecord record;
    bool is_best = false;  // validation loss improved over all previous epochs
    NewbobState scheduler;  // state after this epoch's decision
    NewbobDecision decision = NewbobDecision::keep_lr;
};

struct TrainHooks {
    std::function<void(const EpochEnd&, const TdnnModel&)> on_epoch;
    std::ostream* echo = nullptr;  // per-epoch history lines
};

struct TrainResult {
    std::vector<EpochRecord> history;
    NewbobState scheduler;
    std::size_t last_epoch = 0;
};

// SGD update p <- p - lr * (grad + lambda * W); biases skip the L2 term.
inline void apply_sgd_update(TdnnModel& m, ModelGrads& grads, double lr, double lambda) {
    for_each_param_grad_pair(
        m.spec, m.params, grads.g,
        [&](const std::string&, Tensor& p, Tensor& g, const BlockMeta& meta) {
            const double wd = meta.is_bias ? 0.0 : lambda;
            for (std::size_t i = 0; i < p.numel(); ++i) p[i] -= lr * (g[i] + wd * p[i]);
        });
}

namespace detail {

struct BatchGradResult {
    ModelGrads grads;
    double loss_sum = 0.0;
};

// Forward + backward over refs[lo, hi); gradients scaled for a minibatch of
// total_frames. Runs the chunk range on `threads` workers and reduces the
// per-chunk gradients in chunk order.
inline BatchGradResult batch_gradients(const TdnnModel& m, const Dataset& ds,
                                       const std::vector<FrameRef>& refs, std::size_t lo,
                                       std::size_t hi, std::size_t total_frames,
                                       std::size_t threads) {
    const std::size_t n = hi - lo;
    const std::size_t n_chunks = std::max<std::size_t>(1, std::min(threads, n));
    std::vector<BatchGradResult> partial(n_chunks);
    std::vector<std::exception_ptr> errors(n_chunks);

    const auto run_chunk = [&](std::size_t ci) {
        try {
            const std::size_t c_lo = lo + ci * n / n_chunks;
            const std::size_t c_hi = lo + (ci + 1) * n / n_chunks;
            Tensor x = assemble_windows(ds, refs, c_lo, c_hi, m.spec.window, m.spec.feat_dim);
            std::vector<std::uint32_t> y = gather_labels(ds, refs, c_lo, c_hi);
            TdnnCache cache;
            Tensor logits = tdnn_forward(m, x, cache);
            Tensor grad_logits(logits.shape());
            partial[ci].loss_sum = cross_entropy_sum(logits, y.data(), y.size(),
                                                     double(total_frames), &grad_logits);
            partial[ci].grads = tdnn_backward(m, cache, grad_logits);
        } catch (...) {
            errors[ci] = std::current_exception();
        }
    };

    if (n_chunks == 1) {
        run_chunk(0);
    } else {
        std::vector<std::thread> workers;
        for (std::size_t ci = 0; ci < n_chunks; ++ci) workers.emplace_back(run_chunk, ci);
        for (auto& w : workers) w.join();
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }

    BatchGradResult total = std::move(partial[0]);
    for (std::size_t ci = 1; ci < n_chunks; ++ci) {
        total.loss_sum += partial[ci].loss_sum;
        for_each_param_grad_pair(m.spec, total.grads.g, partial[ci].grads.g,
                                 [&](const std::string&, Tensor& a, Tensor& b,
                                     const BlockMeta&) { accumulate(a, b); });
    }
    return total;
}

}  // namespace detail

// Runs SGD to scheduler stop or max_epochs. Deterministic under a fixed
// (seed, config, data) with threads == 1. `resume` continues a previous
// session's epoch numbering and scheduler state.
inline TrainResult train(TdnnModel& m, const Dataset& train_ds, const Dataset& val_ds,
                         const TrainConfig& cfg, TrainHooks hooks = {},
                         std::size_t start_epoch = 0, const NewbobState* resume = nullptr) {
    cfg.validate();
    if (train_ds.empty() || val_ds.empty()) throw InputError("train: empty dataset");
    const std::vector<FrameRef> refs = index_frames(train_ds);

    TrainResult result;
    result.scheduler =
        resume ? *resume
               : NewbobState{cfg.initial_lr, std::numeric_limits<double>::infinity(), false};
    double best_val = resume ? resume->best_metric : std::numeric_limits<double>::infinity();

    for (std::size_t epoch = start_epoch + 1; epoch <= cfg.max_epochs; ++epoch) {
        const double lr = result.scheduler.lr;
        const std::vector<FrameRef> order = shuffled_epoch_order(refs, cfg.seed, epoch);
        double loss_sum = 0.0;
        std::size_t batch_index = 0;
        for (std::size_t lo = 0; lo < order.size(); lo += cfg.minibatch_frames, ++batch_index) {
            const std::size_t hi = std::min(order.size(), lo + cfg.minibatch_frames);
            detail::BatchGradResult bg =
                detail::batch_gradients(m, train_ds, order, lo, hi, hi - lo, cfg.threads);
            const double batch_loss = bg.loss_sum / double(hi - lo);
            if (!std::isfinite(batch_loss)) {
                throw NumericError("train: non-finite loss at epoch " +
                                   std::to_string(epoch) + " batch " +
                                   std::to_string(batch_index) + " lr " + std::to_string(lr));
            }
            loss_sum += bg.loss_sum;
            apply_sgd_update(m, bg.grads, lr, cfg.l2_lambda);
        }

        const EvalResult val = evaluate(m, val_ds, cfg.minibatch_frames);
        EpochRecord rec{epoch, loss_sum / double(order.size()), val.mean_cross_entropy,
                        val.frame_accuracy, lr};
        if (hooks.echo) format_epoch_record(*hooks.echo, rec);
        result.history.push_back(rec);
        result.last_epoch = epoch;

        const bool is_best = val.mean_cross_entropy < best_val;
        if (is_best) best_val = val.mean_cross_entropy;
        const NewbobDecision decision =
            newbob_step(result.scheduler, val.mean_cross_entropy, cfg.scheduler);
        if (hooks.on_epoch) {
            hooks.on_epoch(EpochEnd{rec, is_best, result.scheduler, decision}, m);
        }
        if (decision == NewbobDecision::stop) break;
    }
    return result;
}

}  // namespace tdnnforge
