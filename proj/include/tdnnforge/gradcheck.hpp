#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "tdnnforge/numerics.hpp"
#include "tdnnforge/tdnn.hpp"
#include "tdnnforge/training.hpp"

// End-to-end finite-difference verification: for every parameter block of a
// model, central differences of the cross-entropy loss are compared against
// the analytic backward pass. Shared kernels report per-instantiation mean
// gradients, so the analytic value is rescaled by the block's instantiation
// count before comparison.

namespace tdnnforge {

struct GradCheckBlock {
    std::string name;
    std::size_t instantiations = 1;
    double max_rel_err = 0.0;
    // coordinates sitting on a max-pool selection boundary, where the
    // central difference straddles two one-sided slopes; the analytic value
    // was validated against the slope of the selected side instead
    std::size_t kink_coordinates = 0;
};

struct GradCheckReport {
    std::vector<GradCheckBlock> blocks;

    double worst() const {
        double w = 0.0;
        for (const auto& b : blocks) w = std::max(w, b.max_rel_err);
        return w;
    }
    bool passed(double tol) const { return worst() < tol; }
};

using BackwardFn =
    std::function<ModelGrads(const TdnnModel&, const TdnnCache&, const Tensor&)>;

inline ModelGrads default_backward(const TdnnModel& m, const TdnnCache& cache,
                                   const Tensor& grad_logits) {
    return tdnn_backward(m, cache, grad_logits);
}

// Deterministic random batch for the check.
inline void make_grad_check_batch(const TdnnSpec& spec, std::size_t batch, std::uint64_t seed,
                                  Tensor& x, std::vector<std::uint32_t>& labels) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 0.5);
    x = Tensor({batch, spec.window.length(), spec.feat_dim});
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] = dist(rng);
    labels.resize(batch);
    for (std::size_t i = 0; i < batch; ++i) {
        labels[i] = std::uint32_t(rng() % spec.out_dim);
    }
}

inline double coordinate_rel_error(double fd, double analytic) {
    const double denom = std::max({std::abs(fd), std::abs(analytic), 1e-4});
    return std::abs(fd - analytic) / denom;
}

inline GradCheckReport run_grad_check(TdnnModel& m, const Tensor& x,
                                      const std::vector<std::uint32_t>& labels, double eps,
                                      BackwardFn backward = default_backward,
                                      double tol = 1e-4) {
    TdnnCache cache;
    Tensor logits = tdnn_forward(m, x, cache);
    CrossEntropyResult ce = cross_entropy_loss(logits, labels);
    ModelGrads analytic = backward(m, cache, ce.grad_logits);

    // collect analytic blocks in registry order
    std::vector<Tensor> grad_blocks;
    std::vector<BlockMeta> metas;
    for_each_param_block(m.spec, analytic.g,
                         [&](const std::string&, Tensor& t, const BlockMeta& meta) {
                             grad_blocks.push_back(t);
                             metas.push_back(meta);
                         });

    GradCheckReport report;
    std::size_t bi = 0;
    for_each_param_block(
        m.spec, m.params, [&](const std::string& name, Tensor& param, const BlockMeta&) {
            const BlockMeta& meta = metas[bi];
            const Tensor original = param;
            const LossFn loss_fn = [&](const Tensor& candidate) {
                param = candidate;
                TdnnCache c;
                Tensor z = tdnn_forward(m, x, c);
                return cross_entropy_loss(z, labels).loss;
            };
            Tensor fd = finite_diff_grad(loss_fn, original, eps);
            param = original;

            // reported gradients are per-instantiation means
            Tensor expected = grad_blocks[bi];
            scale(expected, double(meta.instantiations));

            GradCheckBlock block{name, meta.instantiations, 0.0, 0};
            for (std::size_t i = 0; i < fd.numel(); ++i) {
                double err = coordinate_rel_error(fd[i], expected[i]);
                if (err >= tol) {
                    // max-pooling makes the loss piecewise smooth; on a
                    // selection boundary the central difference averages two
                    // distinct slopes. The backward pass is correct there iff
                    // it reproduces one of the one-sided slopes.
                    Tensor probe = original;
                    const double f0 = loss_fn(probe);
                    probe[i] = original[i] + eps;
                    const double fp = loss_fn(probe);
                    probe[i] = original[i] - eps;
                    const double fm = loss_fn(probe);
                    param = original;
                    const double slope_plus = (fp - f0) / eps;
                    const double slope_minus = (f0 - fm) / eps;
                    const double one_sided =
                        std::min(coordinate_rel_error(slope_plus, expected[i]),
                                 coordinate_rel_error(slope_minus, expected[i]));
                    const bool is_kink =
                        coordinate_rel_error(slope_plus, slope_minus) > 10.0 * tol;
                    if (is_kink && one_sided < tol) {
                        ++block.kink_coordinates;
                        err = one_sided;
                    }
                }
                block.max_rel_err = std::max(block.max_rel_err, err);
            }
            report.blocks.push_back(std::move(block));
            ++bi;
        });
    return report;
}

inline GradCheckReport run_grad_check(TdnnModel& m, std::size_t batch, std::uint64_t seed,
                                      double eps, BackwardFn backward = default_backward) {
    Tensor x;
    std::vector<std::uint32_t> labels;
    make_grad_check_batch(m.spec, batch, seed, x, labels);
    return run_grad_check(m, x, labels, eps, std::move(backward));
}

}  // namespace tdnnforge
