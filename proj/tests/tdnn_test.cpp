#include "tdnnforge/tdnn.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "tdnnforge/gradcheck.hpp"
#include "tdnnforge/numerics.hpp"

using namespace tdnnforge;

namespace {

TdnnSpec make_spec(std::size_t width, std::size_t out_dim,
                   KernelKind kind = KernelKind::standard, std::size_t deep_layers = 1) {
    TdnnSpec spec;
    spec.feat_dim = 40;
    spec.out_dim = out_dim;
    for (int i = 0; i < 4; ++i) {
        KernelConfig k;
        k.kind = kind;
        k.width = width;
        k.n_layers = deep_layers;
        spec.kernels.push_back(k);
    }
    spec.kernels[0].in_dim = spec.window.context * spec.feat_dim;
    for (int i = 1; i < 4; ++i) spec.kernels[i].in_dim = 2 * width;
    return spec;
}

Tensor random_input(std::size_t batch, const TdnnSpec& spec, std::uint64_t seed,
                    double s = 0.5) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(0.0, s);
    Tensor x({batch, spec.window.length(), spec.feat_dim});
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] = d(rng);
    return x;
}

// Straight-line re-implementation of the default 7-bin topology for one
// example: explicit loops, no shared code with tdnn_forward's graph logic.
std::vector<double> reference_eval(const TdnnModel& m, const Tensor& x, std::size_t b) {
    const TdnnSpec& spec = m.spec;
    const std::size_t w = spec.kernels[0].width;
    const auto sigma = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    const auto affine_sigma = [&](const AffineParams& p, const std::vector<double>& in) {
        std::vector<double> out(p.out_dim());
        for (std::size_t o = 0; o < p.out_dim(); ++o) {
            double acc = p.b[o];
            for (std::size_t j = 0; j < p.in_dim(); ++j) acc += p.W(o, j) * in[j];
            out[o] = sigma(acc);
        }
        return out;
    };
    const auto combine = [&](const AffineParams& p, const std::vector<double>& l,
                             const std::vector<double>& r) {
        std::vector<double> in = l;
        in.insert(in.end(), r.begin(), r.end());
        return affine_sigma(p, in);
    };

    // kernel 1 at the seven bins (start rows 0, 3, ..., 18)
    std::vector<std::vector<double>> bins;
    for (std::size_t t = 0; t < 7; ++t) {
        std::vector<double> in;
        for (std::size_t c = 0; c < 5; ++c) {
            for (std::size_t f = 0; f < 40; ++f) in.push_back(x(b, 3 * t + c, f));
        }
        bins.push_back(affine_sigma(m.params.kernels[0].layers[0], in));
    }
    // tree: (0,1) (2,3) (4,5) (5,6) -> (0,1) (2,3) -> (0,1)
    const AffineParams& k2 = m.params.kernels[1].layers[0];
    std::vector<std::vector<double>> l2 = {
        combine(k2, bins[0], bins[1]), combine(k2, bins[2], bins[3]),
        combine(k2, bins[4], bins[5]), combine(k2, bins[5], bins[6])};
    const AffineParams& k3 = m.params.kernels[2].layers[0];
    std::vector<std::vector<double>> l3 = {combine(k3, l2[0], l2[1]),
                                           combine(k3, l2[2], l2[3])};
    std::vector<double> top = combine(m.params.kernels[3].layers[0], l3[0], l3[1]);

    std::vector<double> logits(spec.out_dim);
    for (std::size_t o = 0; o < spec.out_dim; ++o) {
        double acc = m.params.output.b[o];
        for (std::size_t j = 0; j < w; ++j) acc += m.params.output.W(o, j) * top[j];
        logits[o] = acc;
    }
    return logits;
}

}  // namespace

TEST(TdnnSpec, SubSamplingGeometry) {
    TdnnSpec spec = make_spec(3, 2);
    const std::vector<int> expected = {-13, -10, -7, -4, -1, 2, 5};
    EXPECT_EQ(spec.time_bin_offsets(), expected);
    const std::vector<std::size_t> rows = {0, 3, 6, 9, 12, 15, 18};
    EXPECT_EQ(spec.time_bin_start_rows(), rows);
    EXPECT_EQ(spec.window.length(), 23u);
    // each instantiation spans 5 frames; the last ends at the right edge
    for (int off : spec.time_bin_offsets()) {
        EXPECT_GE(off, spec.window.left);
        EXPECT_LE(off + 4, spec.window.right);
    }
    EXPECT_EQ(spec.time_bin_offsets().back() + 4, spec.window.right);
}

TEST(TdnnSpec, ValidationReportsFirstViolation) {
    TdnnSpec spec = make_spec(3, 2);
    spec.kernels[0].in_dim = 123;
    try {
        validate_tdnn_spec(spec);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("kernel 1 in_dim"), std::string::npos);
    }

    TdnnSpec bad_tree = make_spec(3, 2);
    bad_tree.tree_pairing[0][0] = {0, 9};
    EXPECT_THROW(validate_tdnn_spec(bad_tree), ConfigError);

    TdnnSpec unconsumed = make_spec(3, 2);
    unconsumed.tree_pairing[0] = {{0, 1}, {2, 3}, {4, 5}, {4, 5}};  // bin 6 dropped
    EXPECT_THROW(validate_tdnn_spec(unconsumed), ConfigError);
}

TEST(TdnnBuild, FrozenParamCounts) {
    // published widths: 653 for the all-standard system, 500 for all-resnet
    TdnnSpec baseline = make_spec(653, 6000);
    EXPECT_EQ(tdnn_param_count(baseline), 6615666u);
    TdnnSpec resnet = make_spec(500, 6000, KernelKind::resnet);
    EXPECT_EQ(tdnn_param_count(resnet), 6612000u);

    // registry total equals the closed form
    TdnnModel tiny = build_tdnn(make_spec(3, 2), 1);
    EXPECT_EQ(param_count(tiny), tdnn_param_count(tiny.spec));
    TdnnModel tiny_resnet = build_tdnn(make_spec(3, 2, KernelKind::resnet), 1);
    EXPECT_EQ(param_count(tiny_resnet), tdnn_param_count(tiny_resnet.spec));
}

TEST(TdnnBuild, LayerDepth) {
    EXPECT_EQ(layer_depth(make_spec(3, 2)), 5u);
    EXPECT_EQ(layer_depth(make_spec(3, 2, KernelKind::resnet)), 13u);
    TdnnSpec deep = make_spec(3, 2);
    deep.kernels[3].kind = KernelKind::deep_stack;
    deep.kernels[3].n_layers = 4;
    EXPECT_EQ(layer_depth(deep), 8u);
}

TEST(TdnnBuild, DeterministicFromSeed) {
    TdnnSpec spec = make_spec(4, 3);
    TdnnModel a = build_tdnn(spec, 42);
    TdnnModel b = build_tdnn(spec, 42);
    TdnnModel c = build_tdnn(spec, 43);
    std::vector<double> va, vb, vc;
    const auto flatten = [](const TdnnModel& m, std::vector<double>& out) {
        for_each_param_block(m, [&](const std::string&, const Tensor& t, const BlockMeta&) {
            out.insert(out.end(), t.data(), t.data() + t.numel());
        });
    };
    flatten(a, va);
    flatten(b, vb);
    flatten(c, vc);
    EXPECT_EQ(va, vb);
    EXPECT_NE(va, vc);
}

TEST(TdnnForward, ZeroInputZeroBiasClosedForm) {
    TdnnModel m = build_tdnn(make_spec(3, 2), 7);  // biases are zero at init
    Tensor x = Tensor::zeros({2, 23, 40});
    TdnnCache cache;
    Tensor logits = tdnn_forward(m, x, cache);

    // constant-vector propagation: every bin output is sigmoid(0) = 0.5,
    // so each tree level is one constant vector
    const auto sigma = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    std::vector<double> v(3, 0.5);
    for (int level = 1; level <= 3; ++level) {
        const AffineParams& p = m.params.kernels[level].layers[0];
        std::vector<double> next(3);
        for (std::size_t o = 0; o < 3; ++o) {
            double acc = 0.0;
            for (std::size_t j = 0; j < 3; ++j) {
                acc += p.W(o, j) * v[j] + p.W(o, 3 + j) * v[j];
            }
            next[o] = sigma(acc);
        }
        v = next;
    }
    for (std::size_t b = 0; b < 2; ++b) {
        for (std::size_t o = 0; o < 2; ++o) {
            double acc = 0.0;
            for (std::size_t j = 0; j < 3; ++j) acc += m.params.output.W(o, j) * v[j];
            EXPECT_NEAR(logits(b, o), acc, 1e-12);
        }
    }
}

TEST(TdnnForward, AllZeroParamsGiveOutputBias) {
    TdnnSpec spec = make_spec(3, 2);
    TdnnModel m{spec, make_tdnn_params(spec)};  // every weight and bias zero
    m.params.output.b = Tensor::vec({1.25, -0.5});
    Tensor x = random_input(3, spec, 99);
    TdnnCache cache;
    Tensor logits = tdnn_forward(m, x, cache);
    for (std::size_t b = 0; b < 3; ++b) {
        EXPECT_DOUBLE_EQ(logits(b, 0), 1.25);
        EXPECT_DOUBLE_EQ(logits(b, 1), -0.5);
    }
}

TEST(TdnnForward, BatchIndependence) {
    TdnnModel m = build_tdnn(make_spec(3, 2), 11);
    Tensor batch = random_input(8, m.spec, 5);
    TdnnCache cache;
    Tensor full = tdnn_forward(m, batch, cache);

    Tensor single({1, 23, 40});
    const std::size_t pick = 4;
    std::copy(&batch(pick, 0, 0), &batch(pick, 0, 0) + 23 * 40, single.data());
    TdnnCache cache1;
    Tensor one = tdnn_forward(m, single, cache1);
    for (std::size_t o = 0; o < 2; ++o) EXPECT_EQ(one(0, o), full(pick, o));
}

TEST(TdnnForward, MatchesStraightLineReference) {
    TdnnModel m = build_tdnn(make_spec(3, 2), 23);
    Tensor x = random_input(4, m.spec, 17);
    TdnnCache cache;
    Tensor logits = tdnn_forward(m, x, cache);
    for (std::size_t b = 0; b < 4; ++b) {
        std::vector<double> ref = reference_eval(m, x, b);
        for (std::size_t o = 0; o < 2; ++o) EXPECT_NEAR(logits(b, o), ref[o], 1e-12);
    }
}

TEST(TdnnForward, WrongWindowLengthIsDimensionError) {
    TdnnModel m = build_tdnn(make_spec(3, 2), 1);
    TdnnCache cache;
    EXPECT_THROW(tdnn_forward(m, Tensor::zeros({1, 22, 40}), cache), DimensionError);
    EXPECT_THROW(tdnn_forward(m, Tensor::zeros({1, 23, 39}), cache), DimensionError);
}

TEST(TdnnForward, WeightSharingProbe) {
    // constant-in-time input: every bin sees the same 200-dim stack, so all
    // seven instantiations produce identical rows; perturbing kernel 1
    // changes them all identically
    TdnnModel m = build_tdnn(make_spec(3, 2), 31);
    Tensor x({1, 23, 40});
    std::mt19937_64 rng(8);
    std::normal_distribution<double> d(0.0, 1.0);
    for (std::size_t f = 0; f < 40; ++f) {
        const double v = d(rng);
        for (std::size_t r = 0; r < 23; ++r) x(0, r, f) = v;
    }
    TdnnCache cache;
    tdnn_forward(m, x, cache);
    Tensor before = cache.kernel1[0].activations.back();
    for (std::size_t t = 1; t < 7; ++t) {
        const Tensor& other = cache.kernel1[t].activations.back();
        for (std::size_t i = 0; i < before.numel(); ++i) EXPECT_EQ(before[i], other[i]);
    }

    m.params.kernels[0].layers[0].W(1, 17) += 0.25;
    TdnnCache cache2;
    tdnn_forward(m, x, cache2);
    for (std::size_t t = 0; t < 7; ++t) {
        const Tensor& after = cache2.kernel1[t].activations.back();
        bool changed = false;
        for (std::size_t i = 0; i < before.numel(); ++i) {
            if (before[i] != after[i]) changed = true;
            EXPECT_EQ(after[i], cache2.kernel1[0].activations.back()[i]);
        }
        EXPECT_TRUE(changed) << "bin " << t << " did not react to the shared update";
    }
}

TEST(TdnnBackward, SharedGradientIsMeanOfInstantiations) {
    TdnnModel m = build_tdnn(make_spec(3, 2), 13);
    Tensor x = random_input(3, m.spec, 29);
    TdnnCache cache;
    Tensor logits = tdnn_forward(m, x, cache);
    Tensor gl(logits.shape());
    std::mt19937_64 rng(55);
    std::normal_distribution<double> d(0.0, 1.0);
    for (std::size_t i = 0; i < gl.numel(); ++i) gl[i] = d(rng);

    PerInstantiationGrads instr;
    ModelGrads grads = tdnn_backward(m, cache, gl, &instr);
    ASSERT_EQ(instr.kernel1.size(), 7u);

    const Tensor& reported = grads.g.kernels[0].layers[0].W;
    Tensor mean(reported.shape());
    for (const auto& per_bin : instr.kernel1) {
        accumulate(mean, per_bin.layers[0].W);
    }
    scale(mean, 1.0 / 7.0);
    double max_diff = 0.0;
    for (std::size_t i = 0; i < mean.numel(); ++i) {
        max_diff = std::max(max_diff, std::abs(mean[i] - reported[i]));
    }
    EXPECT_LT(max_diff, 1e-12);
}

TEST(TdnnBackward, MeanNotSumAtDifferentInstantiationCounts) {
    // two-bin window: offsets {-4, -1}, tree reduces 2 -> 1
    TdnnSpec spec;
    spec.window = TdnnWindow{-4, 3, 5, 3};
    spec.tree_pairing = {{{0, 1}}};
    spec.feat_dim = 40;
    spec.out_dim = 2;
    spec.n_time_bins = 2;
    spec.kernels = {KernelConfig{KernelKind::standard, 200, 3, 1},
                    KernelConfig{KernelKind::standard, 6, 3, 1}};
    TdnnModel m = build_tdnn(spec, 3);

    Tensor x = random_input(2, spec, 41);
    TdnnCache cache;
    Tensor logits = tdnn_forward(m, x, cache);
    Tensor gl = Tensor::full(logits.shape(), 0.5);
    PerInstantiationGrads instr;
    ModelGrads grads = tdnn_backward(m, cache, gl, &instr);
    ASSERT_EQ(instr.kernel1.size(), 2u);
    // reported = (g0 + g1) / 2, not the sum
    const Tensor& reported = grads.g.kernels[0].layers[0].W;
    for (std::size_t i = 0; i < reported.numel(); ++i) {
        const double mean =
            0.5 * (instr.kernel1[0].layers[0].W[i] + instr.kernel1[1].layers[0].W[i]);
        EXPECT_NEAR(reported[i], mean, 1e-14);
    }
}

TEST(TdnnBackward, ZeroUpstreamGivesZeroGrads) {
    TdnnModel m = build_tdnn(make_spec(3, 2), 19);
    Tensor x = random_input(2, m.spec, 3);
    TdnnCache cache;
    tdnn_forward(m, x, cache);
    ModelGrads grads = tdnn_backward(m, cache, Tensor::zeros({2, 2}));
    for_each_param_block(m.spec, grads.g,
                         [&](const std::string&, const Tensor& t, const BlockMeta&) {
                             for (std::size_t i = 0; i < t.numel(); ++i) {
                                 EXPECT_EQ(t[i], 0.0);
                             }
                         });
}

TEST(TdnnBackward, StaleCacheIsUsageError) {
    TdnnModel m = build_tdnn(make_spec(3, 2), 19);
    TdnnCache cache;  // no forward ran
    EXPECT_THROW(tdnn_backward(m, cache, Tensor::zeros({1, 2})), UsageError);
}

TEST(TdnnBackward, EndToEndFiniteDifference) {
    for (KernelKind kind : {KernelKind::standard, KernelKind::resnet}) {
        TdnnModel m = build_tdnn(make_spec(3, 3, kind), 57);
        GradCheckReport report = run_grad_check(m, 2, 91, 1e-5);
        EXPECT_LT(report.worst(), 1e-4) << kernel_kind_name(kind);
    }
}
