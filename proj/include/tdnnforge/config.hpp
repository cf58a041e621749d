#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tdnnforge/error.hpp"
#include "tdnnforge/features.hpp"
#include "tdnnforge/tdnn.hpp"
#include "tdnnforge/training.hpp"

// Architecture configuration: JSON documents (strict schema, unknown keys
// rejected) and the named presets encoding the published systems.

namespace tdnnforge {

struct ArchitectureConfig {
    TdnnSpec spec;
    TrainConfig training;
    FbankConfig features;
    std::string preset;  // empty when loaded from a file
};

namespace cfgdetail {

using nlohmann::json;

inline void reject_unknown_keys(const json& obj, const std::set<std::string>& known,
                                const std::string& where) {
    if (!obj.is_object()) throw ConfigError("config: " + where + " must be an object");
    for (const auto& [key, _] : obj.items()) {
        if (!known.count(key)) {
            throw ConfigError("config: unknown key \"" + key + "\" in " + where);
        }
    }
}

template <typename T>
inline T get_or(const json& obj, const std::string& key, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config: key \"" + key + "\" has the wrong type");
    }
}

inline KernelKind parse_kernel_kind(const std::string& s, std::size_t& n_layers) {
    if (s == "standard") return KernelKind::standard;
    if (s == "double") return KernelKind::double_kernel;
    if (s == "resnet") return KernelKind::resnet;
    if (s.rfind("deep_stack(", 0) == 0 && s.back() == ')') {
        n_layers = std::size_t(std::stoul(s.substr(11, s.size() - 12)));
        return KernelKind::deep_stack;
    }
    throw ConfigError("config: unknown kernel kind \"" + s + "\"");
}

inline std::string kernel_kind_string(const KernelConfig& k) {
    if (k.kind == KernelKind::deep_stack) {
        return "deep_stack(" + std::to_string(k.n_layers) + ")";
    }
    return kernel_kind_name(k.kind);
}

inline FrontendKind parse_frontend_kind(const std::string& s) {
    for (FrontendKind k :
         {FrontendKind::none, FrontendKind::banded_cnn, FrontendKind::grid_rnn,
          FrontendKind::fd_grid_rnn, FrontendKind::bd_fd_grid_rnn, FrontendKind::tf_rnn,
          FrontendKind::coupled_grid}) {
        if (s == frontend_kind_name(k)) return k;
    }
    throw ConfigError("config: unknown frontend kind \"" + s + "\"");
}

}  // namespace cfgdetail

// Fills the derived fields: grid flags and geometry from the frontend kind,
// kernel input dims from the frontend output and kernel widths.
inline void wire_architecture(ArchitectureConfig& cfg) {
    TdnnSpec& spec = cfg.spec;
    spec.n_time_bins = spec.time_bin_offsets().size();
    GridRnnConfig& g = spec.frontend.grid;
    g.n_time_bins = spec.n_time_bins;
    g.context = spec.window.context;
    g.frequency_dependent = spec.frontend.kind == FrontendKind::fd_grid_rnn ||
                            spec.frontend.kind == FrontendKind::bd_fd_grid_rnn;
    g.bidirectional = spec.frontend.kind == FrontendKind::bd_fd_grid_rnn;
    if (!spec.kernels.empty()) {
        spec.kernels[0].in_dim =
            frontend_output_dim(spec.frontend, spec.window.context, spec.feat_dim);
        for (std::size_t i = 1; i < spec.kernels.size(); ++i) {
            spec.kernels[i].in_dim = 2 * spec.kernels[i - 1].width;
        }
    }
}

inline ArchitectureConfig parse_architecture_config(const std::string& text,
                                                    const std::string& origin) {
    using cfgdetail::get_or;
    using cfgdetail::reject_unknown_keys;
    using nlohmann::json;

    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError("config " + origin + ": " + e.what());
    }
    reject_unknown_keys(doc, {"frontend", "tdnn", "output", "training", "features"}, origin);

    ArchitectureConfig cfg;
    TdnnSpec& spec = cfg.spec;

    if (doc.contains("tdnn")) {
        const json& t = doc.at("tdnn");
        reject_unknown_keys(
            t, {"kernels", "width", "window", "tree_pairing", "feat_dim"}, "tdnn");
        if (t.contains("window")) {
            const json& w = t.at("window");
            reject_unknown_keys(w, {"left", "right", "context", "shift"}, "tdnn.window");
            spec.window.left = get_or<int>(w, "left", -13);
            spec.window.right = get_or<int>(w, "right", 9);
            spec.window.context = get_or<std::size_t>(w, "context", 5);
            spec.window.shift = get_or<std::size_t>(w, "shift", 3);
        }
        spec.feat_dim = get_or<std::size_t>(t, "feat_dim", 40);
        const std::size_t width = get_or<std::size_t>(t, "width", 653);
        std::vector<std::string> kinds =
            get_or<std::vector<std::string>>(t, "kernels", {"standard", "standard",
                                                            "standard", "standard"});
        spec.kernels.clear();
        for (const auto& s : kinds) {
            KernelConfig k;
            k.n_layers = 1;
            k.kind = cfgdetail::parse_kernel_kind(s, k.n_layers);
            k.width = width;
            spec.kernels.push_back(k);
        }
        if (t.contains("tree_pairing")) {
            spec.tree_pairing.clear();
            for (const auto& layer : t.at("tree_pairing")) {
                std::vector<std::pair<std::size_t, std::size_t>> pairs;
                for (const auto& pr : layer) {
                    if (!pr.is_array() || pr.size() != 2) {
                        throw ConfigError("config: tree_pairing entries must be [a, b] pairs");
                    }
                    pairs.emplace_back(pr.at(0).get<std::size_t>(),
                                       pr.at(1).get<std::size_t>());
                }
                spec.tree_pairing.push_back(std::move(pairs));
            }
        }
    }

    if (doc.contains("frontend")) {
        const json& f = doc.at("frontend");
        reject_unknown_keys(f,
                            {"kind", "sigma_width", "linear_width", "freq_bin_size",
                             "freq_bin_starts", "band_size", "band_shift", "n_bands",
                             "filter_time", "filter_freq", "n_filters", "pool_size"},
                            "frontend");
        spec.frontend.kind =
            cfgdetail::parse_frontend_kind(get_or<std::string>(f, "kind", "none"));
        GridRnnConfig& g = spec.frontend.grid;
        g.sigma_width = get_or<std::size_t>(f, "sigma_width", 250);
        g.linear_width = get_or<std::size_t>(f, "linear_width", 500);
        g.freq_bin_size = get_or<std::size_t>(f, "freq_bin_size", 10);
        g.freq_bin_starts = get_or<std::vector<std::size_t>>(f, "freq_bin_starts",
                                                             {0, 8, 15, 23, 30});
        g.n_freq_bins = g.freq_bin_starts.size();
        BandedConvConfig& b = spec.frontend.banded;
        b.band_size = get_or<std::size_t>(f, "band_size", 10);
        b.band_shift = get_or<std::size_t>(f, "band_shift", 5);
        b.n_bands = get_or<std::size_t>(f, "n_bands", 7);
        b.filter_time = get_or<std::size_t>(f, "filter_time", 5);
        b.filter_freq = get_or<std::size_t>(f, "filter_freq", 5);
        b.n_filters = get_or<std::size_t>(f, "n_filters", 100);
        b.pool_size = get_or<std::size_t>(f, "pool_size", 2);
    }

    if (doc.contains("output")) {
        const json& o = doc.at("output");
        reject_unknown_keys(o, {"n_classes"}, "output");
        spec.out_dim = get_or<std::size_t>(o, "n_classes", 6000);
    } else {
        spec.out_dim = 6000;
    }

    if (doc.contains("training")) {
        const json& tr = doc.at("training");
        reject_unknown_keys(tr,
                            {"initial_lr", "minibatch_frames", "l2_lambda", "max_epochs",
                             "seed", "threads", "scheduler"},
                            "training");
        cfg.training.initial_lr = get_or<double>(tr, "initial_lr", 2e-3);
        cfg.training.minibatch_frames = get_or<std::size_t>(tr, "minibatch_frames", 800);
        cfg.training.l2_lambda = get_or<double>(tr, "l2_lambda", 1e-5);
        cfg.training.max_epochs = get_or<std::size_t>(tr, "max_epochs", 20);
        cfg.training.seed = get_or<std::uint64_t>(tr, "seed", 1);
        cfg.training.threads = get_or<std::size_t>(tr, "threads", 1);
        if (tr.contains("scheduler")) {
            const json& s = tr.at("scheduler");
            reject_unknown_keys(s, {"ramp_threshold", "stop_threshold", "halving_factor"},
                                "training.scheduler");
            cfg.training.scheduler.ramp_threshold = get_or<double>(s, "ramp_threshold", 0.005);
            cfg.training.scheduler.stop_threshold = get_or<double>(s, "stop_threshold", 0.001);
            cfg.training.scheduler.halving_factor = get_or<double>(s, "halving_factor", 0.5);
        }
    }

    if (doc.contains("features")) {
        const json& fe = doc.at("features");
        reject_unknown_keys(
            fe, {"window_ms", "hop_ms", "n_fft", "fmin_hz", "fmax_hz", "log_floor"},
            "features");
        cfg.features.window_ms = get_or<double>(fe, "window_ms", 25.0);
        cfg.features.hop_ms = get_or<double>(fe, "hop_ms", 10.0);
        cfg.features.n_fft = get_or<std::size_t>(fe, "n_fft", 0);
        cfg.features.fmin_hz = get_or<double>(fe, "fmin_hz", 20.0);
        cfg.features.fmax_hz = get_or<double>(fe, "fmax_hz", 0.0);
        cfg.features.log_floor = get_or<double>(fe, "log_floor", 1e-10);
    }

    wire_architecture(cfg);
    validate_tdnn_spec(cfg.spec);
    cfg.training.validate();
    return cfg;
}

inline ArchitectureConfig load_architecture_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_architecture_config(ss.str(), path);
}

// Canonical JSON form (sorted keys); its digest identifies the architecture
// in checkpoints.
inline std::string architecture_config_json(const ArchitectureConfig& cfg) {
    using nlohmann::json;
    json doc;
    const TdnnSpec& spec = cfg.spec;

    json kernels = json::array();
    for (const auto& k : spec.kernels) kernels.push_back(cfgdetail::kernel_kind_string(k));
    json pairing = json::array();
    for (const auto& layer : spec.tree_pairing) {
        json jl = json::array();
        for (const auto& [a, b] : layer) jl.push_back({a, b});
        pairing.push_back(jl);
    }
    doc["tdnn"] = {{"kernels", kernels},
                   {"width", spec.kernels.empty() ? 0 : spec.kernels[0].width},
                   {"window",
                    {{"left", spec.window.left},
                     {"right", spec.window.right},
                     {"context", spec.window.context},
                     {"shift", spec.window.shift}}},
                   {"tree_pairing", pairing},
                   {"feat_dim", spec.feat_dim}};
    doc["frontend"] = {{"kind", frontend_kind_name(spec.frontend.kind)},
                       {"sigma_width", spec.frontend.grid.sigma_width},
                       {"linear_width", spec.frontend.grid.linear_width},
                       {"freq_bin_size", spec.frontend.grid.freq_bin_size},
                       {"freq_bin_starts", spec.frontend.grid.freq_bin_starts},
                       {"band_size", spec.frontend.banded.band_size},
                       {"band_shift", spec.frontend.banded.band_shift},
                       {"n_bands", spec.frontend.banded.n_bands},
                       {"filter_time", spec.frontend.banded.filter_time},
                       {"filter_freq", spec.frontend.banded.filter_freq},
                       {"n_filters", spec.frontend.banded.n_filters},
                       {"pool_size", spec.frontend.banded.pool_size}};
    doc["output"] = {{"n_classes", spec.out_dim}};
    doc["training"] = {{"initial_lr", cfg.training.initial_lr},
                       {"minibatch_frames", cfg.training.minibatch_frames},
                       {"l2_lambda", cfg.training.l2_lambda},
                       {"max_epochs", cfg.training.max_epochs},
                       {"seed", cfg.training.seed},
                       {"threads", cfg.training.threads},
                       {"scheduler",
                        {{"ramp_threshold", cfg.training.scheduler.ramp_threshold},
                         {"stop_threshold", cfg.training.scheduler.stop_threshold},
                         {"halving_factor", cfg.training.scheduler.halving_factor}}}};
    doc["features"] = {{"window_ms", cfg.features.window_ms},
                       {"hop_ms", cfg.features.hop_ms},
                       {"n_fft", cfg.features.n_fft},
                       {"fmin_hz", cfg.features.fmin_hz},
                       {"fmax_hz", cfg.features.fmax_hz},
                       {"log_floor", cfg.features.log_floor}};
    return doc.dump(2);
}

// Digest over the architecture sections only (frontend, tdnn, output).
// Training hyperparameters may change across a resume; the model shape may
// not.
inline std::uint64_t architecture_digest(const ArchitectureConfig& cfg) {
    nlohmann::json doc = nlohmann::json::parse(architecture_config_json(cfg));
    nlohmann::json arch;
    arch["frontend"] = doc.at("frontend");
    arch["tdnn"] = doc.at("tdnn");
    arch["output"] = doc.at("output");
    return fnv1a64(arch.dump());
}

// ---- presets ----

inline const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names = {
        "tdnn-baseline",          "double-tdnn",
        "resnet-tdnn",            "tdnn-deep",
        "resnet-tdnn-deep",       "cnn-tdnn",
        "grid-rnn-tdnn",          "fd-grid-rnn-resnet-tdnn",
        "bd-fd-grid-rnn-resnet-tdnn"};
    return names;
}

namespace cfgdetail {

inline ArchitectureConfig base_config(FrontendKind frontend, const std::string& kernel_kind,
                                      std::size_t width, const std::string& kernel4_kind = "") {
    ArchitectureConfig cfg;
    TdnnSpec& spec = cfg.spec;
    spec.window = TdnnWindow{};
    spec.tree_pairing = default_tree_pairing();
    spec.feat_dim = 40;
    spec.out_dim = 6000;
    spec.frontend.kind = frontend;
    spec.frontend.banded = BandedConvConfig{};
    spec.frontend.grid = GridRnnConfig{};
    spec.kernels.clear();
    for (int i = 0; i < 4; ++i) {
        const std::string kind_str =
            (i == 3 && !kernel4_kind.empty()) ? kernel4_kind : kernel_kind;
        KernelConfig k;
        k.n_layers = 1;
        k.kind = parse_kernel_kind(kind_str, k.n_layers);
        k.width = width;
        spec.kernels.push_back(k);
    }
    wire_architecture(cfg);
    return cfg;
}

inline void set_width(ArchitectureConfig& cfg, std::size_t width) {
    for (auto& k : cfg.spec.kernels) k.width = width;
    wire_architecture(cfg);
}

}  // namespace cfgdetail

// The published widths fix the baseline's total; presets whose width is not
// published are solved to the nearest integer width matching that budget.
constexpr std::size_t kParamBudget = 6615666;  // tdnn-baseline total

inline std::size_t solve_width_for_budget(ArchitectureConfig cfg, std::size_t target) {
    std::size_t lo = 1, hi = 4096;
    const auto count_at = [&](std::size_t w) {
        cfgdetail::set_width(cfg, w);
        return tdnn_param_count(cfg.spec);
    };
    while (lo < hi) {  // smallest width with count >= target (count is increasing)
        const std::size_t mid = (lo + hi) / 2;
        if (count_at(mid) >= target) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    if (lo > 1) {
        const std::size_t over = count_at(lo) - target;
        const std::size_t under = target - count_at(lo - 1);
        if (under < over) return lo - 1;
    }
    return lo;
}

inline ArchitectureConfig make_preset(const std::string& name) {
    using cfgdetail::base_config;
    ArchitectureConfig cfg;
    if (name == "tdnn-baseline") {
        cfg = base_config(FrontendKind::none, "standard", 653);
    } else if (name == "double-tdnn") {
        cfg = base_config(FrontendKind::none, "double", 653);
        cfgdetail::set_width(cfg, solve_width_for_budget(cfg, kParamBudget));
    } else if (name == "resnet-tdnn") {
        cfg = base_config(FrontendKind::none, "resnet", 500);
    } else if (name == "tdnn-deep") {
        cfg = base_config(FrontendKind::none, "standard", 653, "deep_stack(4)");
        cfgdetail::set_width(cfg, solve_width_for_budget(cfg, kParamBudget));
    } else if (name == "resnet-tdnn-deep") {
        cfg = base_config(FrontendKind::none, "resnet", 500, "deep_stack(3)");
        cfgdetail::set_width(cfg, solve_width_for_budget(cfg, kParamBudget));
    } else if (name == "cnn-tdnn") {
        cfg = base_config(FrontendKind::banded_cnn, "standard", 653);
    } else if (name == "grid-rnn-tdnn") {
        cfg = base_config(FrontendKind::grid_rnn, "standard", 653);
    } else if (name == "fd-grid-rnn-resnet-tdnn") {
        cfg = base_config(FrontendKind::fd_grid_rnn, "resnet", 500);
    } else if (name == "bd-fd-grid-rnn-resnet-tdnn") {
        cfg = base_config(FrontendKind::bd_fd_grid_rnn, "resnet", 500);
    } else {
        throw ConfigError("unknown preset \"" + name + "\"; see list-presets");
    }
    cfg.preset = name;
    validate_tdnn_spec(cfg.spec);
    return cfg;
}

// Shrinks every width for fast gradient checking and smoke runs; geometry
// (window, bands, bins) is unchanged.
inline ArchitectureConfig tiny_scaled(ArchitectureConfig cfg) {
    for (auto& k : cfg.spec.kernels) k.width = 4;
    cfg.spec.frontend.grid.sigma_width = 3;
    cfg.spec.frontend.grid.linear_width = 4;
    cfg.spec.frontend.banded.n_filters = 2;
    cfg.spec.out_dim = 5;
    wire_architecture(cfg);
    validate_tdnn_spec(cfg.spec);
    return cfg;
}

}  // namespace tdnnforge
