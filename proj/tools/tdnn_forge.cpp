// Command-line surface: training, evaluation, parameter counting, gradient
// checking, feature extraction and preset listing.
//
// Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 numeric
// failure.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tdnnforge/checkpoint.hpp"
#include "tdnnforge/config.hpp"
#include "tdnnforge/data.hpp"
#include "tdnnforge/error.hpp"
#include "tdnnforge/features.hpp"
#include "tdnnforge/gradcheck.hpp"
#include "tdnnforge/log.hpp"
#include "tdnnforge/tdnn.hpp"
#include "tdnnforge/training.hpp"

namespace fs = std::filesystem;
using namespace tdnnforge;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

struct CommonArgs {
    std::string config_path;
    std::string preset;
    std::string scale = "paper";  // tiny | paper
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> threads;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool with_scale = true) {
    cmd->add_option("--config", args.config_path, "architecture config JSON");
    cmd->add_option("--preset", args.preset, "named preset (see list-presets)");
    if (with_scale) {
        cmd->add_option("--scale", args.scale, "tiny|paper width scaling")
            ->check(CLI::IsMember({"tiny", "paper"}));
    }
    cmd->add_option("--seed", args.seed, "seed override");
    cmd->add_option("--threads", args.threads, "fixed-order parallel batch evaluation");
}

ArchitectureConfig resolve_config(const CommonArgs& args) {
    if (args.config_path.empty() == args.preset.empty()) {
        throw ConfigError("exactly one of --config or --preset is required");
    }
    ArchitectureConfig cfg = args.config_path.empty()
                                 ? make_preset(args.preset)
                                 : load_architecture_config(args.config_path);
    if (args.scale == "tiny") cfg = tiny_scaled(cfg);
    if (args.seed) cfg.training.seed = *args.seed;
    if (args.threads) cfg.training.threads = *args.threads;
    return cfg;
}

std::string human_count(std::size_t n) {
    char buf[32];
    if (n >= 1000000) {
        std::snprintf(buf, sizeof buf, "%.2fM", double(n) / 1e6);
    } else if (n >= 1000) {
        std::snprintf(buf, sizeof buf, "%.1fK", double(n) / 1e3);
    } else {
        std::snprintf(buf, sizeof buf, "%zu", n);
    }
    return buf;
}

// ---- train ----

int cmd_train(const CommonArgs& common, const std::string& data_path,
              const std::string& out_dir, const std::string& resume_path) {
    ArchitectureConfig cfg = resolve_config(common);
    Dataset ds = load_archive(data_path);
    if (ds.empty()) throw InputError("train: archive " + data_path + " is empty");
    for (const auto& s : ds) {
        for (std::uint32_t l : s.labels) {
            if (l >= cfg.spec.out_dim) {
                throw ConfigError("train: label " + std::to_string(l) + " in " +
                                  s.utterance_id + " exceeds n_classes " +
                                  std::to_string(cfg.spec.out_dim));
            }
        }
    }
    SplitDataset split = split_dataset(ds);
    if (split.val.empty() || split.train.empty()) {
        throw InputError("train: utterance-hash split left an empty partition; "
                         "need more utterances");
    }
    log_info("training on " + std::to_string(total_frames(split.train)) + " frames, " +
             "validating on " + std::to_string(total_frames(split.val)));

    fs::create_directories(out_dir);
    TdnnModel model = build_tdnn(cfg.spec, cfg.training.seed);
    std::size_t start_epoch = 0;
    NewbobState resume_state;
    const NewbobState* resume = nullptr;
    if (!resume_path.empty()) {
        LoadedCheckpoint ckpt = load_checkpoint(resume_path);
        if (ckpt.digest != architecture_digest(cfg)) {
            throw ConfigError("resume: checkpoint architecture digest does not match the "
                              "requested config; refusing to continue");
        }
        model = std::move(ckpt.model);
        start_epoch = ckpt.state.epoch;
        resume_state = ckpt.state.scheduler;
        resume = &resume_state;
        log_info("resumed from " + resume_path + " at epoch " +
                 std::to_string(start_epoch));
    }

    std::ofstream history(fs::path(out_dir) / "history.txt",
                          resume ? std::ios::app : std::ios::trunc);
    if (!history) throw InputError("train: cannot write history in " + out_dir);

    TrainHooks hooks;
    hooks.echo = &std::cout;
    hooks.on_epoch = [&](const EpochEnd& e, const TdnnModel& m) {
        format_epoch_record(history, e.record);
        history.flush();
        CheckpointState state{e.scheduler, e.record.epoch};
        save_checkpoint((fs::path(out_dir) / "checkpoint-last.tdnc").string(), m, cfg,
                        state);
        if (e.is_best) {
            save_checkpoint((fs::path(out_dir) / "checkpoint-best.tdnc").string(), m, cfg,
                            state);
        }
    };

    TrainResult result =
        train(model, split.train, split.val, cfg.training, hooks, start_epoch, resume);
    if (result.history.empty() && !resume) {
        throw ConfigError("train: no epochs ran; check max_epochs");
    }
    std::cout << "done: " << result.history.size() << " epoch(s), checkpoints in "
              << out_dir << "\n";
    return kExitOk;
}

// ---- eval ----

int cmd_eval(const std::string& checkpoint_path, const std::string& data_path,
             std::size_t batch_frames) {
    LoadedCheckpoint ckpt = load_checkpoint(checkpoint_path);
    Dataset ds = load_archive(data_path);
    if (ds.empty()) throw InputError("eval: archive " + data_path + " is empty");
    for (const auto& s : ds) {
        for (std::uint32_t l : s.labels) {
            if (l >= ckpt.model.spec.out_dim) {
                throw ConfigError("eval: label " + std::to_string(l) +
                                  " exceeds the model's n_classes " +
                                  std::to_string(ckpt.model.spec.out_dim));
            }
        }
    }
    EvalResult r = evaluate(ckpt.model, ds, batch_frames);
    char buf[128];
    std::snprintf(buf, sizeof buf, "frames=%zu frame_accuracy=%.6f mean_cross_entropy=%.8f",
                  r.n_frames, r.frame_accuracy, r.mean_cross_entropy);
    std::cout << buf << "\n";
    return kExitOk;
}

// ---- param-count ----

int cmd_param_count(const CommonArgs& common) {
    ArchitectureConfig cfg = resolve_config(common);
    const TdnnSpec& spec = cfg.spec;
    const std::size_t frontend =
        frontend_param_count(spec.frontend, spec.window.context, spec.feat_dim);
    std::printf("%-22s %14s\n", "module", "parameters");
    if (spec.frontend.kind != FrontendKind::none) {
        const std::string label =
            std::string("frontend (") + frontend_kind_name(spec.frontend.kind) + ")";
        std::printf("%-22s %14zu\n", label.c_str(), frontend);
        if (spec.frontend.kind == FrontendKind::banded_cnn) {
            std::printf("%-22s %14zu\n", "  conv weights",
                        spec.frontend.banded.weight_count());
            std::printf("%-22s %14zu\n", "  conv biases", spec.frontend.banded.bias_count());
        }
    }
    for (std::size_t k = 0; k < spec.kernels.size(); ++k) {
        const std::string label = "kernel " + std::to_string(k + 1) + " (" +
                                  kernel_kind_name(spec.kernels[k].kind) + ")";
        std::printf("%-22s %14zu\n", label.c_str(), kernel_param_count(spec.kernels[k]));
    }
    std::printf("%-22s %14zu\n", "output layer",
                spec.kernels.back().width * spec.out_dim + spec.out_dim);
    const std::size_t total = tdnn_param_count(spec);
    std::printf("%-22s %14zu  (%s)\n", "total", total, human_count(total).c_str());
    std::printf("width: %zu\n", spec.kernels.empty() ? std::size_t(0)
                                                     : spec.kernels[0].width);

    if (!cfg.preset.empty() && common.scale != "tiny") {
        if (spec.frontend.kind == FrontendKind::none) {
            std::printf("published total: 6.6M (this config: %s)\n",
                        human_count(total).c_str());
        }
        if (spec.frontend.kind == FrontendKind::banded_cnn) {
            std::printf("published conv weight count: 17.5K (this config: %zu)\n",
                        spec.frontend.banded.weight_count());
        }
        if (spec.frontend.kind == FrontendKind::bd_fd_grid_rnn) {
            std::printf(
                "published frontend count: 1.4M; this layout gives %zu (%s): per "
                "direction %zu frequency-dependent sigma-RNN triples plus one shared "
                "linear combination RNN, directions independent\n",
                frontend, human_count(frontend).c_str(), spec.frontend.grid.n_freq_bins);
        }
    }
    return kExitOk;
}

// ---- grad-check ----

int cmd_grad_check(const CommonArgs& common, std::size_t batch) {
    std::vector<std::pair<std::string, ArchitectureConfig>> targets;
    if (!common.config_path.empty() || !common.preset.empty()) {
        ArchitectureConfig cfg = resolve_config(common);
        targets.emplace_back(cfg.preset.empty() ? common.config_path : cfg.preset, cfg);
    } else {
        for (const auto& name : preset_names()) {
            CommonArgs one = common;
            one.preset = name;
            targets.emplace_back(name, resolve_config(one));
        }
    }

    const double tol = 1e-4, eps = 1e-5;
    bool all_passed = true;
    for (auto& [name, cfg] : targets) {
        if (common.scale != "tiny") {
            log_info("grad-check at paper scale is expensive; consider --scale tiny");
        }
        TdnnModel model = build_tdnn(cfg.spec, cfg.training.seed);
        GradCheckReport report = run_grad_check(model, batch, cfg.training.seed + 17, eps);
        const bool passed = report.passed(tol);
        all_passed = all_passed && passed;
        std::printf("%-30s max_rel_err=%.3e  %s\n", name.c_str(), report.worst(),
                    passed ? "ok" : "FAIL");
        for (const auto& block : report.blocks) {
            if (block.max_rel_err >= tol) {
                std::printf("  FAIL %-28s inst=%zu rel_err=%.3e\n", block.name.c_str(),
                            block.instantiations, block.max_rel_err);
            } else {
                log_debug("  " + block.name + " rel_err " +
                          std::to_string(block.max_rel_err));
            }
        }
    }
    return all_passed ? kExitOk : kExitCheckFailed;
}

// ---- features ----

int cmd_features(const std::string& wav_dir, const std::string& out_path,
                 const CommonArgs& common) {
    FbankConfig fbank;
    if (!common.config_path.empty() || !common.preset.empty()) {
        fbank = resolve_config(common).features;
    }
    std::vector<fs::path> wavs;
    for (const auto& entry : fs::directory_iterator(wav_dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".wav") {
            wavs.push_back(entry.path());
        }
    }
    std::sort(wavs.begin(), wavs.end());
    if (wavs.empty()) throw InputError("features: no .wav files in " + wav_dir);

    Dataset ds;
    std::size_t failures = 0;
    for (const auto& path : wavs) {
        try {
            std::ifstream in(path, std::ios::binary);
            std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                             std::istreambuf_iterator<char>());
            WavData wav = parse_wav(bytes, path.filename().string());
            FrameSequence seq;
            const std::string stem = path.stem().string();
            seq.utterance_id = stem;
            // segment = stem up to the first '_' so "showA_utt1.wav" and
            // "showA_utt2.wav" share variance statistics
            seq.segment_id = stem.substr(0, stem.find('_'));
            seq.sample_rate_src = wav.rate;
            seq.frames = log_mel_fbank(wav.samples, wav.rate, fbank);
            seq.labels.assign(seq.n_frames(), 0);  // background; labels are external
            ds.push_back(std::move(seq));
        } catch (const Error& e) {
            ++failures;
            std::cerr << "warning: skipping " << path.string() << ": " << e.what() << "\n";
        }
    }
    if (ds.empty()) {
        throw InputError("features: all " + std::to_string(failures) + " wav files failed");
    }
    NormalizeResult norm = normalize(ds);
    for (const auto& [seg, dim] : norm.report.floored) {
        log_info("variance floored for segment " + seg + " dim " + std::to_string(dim));
    }
    // quantize through f32 so the archive round-trips bitwise
    for (auto& s : norm.sequences) {
        for (std::size_t i = 0; i < s.frames.numel(); ++i) {
            s.frames[i] = double(float(s.frames[i]));
        }
    }
    save_archive(norm.sequences, out_path);
    std::cout << "wrote " << norm.sequences.size() << " utterance(s) to " << out_path;
    if (failures) std::cout << " (" << failures << " failed)";
    std::cout << "\n";
    return kExitOk;
}

// ---- synth ----

int cmd_synth(const std::string& out_path, std::size_t n_classes, std::size_t utterances,
              std::size_t frames, double noise, std::uint64_t seed) {
    SynthTaskConfig cfg;
    cfg.n_classes = n_classes;
    cfg.n_utterances = utterances;
    cfg.frames_per_utterance = frames;
    cfg.noise_std = noise;
    cfg.seed = seed;
    Dataset ds = generate(cfg);
    save_archive(ds, out_path);
    std::cout << "wrote " << ds.size() << " utterance(s), " << total_frames(ds)
              << " frames to " << out_path << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"deep-kernel sub-sampled TDNN toolkit"};
    app.require_subcommand(1);

    CommonArgs train_args, count_args, check_args, feat_args;
    check_args.scale = "tiny";  // gradient checks default to tiny widths
    std::string data_path, out_dir, resume_path, checkpoint_path, wav_dir, out_path;
    std::size_t batch = 2, eval_batch = 800;
    std::size_t synth_classes = 8, synth_utts = 100, synth_frames = 500;
    double synth_noise = 0.5;
    std::uint64_t synth_seed = 1;

    CLI::App* train_cmd = app.add_subcommand("train", "train a model on an archive");
    add_common(train_cmd, train_args);
    train_cmd->add_option("--data", data_path, "feature archive")->required();
    train_cmd->add_option("--out", out_dir, "output directory")->required();
    train_cmd->add_option("--resume", resume_path, "checkpoint to continue from");

    CLI::App* eval_cmd = app.add_subcommand("eval", "frame accuracy and cross entropy");
    eval_cmd->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
    eval_cmd->add_option("--data", data_path, "feature archive")->required();
    eval_cmd->add_option("--batch-frames", eval_batch, "evaluation batch size");

    CLI::App* count_cmd = app.add_subcommand("param-count", "per-module parameter counts");
    add_common(count_cmd, count_args);

    CLI::App* check_cmd =
        app.add_subcommand("grad-check", "finite-difference gradient verification");
    add_common(check_cmd, check_args);
    check_cmd->add_option("--batch", batch, "frames in the check batch");

    CLI::App* feat_cmd =
        app.add_subcommand("features", "extract and normalize fbank features");
    feat_cmd->add_option("--wav-dir", wav_dir, "directory of 16-bit mono wav files")
        ->required();
    feat_cmd->add_option("--out", out_path, "output archive")->required();
    add_common(feat_cmd, feat_args, false);

    CLI::App* synth_cmd = app.add_subcommand("synth", "generate the synthetic task archive");
    synth_cmd->add_option("--out", out_path, "output archive")->required();
    synth_cmd->add_option("--classes", synth_classes, "classes incl. background");
    synth_cmd->add_option("--utterances", synth_utts, "utterance count");
    synth_cmd->add_option("--frames", synth_frames, "frames per utterance");
    synth_cmd->add_option("--noise", synth_noise, "noise standard deviation");
    synth_cmd->add_option("--seed", synth_seed, "generator seed");

    app.add_subcommand("list-presets", "list the named systems");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (train_cmd->parsed()) {
            return cmd_train(train_args, data_path, out_dir, resume_path);
        }
        if (eval_cmd->parsed()) return cmd_eval(checkpoint_path, data_path, eval_batch);
        if (count_cmd->parsed()) return cmd_param_count(count_args);
        if (check_cmd->parsed()) return cmd_grad_check(check_args, batch);
        if (feat_cmd->parsed()) return cmd_features(wav_dir, out_path, feat_args);
        if (synth_cmd->parsed()) {
            return cmd_synth(out_path, synth_classes, synth_utts, synth_frames, synth_noise,
                             synth_seed);
        }
        for (const auto& name : preset_names()) {
            ArchitectureConfig cfg = make_preset(name);
            std::printf("%-30s width=%-4zu frontend=%-14s params=%s\n", name.c_str(),
                        cfg.spec.kernels[0].width,
                        frontend_kind_name(cfg.spec.frontend.kind),
                        human_count(tdnn_param_count(cfg.spec)).c_str());
        }
        return kExitOk;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
}
