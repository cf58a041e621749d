#pragma once

#include <cstdint>
#include <cstring>
#include <limits>
#include <string>
#include <vector>

#include "tdnnforge/config.hpp"
#include "tdnnforge/data.hpp"
#include "tdnnforge/error.hpp"
#include "tdnnforge/tdnn.hpp"
#include "tdnnforge/training.hpp"

// Checkpoint format: magic "TDNC", version u16, architecture-config digest
// u64, config JSON (u32 length + bytes), epoch u32, scheduler state
// (lr f64, best f64, ramping u8), block count u32, then per block:
// name (u16 length + bytes), ndim u8, extents u32[], raw f64 data.
// All integers and floats little-endian. Parameters round-trip bitwise.

namespace tdnnforge {

constexpr char kCheckpointMagic[4] = {'T', 'D', 'N', 'C'};
constexpr std::uint16_t kCheckpointVersion = 1;

namespace detail {

inline void write_f64(ByteWriter& w, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    w.u64(bits);
}

inline double read_f64(ByteReader& r) {
    const std::uint64_t bits = r.u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace detail

struct CheckpointState {
    NewbobState scheduler;
    std::size_t epoch = 0;
};

inline void save_checkpoint(const std::string& path, const TdnnModel& model,
                            const ArchitectureConfig& cfg, const CheckpointState& state) {
    detail::ByteWriter w;
    w.str(std::string(kCheckpointMagic, 4));
    w.u16(kCheckpointVersion);
    w.u64(architecture_digest(cfg));
    const std::string json = architecture_config_json(cfg);
    w.u32(std::uint32_t(json.size()));
    w.str(json);
    w.u32(std::uint32_t(state.epoch));
    detail::write_f64(w, state.scheduler.lr);
    detail::write_f64(w, state.scheduler.best_metric);
    w.bytes.push_back(state.scheduler.ramping ? 1 : 0);

    std::size_t n_blocks = 0;
    for_each_param_block(model, [&](const std::string&, const Tensor&, const BlockMeta&) {
        ++n_blocks;
    });
    w.u32(std::uint32_t(n_blocks));
    for_each_param_block(model, [&](const std::string& name, const Tensor& t,
                                    const BlockMeta&) {
        w.u16(std::uint16_t(name.size()));
        w.str(name);
        w.bytes.push_back(static_cast<unsigned char>(t.ndim()));
        for (std::size_t d = 0; d < t.ndim(); ++d) w.u32(std::uint32_t(t.size(d)));
        for (std::size_t i = 0; i < t.numel(); ++i) detail::write_f64(w, t[i]);
    });
    detail::write_file(path, w.bytes);
}

struct LoadedCheckpoint {
    TdnnModel model;
    ArchitectureConfig config;
    CheckpointState state;
    std::uint64_t digest = 0;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    const std::vector<unsigned char> bytes = detail::read_file(path);
    detail::ByteReader r{bytes, 0, path};
    r.need(4);
    if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
        throw FormatError("checkpoint " + path + ": bad magic at byte 0");
    }
    r.off = 4;
    const std::uint16_t version = r.u16();
    if (version != kCheckpointVersion) {
        throw FormatError("checkpoint " + path + ": unsupported version " +
                          std::to_string(version) + " at byte 4");
    }
    LoadedCheckpoint out;
    out.digest = r.u64();
    const std::string json = r.str(r.u32());
    out.config = parse_architecture_config(json, path + " (embedded config)");
    if (architecture_digest(out.config) != out.digest) {
        throw FormatError("checkpoint " + path + ": header digest does not match the "
                          "embedded config");
    }
    out.state.epoch = r.u32();
    out.state.scheduler.lr = detail::read_f64(r);
    out.state.scheduler.best_metric = detail::read_f64(r);
    r.need(1);
    out.state.scheduler.ramping = bytes[r.off++] != 0;

    out.model.spec = out.config.spec;
    out.model.params = make_tdnn_params(out.model.spec);
    const std::uint32_t n_blocks = r.u32();

    std::size_t expected = 0;
    for_each_param_block(out.model, [&](const std::string&, const Tensor&, const BlockMeta&) {
        ++expected;
    });
    if (n_blocks != expected) {
        throw FormatError("checkpoint " + path + ": " + std::to_string(n_blocks) +
                          " parameter blocks, architecture has " + std::to_string(expected));
    }

    for_each_param_block(
        out.model.spec, out.model.params,
        [&](const std::string& name, Tensor& t, const BlockMeta&) {
            const std::size_t name_off = r.off;
            const std::string got = r.str(r.u16());
            if (got != name) {
                throw FormatError("checkpoint " + path + ": block \"" + got +
                                  "\" at byte " + std::to_string(name_off) + ", expected \"" +
                                  name + "\"");
            }
            r.need(1);
            const std::size_t ndim = bytes[r.off++];
            if (ndim != t.ndim()) {
                throw FormatError("checkpoint " + path + ": block \"" + name +
                                  "\" rank mismatch");
            }
            for (std::size_t d = 0; d < ndim; ++d) {
                if (r.u32() != t.size(d)) {
                    throw FormatError("checkpoint " + path + ": block \"" + name +
                                      "\" extent mismatch");
                }
            }
            for (std::size_t i = 0; i < t.numel(); ++i) t[i] = detail::read_f64(r);
        });
    if (r.off != bytes.size()) {
        throw FormatError("checkpoint " + path + ": trailing bytes at " +
                          std::to_string(r.off));
    }
    return out;
}

}  // namespace tdnnforge
