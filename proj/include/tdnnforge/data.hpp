#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "tdnnforge/error.hpp"
#include "tdnnforge/features.hpp"
#include "tdnnforge/tensor.hpp"

// Synthetic spectro-temporal classification task (desk-scale training data)
// and the binary feature-archive format.

namespace tdnnforge {

constexpr std::size_t kFeatDim = 40;

using Dataset = std::vector<FrameSequence>;

inline std::size_t total_frames(const Dataset& ds) {
    std::size_t n = 0;
    for (const auto& s : ds) n += s.n_frames();
    return n;
}

// ---- synthetic task ----

// Class 0 is background noise. Each class c in [1, n_classes) owns a
// disjoint frequency lane of width feat_dim / (n_classes - 1) starting at
// (c - 1) * lane_width. A pattern is a ridge of `pattern_bandwidth` dims at
// amplitude 2.0 sweeping across its lane over `pattern_duration` frames;
// odd classes sweep upward, even classes downward. Patterns are placed
// back-to-back with small background gaps and never overlap in time, so at
// noise_std = 0 the active class is recoverable from any single frame's
// lane energies.
struct SynthTaskConfig {
    std::size_t n_classes = 8;  // including the background class
    std::size_t frames_per_utterance = 500;
    std::size_t n_utterances = 100;
    std::size_t pattern_bandwidth = 4;
    std::size_t pattern_duration = 12;
    double noise_std = 0.5;
    std::uint64_t seed = 1;

    static constexpr double kAmplitude = 2.0;

    std::size_t lane_width() const { return kFeatDim / (n_classes - 1); }

    void validate() const {
        if (n_classes < 2) throw ConfigError("synth task: need n_classes >= 2");
        if (pattern_bandwidth > kFeatDim) {
            throw ConfigError("synth task: pattern_bandwidth exceeds feature dim");
        }
        if (pattern_duration < 1 || pattern_duration > 23) {
            throw ConfigError("synth task: pattern_duration must be in [1, 23]");
        }
        if (lane_width() < 1 || pattern_bandwidth > lane_width()) {
            throw ConfigError("synth task: " + std::to_string(n_classes - 1) +
                              " classes of bandwidth " + std::to_string(pattern_bandwidth) +
                              " do not fit " + std::to_string(kFeatDim) + " dims");
        }
        if (noise_std < 0.0) throw ConfigError("synth task: noise_std must be >= 0");
    }
};

// Ridge dim offset within the lane at pattern phase tau.
inline std::size_t synth_ridge_offset(const SynthTaskConfig& cfg, std::size_t cls,
                                      std::size_t tau) {
    const std::size_t travel = cfg.lane_width() - cfg.pattern_bandwidth;
    if (travel == 0 || cfg.pattern_duration == 1) return 0;
    const double prog = double(tau) / double(cfg.pattern_duration - 1);
    const double p = (cls % 2 == 1) ? prog : 1.0 - prog;
    return std::size_t(std::lround(p * double(travel)));
}

inline Dataset generate(const SynthTaskConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> noise(0.0, cfg.noise_std);

    // gap length keeps the background share near 1 / n_classes
    const double target_gap =
        std::max(1.0, double(cfg.pattern_duration) / double(cfg.n_classes - 1));
    const std::size_t gap_min = std::size_t(target_gap);
    std::uniform_int_distribution<std::size_t> gap_dist(gap_min, gap_min + 1);

    // balanced class draws: a reshuffled deck of the non-background classes
    std::vector<std::uint32_t> deck;
    std::size_t deck_pos = 0;
    const auto draw_class = [&]() {
        if (deck_pos == deck.size()) {
            deck.clear();
            for (std::uint32_t c = 1; c < cfg.n_classes; ++c) deck.push_back(c);
            std::shuffle(deck.begin(), deck.end(), rng);
            deck_pos = 0;
        }
        return deck[deck_pos++];
    };

    Dataset ds;
    for (std::size_t u = 0; u < cfg.n_utterances; ++u) {
        FrameSequence seq;
        char buf[32];
        std::snprintf(buf, sizeof buf, "u%04zu", u);
        seq.utterance_id = buf;
        std::snprintf(buf, sizeof buf, "seg%03zu", u / 10);
        seq.segment_id = buf;
        seq.frames = Tensor({cfg.frames_per_utterance, kFeatDim});
        seq.labels.assign(cfg.frames_per_utterance, 0);

        for (std::size_t t = 0; t < cfg.frames_per_utterance; ++t) {
            double* row = seq.frames.row(t);
            for (std::size_t d = 0; d < kFeatDim; ++d) {
                row[d] = cfg.noise_std > 0.0 ? noise(rng) : 0.0;
            }
        }

        std::size_t cursor = 0;
        while (true) {
            cursor += gap_dist(rng);
            if (cursor + cfg.pattern_duration > cfg.frames_per_utterance) break;
            const std::uint32_t cls = draw_class();
            const std::size_t lane0 = (cls - 1) * cfg.lane_width();
            for (std::size_t tau = 0; tau < cfg.pattern_duration; ++tau) {
                const std::size_t d0 = lane0 + synth_ridge_offset(cfg, cls, tau);
                double* row = seq.frames.row(cursor + tau);
                for (std::size_t d = 0; d < cfg.pattern_bandwidth; ++d) {
                    row[d0 + d] += SynthTaskConfig::kAmplitude;
                }
                seq.labels[cursor + tau] = cls;
            }
            cursor += cfg.pattern_duration;
        }

        // quantize through f32 so archives round-trip bitwise
        for (std::size_t i = 0; i < seq.frames.numel(); ++i) {
            seq.frames[i] = double(float(seq.frames[i]));
        }
        ds.push_back(std::move(seq));
    }
    return ds;
}

// ---- train/validation split ----

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

struct SplitDataset {
    Dataset train;
    Dataset val;
};

// Deterministic by utterance hash: disjoint and exhaustive.
inline SplitDataset split_dataset(const Dataset& ds, std::size_t val_one_in = 5) {
    SplitDataset sp;
    for (const auto& s : ds) {
        if (fnv1a64(s.utterance_id) % val_one_in == 0) {
            sp.val.push_back(s);
        } else {
            sp.train.push_back(s);
        }
    }
    return sp;
}

// ---- feature archive ----
//
// magic "TDNF", version u16, record count u64, then per record:
// utterance_id (u32 length + UTF-8), segment_id (u32 length + UTF-8),
// T u32, dim u32 (= 40), frames as little-endian f32 row-major,
// labels u32[T]. All integers little-endian.

constexpr char kArchiveMagic[4] = {'T', 'D', 'N', 'F'};
constexpr std::uint16_t kArchiveVersion = 1;

namespace detail {

struct ByteReader {
    const std::vector<unsigned char>& bytes;
    std::size_t off = 0;
    const std::string& path;

    void need(std::size_t n) const {
        if (off + n > bytes.size()) {
            throw FormatError("archive " + path + ": truncated at byte " +
                              std::to_string(off) + " (need " + std::to_string(n) +
                              " more bytes)");
        }
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = std::uint16_t(bytes[off] | bytes[off + 1] << 8);
        off += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = std::uint32_t(bytes[off]) | std::uint32_t(bytes[off + 1]) << 8 |
                          std::uint32_t(bytes[off + 2]) << 16 |
                          std::uint32_t(bytes[off + 3]) << 24;
        off += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = v << 8 | bytes[off + std::size_t(i)];
        off += 8;
        return v;
    }
    std::string str(std::uint32_t len) {
        need(len);
        std::string s(reinterpret_cast<const char*>(bytes.data() + off), len);
        off += len;
        return s;
    }
    float f32() {
        need(4);
        std::uint32_t v = std::uint32_t(bytes[off]) | std::uint32_t(bytes[off + 1]) << 8 |
                          std::uint32_t(bytes[off + 2]) << 16 |
                          std::uint32_t(bytes[off + 3]) << 24;
        off += 4;
        float f;
        std::memcpy(&f, &v, 4);
        return f;
    }
};

struct ByteWriter {
    std::vector<unsigned char> bytes;

    void u16(std::uint16_t v) {
        bytes.push_back(v & 0xff);
        bytes.push_back(v >> 8 & 0xff);
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes.push_back(v >> 8 * i & 0xff);
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes.push_back(v >> 8 * i & 0xff);
    }
    void str(const std::string& s) {
        bytes.insert(bytes.end(), s.begin(), s.end());
    }
    void f32(float f) {
        std::uint32_t v;
        std::memcpy(&v, &f, 4);
        u32(v);
    }
};

inline std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open " + path);
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(in),
                                      std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              std::streamsize(bytes.size()));
    if (!out) throw InputError("short write to " + path);
}

}  // namespace detail

inline void save_archive(const Dataset& ds, const std::string& path) {
    detail::ByteWriter w;
    w.str(std::string(kArchiveMagic, 4));
    w.u16(kArchiveVersion);
    w.u64(ds.size());
    for (const auto& s : ds) {
        if (s.dim() != kFeatDim) {
            throw FormatError("archive: sequence " + s.utterance_id + " has dim " +
                              std::to_string(s.dim()) + ", format requires " +
                              std::to_string(kFeatDim));
        }
        if (s.labels.size() != s.n_frames()) {
            throw FormatError("archive: sequence " + s.utterance_id +
                              " label count does not match frame count");
        }
        w.u32(std::uint32_t(s.utterance_id.size()));
        w.str(s.utterance_id);
        w.u32(std::uint32_t(s.segment_id.size()));
        w.str(s.segment_id);
        w.u32(std::uint32_t(s.n_frames()));
        w.u32(std::uint32_t(s.dim()));
        for (std::size_t i = 0; i < s.frames.numel(); ++i) w.f32(float(s.frames[i]));
        for (std::uint32_t l : s.labels) w.u32(l);
    }
    detail::write_file(path, w.bytes);
}

inline Dataset load_archive(const std::string& path) {
    const std::vector<unsigned char> bytes = detail::read_file(path);
    detail::ByteReader r{bytes, 0, path};
    r.need(4);
    if (std::memcmp(bytes.data(), kArchiveMagic, 4) != 0) {
        throw FormatError("archive " + path + ": bad magic at byte 0");
    }
    r.off = 4;
    const std::uint16_t version = r.u16();
    if (version != kArchiveVersion) {
        throw FormatError("archive " + path + ": unsupported version " +
                          std::to_string(version) + " at byte 4");
    }
    const std::uint64_t count = r.u64();
    Dataset ds;
    ds.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        FrameSequence s;
        s.utterance_id = r.str(r.u32());
        s.segment_id = r.str(r.u32());
        const std::uint32_t t = r.u32();
        const std::size_t dim_off = r.off;
        const std::uint32_t dim = r.u32();
        if (dim != kFeatDim) {
            throw FormatError("archive " + path + ": record " + std::to_string(i) +
                              " has dim " + std::to_string(dim) + " (want " +
                              std::to_string(kFeatDim) + ") at byte " +
                              std::to_string(dim_off));
        }
        if (t == 0) {
            throw FormatError("archive " + path + ": record " + std::to_string(i) +
                              " has zero frames at byte " + std::to_string(dim_off));
        }
        s.frames = Tensor({t, dim});
        for (std::size_t j = 0; j < std::size_t(t) * dim; ++j) s.frames[j] = double(r.f32());
        s.labels.resize(t);
        for (std::uint32_t& l : s.labels) l = r.u32();
        ds.push_back(std::move(s));
    }
    if (r.off != bytes.size()) {
        throw FormatError("archive " + path + ": trailing bytes at " +
                          std::to_string(r.off));
    }
    return ds;
}

}  // namespace tdnnforge
