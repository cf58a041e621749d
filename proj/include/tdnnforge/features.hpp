#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "tdnnforge/error.hpp"
#include "tdnnforge/tensor.hpp"

// 40-d log-Mel filterbank extraction and the two-level input normalization:
// per-utterance mean, per-segment variance.

namespace tdnnforge {

// One utterance's feature frames plus grouping ids for normalization.
// Labels ride along so archives stay self-contained; feature extraction
// fills them with the background class.
struct FrameSequence {
    std::string utterance_id;
    std::string segment_id;
    Tensor frames;  // [T x dim]
    std::vector<std::uint32_t> labels;
    double sample_rate_src = 0.0;

    std::size_t n_frames() const { return frames.size(0); }
    std::size_t dim() const { return frames.size(1); }
};

struct FbankConfig {
    double window_ms = 25.0;
    double hop_ms = 10.0;
    std::size_t n_fft = 0;  // 0: next power of two >= window samples
    std::size_t n_mels = 40;
    double fmin_hz = 20.0;
    double fmax_hz = 0.0;  // 0: 0.95 * Nyquist
    double log_floor = 1e-10;
};

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

inline std::size_t next_pow2(std::size_t n) {
    std::size_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

// In-place radix-2 FFT; n must be a power of two.
inline void fft_radix2(std::vector<std::complex<double>>& a) {
    const std::size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0) {
        throw GeometryError("fft: length " + std::to_string(n) + " is not a power of two");
    }
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double angle = -2.0 * M_PI / double(len);
        const std::complex<double> wlen(std::cos(angle), std::sin(angle));
        for (std::size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (std::size_t k = 0; k < len / 2; ++k) {
                const std::complex<double> u = a[i + k];
                const std::complex<double> v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
}

// Triangular Mel filterbank over FFT bin centre frequencies; rows have
// compact support and peak weight 1.
inline Tensor mel_filterbank(std::size_t n_mels, std::size_t n_fft, double rate, double fmin,
                             double fmax) {
    const std::size_t n_bins = n_fft / 2 + 1;
    Tensor bank({n_mels, n_bins});
    const double mel_lo = hz_to_mel(fmin), mel_hi = hz_to_mel(fmax);
    std::vector<double> edges(n_mels + 2);
    for (std::size_t i = 0; i < edges.size(); ++i) {
        edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * double(i) / double(n_mels + 1));
    }
    for (std::size_t m = 0; m < n_mels; ++m) {
        const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
        for (std::size_t j = 0; j < n_bins; ++j) {
            const double f = double(j) * rate / double(n_fft);
            double w = 0.0;
            if (f > lo && f < mid) {
                w = (f - lo) / (mid - lo);
            } else if (f >= mid && f < hi) {
                w = (hi - f) / (hi - mid);
            }
            bank(m, j) = w;
        }
    }
    return bank;
}

// Framing -> Hamming window -> magnitude spectrum -> triangular Mel bank ->
// natural log with floor. Returns [T x n_mels].
inline Tensor log_mel_fbank(const std::vector<double>& pcm, double rate,
                            const FbankConfig& cfg) {
    const std::size_t win = std::size_t(std::lround(cfg.window_ms * rate / 1000.0));
    const std::size_t hop = std::size_t(std::lround(cfg.hop_ms * rate / 1000.0));
    if (win == 0 || hop == 0) throw ConfigError("fbank: window/hop too small for rate");
    if (pcm.size() < win) {
        throw InputError("fbank: audio of " + std::to_string(pcm.size()) +
                         " samples is shorter than one " + std::to_string(win) +
                         "-sample window");
    }
    for (double s : pcm) {
        if (!std::isfinite(s)) throw InputError("fbank: non-finite sample in input");
    }
    const std::size_t n_fft = cfg.n_fft ? cfg.n_fft : next_pow2(win);
    if (n_fft < win) throw ConfigError("fbank: n_fft smaller than the window");
    const double fmax = cfg.fmax_hz > 0.0 ? cfg.fmax_hz : 0.95 * rate / 2.0;
    if (!(cfg.fmin_hz < fmax) || fmax > rate / 2.0) {
        throw ConfigError("fbank: need fmin < fmax <= Nyquist");
    }

    std::vector<double> hamming(win);
    for (std::size_t i = 0; i < win; ++i) {
        hamming[i] = 0.54 - 0.46 * std::cos(2.0 * M_PI * double(i) / double(win - 1));
    }
    const Tensor bank = mel_filterbank(cfg.n_mels, n_fft, rate, cfg.fmin_hz, fmax);
    const std::size_t n_bins = n_fft / 2 + 1;

    const std::size_t n_frames = 1 + (pcm.size() - win) / hop;
    Tensor out({n_frames, cfg.n_mels});
    std::vector<std::complex<double>> buf(n_fft);
    std::vector<double> mag(n_bins);
    for (std::size_t t = 0; t < n_frames; ++t) {
        const double* src = pcm.data() + t * hop;
        for (std::size_t i = 0; i < win; ++i) buf[i] = src[i] * hamming[i];
        std::fill(buf.begin() + win, buf.end(), std::complex<double>(0.0, 0.0));
        fft_radix2(buf);
        for (std::size_t j = 0; j < n_bins; ++j) mag[j] = std::abs(buf[j]);
        for (std::size_t m = 0; m < cfg.n_mels; ++m) {
            const double* w = bank.row(m);
            double e = 0.0;
            for (std::size_t j = 0; j < n_bins; ++j) e += w[j] * mag[j];
            out(t, m) = std::log(std::max(e, cfg.log_floor));
        }
    }
    return out;
}

// ---- normalization ----

struct NormalizationReport {
    // (segment_id, dim) pairs whose variance hit the floor
    std::vector<std::pair<std::string, std::size_t>> floored;
};

struct NormalizeResult {
    std::vector<FrameSequence> sequences;
    NormalizationReport report;
};

// Subtracts the per-dim mean over each utterance, then divides by the
// per-dim standard deviation pooled over all mean-normalized frames that
// share a segment id. Variances are floored at 1e-8 and flagged.
inline NormalizeResult normalize(const std::vector<FrameSequence>& seqs) {
    constexpr double kVarianceFloor = 1e-8;
    NormalizeResult result;
    result.sequences = seqs;
    if (seqs.empty()) return result;
    const std::size_t dim = seqs.front().dim();

    // pass 1: utterance means
    std::map<std::string, std::pair<std::vector<double>, std::size_t>> utt;  // sum, count
    for (const auto& s : seqs) {
        if (s.dim() != dim) {
            throw DimensionError("normalize: mixed feature dims " + std::to_string(dim) +
                                 " vs " + std::to_string(s.dim()));
        }
        auto& [sum, count] = utt[s.utterance_id];
        sum.resize(dim, 0.0);
        for (std::size_t t = 0; t < s.n_frames(); ++t) {
            const double* row = s.frames.row(t);
            for (std::size_t d = 0; d < dim; ++d) sum[d] += row[d];
        }
        count += s.n_frames();
    }
    for (auto& seq : result.sequences) {
        const auto& [sum, count] = utt.at(seq.utterance_id);
        for (std::size_t t = 0; t < seq.n_frames(); ++t) {
            double* row = seq.frames.row(t);
            for (std::size_t d = 0; d < dim; ++d) row[d] -= sum[d] / double(count);
        }
    }

    // pass 2: segment variances over the mean-normalized frames
    std::map<std::string, std::pair<std::vector<double>, std::size_t>> seg;  // sum sq, count
    for (const auto& s : result.sequences) {
        auto& [ss, count] = seg[s.segment_id];
        ss.resize(dim, 0.0);
        for (std::size_t t = 0; t < s.n_frames(); ++t) {
            const double* row = s.frames.row(t);
            for (std::size_t d = 0; d < dim; ++d) ss[d] += row[d] * row[d];
        }
        count += s.n_frames();
    }
    std::map<std::string, std::vector<double>> seg_scale;
    for (auto& [id, acc] : seg) {
        auto& [ss, count] = acc;
        std::vector<double> scale(dim);
        for (std::size_t d = 0; d < dim; ++d) {
            double var = ss[d] / double(count);
            if (var < kVarianceFloor) {
                var = kVarianceFloor;
                result.report.floored.emplace_back(id, d);
            }
            scale[d] = 1.0 / std::sqrt(var);
        }
        seg_scale[id] = std::move(scale);
    }
    for (auto& seq : result.sequences) {
        const auto& scale = seg_scale.at(seq.segment_id);
        for (std::size_t t = 0; t < seq.n_frames(); ++t) {
            double* row = seq.frames.row(t);
            for (std::size_t d = 0; d < dim; ++d) row[d] *= scale[d];
        }
    }
    return result;
}

// ---- WAV reading (16-bit little-endian mono PCM) ----

inline std::uint32_t read_u32_le(const unsigned char* p) {
    return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
           std::uint32_t(p[3]) << 24;
}
inline std::uint16_t read_u16_le(const unsigned char* p) {
    return std::uint16_t(p[0] | p[1] << 8);
}

struct WavData {
    std::vector<double> samples;  // in [-1, 1)
    double rate = 0.0;
};

inline WavData parse_wav(const std::vector<unsigned char>& bytes, const std::string& name) {
    const auto fail = [&](const std::string& why, std::size_t off) {
        throw FormatError("wav " + name + ": " + why + " at byte " + std::to_string(off));
    };
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
        std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
        fail("not a RIFF/WAVE file", 0);
    }
    WavData wav;
    std::uint16_t bits = 0, channels = 0, format = 0;
    bool have_fmt = false;
    std::size_t off = 12;
    while (off + 8 <= bytes.size()) {
        const char* id = reinterpret_cast<const char*>(bytes.data() + off);
        const std::uint32_t size = read_u32_le(bytes.data() + off + 4);
        const std::size_t body = off + 8;
        if (body + size > bytes.size()) fail("truncated chunk", off);
        if (std::memcmp(id, "fmt ", 4) == 0) {
            if (size < 16) fail("short fmt chunk", off);
            format = read_u16_le(bytes.data() + body);
            channels = read_u16_le(bytes.data() + body + 2);
            wav.rate = double(read_u32_le(bytes.data() + body + 4));
            bits = read_u16_le(bytes.data() + body + 14);
            have_fmt = true;
        } else if (std::memcmp(id, "data", 4) == 0) {
            if (!have_fmt) fail("data chunk before fmt", off);
            if (format != 1 || channels != 1 || bits != 16) {
                throw InputError("wav " + name + ": need 16-bit mono PCM, got format=" +
                                 std::to_string(format) + " channels=" +
                                 std::to_string(channels) + " bits=" + std::to_string(bits));
            }
            const std::size_t n = size / 2;
            wav.samples.resize(n);
            for (std::size_t i = 0; i < n; ++i) {
                const std::int16_t v =
                    std::int16_t(read_u16_le(bytes.data() + body + 2 * i));
                wav.samples[i] = double(v) / 32768.0;
            }
            return wav;
        }
        off = body + size + (size & 1);  // chunks are word-aligned
    }
    fail("missing data chunk", off);
    return wav;
}

}  // namespace tdnnforge
