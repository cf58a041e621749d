#include "tdnnforge/features.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace tdnnforge;

namespace {

FrameSequence make_seq(const std::string& utt, const std::string& seg, Tensor frames) {
    FrameSequence s;
    s.utterance_id = utt;
    s.segment_id = seg;
    s.labels.assign(frames.size(0), 0);
    s.frames = std::move(frames);
    return s;
}

Tensor random_frames(std::size_t t, std::size_t dim, std::uint64_t seed, double mean = 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(mean, 1.7);
    Tensor f({t, dim});
    for (std::size_t i = 0; i < f.numel(); ++i) f[i] = d(rng);
    return f;
}

}  // namespace

TEST(Fbank, SilenceHitsLogFloor) {
    FbankConfig cfg;
    std::vector<double> pcm(16000, 0.0);  // one second of silence
    Tensor feats = log_mel_fbank(pcm, 16000.0, cfg);
    ASSERT_EQ(feats.size(1), 40u);
    const double floor_log = std::log(cfg.log_floor);
    for (std::size_t i = 0; i < feats.numel(); ++i) EXPECT_DOUBLE_EQ(feats[i], floor_log);
}

TEST(Fbank, FrameCountArithmetic) {
    FbankConfig cfg;  // 25 ms window, 10 ms hop at 16 kHz: 400 / 160 samples
    std::vector<double> pcm(4000, 0.01);
    Tensor feats = log_mel_fbank(pcm, 16000.0, cfg);
    EXPECT_EQ(feats.size(0), 1u + (4000u - 400u) / 160u);

    EXPECT_THROW(log_mel_fbank(std::vector<double>(399, 0.0), 16000.0, cfg), InputError);
    std::vector<double> bad(1000, 0.0);
    bad[5] = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(log_mel_fbank(bad, 16000.0, cfg), InputError);
}

TEST(Fbank, PureToneConcentratesInMatchingFilter) {
    FbankConfig cfg;
    const double rate = 16000.0;
    // centre frequency of mel filter 20 (edge grid as built by the bank)
    const double fmax = 0.95 * rate / 2.0;
    const double mel_lo = hz_to_mel(cfg.fmin_hz), mel_hi = hz_to_mel(fmax);
    const double centre = mel_to_hz(mel_lo + (mel_hi - mel_lo) * 21.0 / 41.0);

    std::vector<double> pcm(16000);
    for (std::size_t i = 0; i < pcm.size(); ++i) {
        pcm[i] = 0.5 * std::sin(2.0 * M_PI * centre * double(i) / rate);
    }
    Tensor feats = log_mel_fbank(pcm, rate, cfg);
    // energy argmax lands in filter 20 on (almost) every frame
    std::size_t hits = 0;
    for (std::size_t t = 0; t < feats.size(0); ++t) {
        std::size_t arg = 0;
        for (std::size_t m = 1; m < 40; ++m) {
            if (feats(t, m) > feats(t, arg)) arg = m;
        }
        if (arg == 20) ++hits;
    }
    EXPECT_GE(hits, feats.size(0) - 2);
}

TEST(Fbank, Deterministic) {
    FbankConfig cfg;
    std::mt19937_64 rng(3);
    std::normal_distribution<double> d(0.0, 0.1);
    std::vector<double> pcm(2400);
    for (auto& s : pcm) s = d(rng);
    Tensor a = log_mel_fbank(pcm, 16000.0, cfg);
    Tensor b = log_mel_fbank(pcm, 16000.0, cfg);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Fbank, MelBankRowsHaveCompactSupportAndPositiveSum) {
    Tensor bank = mel_filterbank(40, 512, 16000.0, 20.0, 7600.0);
    for (std::size_t m = 0; m < 40; ++m) {
        double sum = 0.0;
        std::size_t first = 513, last = 0, peak = 0;
        for (std::size_t j = 0; j < bank.size(1); ++j) {
            const double w = bank(m, j);
            EXPECT_GE(w, 0.0);
            sum += w;
            if (w > 0.0) {
                first = std::min(first, j);
                last = std::max(last, j);
            }
            if (w > bank(m, peak)) peak = j;
        }
        EXPECT_GT(sum, 0.0) << "filter " << m;
        EXPECT_LE(first, peak);
        EXPECT_LE(peak, last);
    }
}

TEST(Normalize, SingleUtteranceSingleSegment) {
    std::vector<FrameSequence> seqs;
    seqs.push_back(make_seq("u0", "s0", random_frames(200, 40, 1, 3.0)));
    NormalizeResult r = normalize(seqs);
    const Tensor& f = r.sequences[0].frames;
    for (std::size_t d = 0; d < 40; ++d) {
        double mean = 0.0, var = 0.0;
        for (std::size_t t = 0; t < 200; ++t) mean += f(t, d);
        mean /= 200.0;
        for (std::size_t t = 0; t < 200; ++t) var += f(t, d) * f(t, d);
        var /= 200.0;
        EXPECT_LT(std::abs(mean), 1e-10);
        EXPECT_NEAR(var, 1.0, 1e-10);
    }
    EXPECT_TRUE(r.report.floored.empty());
}

TEST(Normalize, TwoUtterancesOneSegmentAgainstDirectRecomputation) {
    std::vector<FrameSequence> seqs;
    seqs.push_back(make_seq("u0", "s0", random_frames(120, 40, 11, -1.0)));
    seqs.push_back(make_seq("u1", "s0", random_frames(80, 40, 12, 2.0)));
    NormalizeResult r = normalize(seqs);

    for (std::size_t d = 0; d < 40; ++d) {
        // each utterance's post-normalization mean is zero
        for (const auto& s : r.sequences) {
            double m = 0.0;
            for (std::size_t t = 0; t < s.n_frames(); ++t) m += s.frames(t, d);
            EXPECT_LT(std::abs(m / double(s.n_frames())), 1e-10);
        }
        // pooled segment variance is one
        double ss = 0.0;
        std::size_t n = 0;
        for (const auto& s : r.sequences) {
            for (std::size_t t = 0; t < s.n_frames(); ++t) {
                ss += s.frames(t, d) * s.frames(t, d);
            }
            n += s.n_frames();
        }
        EXPECT_NEAR(ss / double(n), 1.0, 1e-8);
    }

    // direct recomputation of the transform on one value
    const std::vector<FrameSequence> originals{
        make_seq("u0", "s0", random_frames(120, 40, 11, -1.0)),
        make_seq("u1", "s0", random_frames(80, 40, 12, 2.0))};
    const std::size_t d = 7;
    double mean_u0 = 0.0;
    for (std::size_t t = 0; t < 120; ++t) mean_u0 += originals[0].frames(t, d);
    mean_u0 /= 120.0;
    double mean_u1 = 0.0;
    for (std::size_t t = 0; t < 80; ++t) mean_u1 += originals[1].frames(t, d);
    mean_u1 /= 80.0;
    double ss = 0.0;
    for (std::size_t t = 0; t < 120; ++t) {
        const double v = originals[0].frames(t, d) - mean_u0;
        ss += v * v;
    }
    for (std::size_t t = 0; t < 80; ++t) {
        const double v = originals[1].frames(t, d) - mean_u1;
        ss += v * v;
    }
    const double sd = std::sqrt(ss / 200.0);
    EXPECT_NEAR(r.sequences[0].frames(3, d), (originals[0].frames(3, d) - mean_u0) / sd,
                1e-12);
}

TEST(Normalize, ConstantDimIsFlooredAndZeroed) {
    Tensor frames = random_frames(50, 40, 21);
    for (std::size_t t = 0; t < 50; ++t) frames(t, 13) = 4.2;  // constant dim
    std::vector<FrameSequence> seqs{make_seq("u0", "s0", std::move(frames))};
    NormalizeResult r = normalize(seqs);
    bool flagged = false;
    for (const auto& [seg, dim] : r.report.floored) {
        if (seg == "s0" && dim == 13) flagged = true;
    }
    EXPECT_TRUE(flagged);
    for (std::size_t t = 0; t < 50; ++t) {
        EXPECT_NEAR(r.sequences[0].frames(t, 13), 0.0, 1e-6);
    }
}

TEST(Normalize, IdempotentUpToRefloor) {
    std::vector<FrameSequence> seqs;
    seqs.push_back(make_seq("u0", "s0", random_frames(90, 40, 31)));
    seqs.push_back(make_seq("u1", "s1", random_frames(110, 40, 32)));
    NormalizeResult once = normalize(seqs);
    NormalizeResult twice = normalize(once.sequences);
    for (std::size_t s = 0; s < seqs.size(); ++s) {
        const Tensor& a = once.sequences[s].frames;
        const Tensor& b = twice.sequences[s].frames;
        for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-8);
    }
}

TEST(Wav, ParsesMinimal16BitMono) {
    std::vector<unsigned char> bytes;
    const auto push32 = [&](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes.push_back(v >> 8 * i & 0xff);
    };
    const auto push16 = [&](std::uint16_t v) {
        bytes.push_back(v & 0xff);
        bytes.push_back(v >> 8 & 0xff);
    };
    const auto push_tag = [&](const char* t) { bytes.insert(bytes.end(), t, t + 4); };
    push_tag("RIFF");
    push32(36 + 8);
    push_tag("WAVE");
    push_tag("fmt ");
    push32(16);
    push16(1);      // PCM
    push16(1);      // mono
    push32(16000);  // rate
    push32(32000);  // byte rate
    push16(2);      // block align
    push16(16);     // bits
    push_tag("data");
    push32(8);
    push16(0x4000);  // +0.5
    push16(0xC000);  // -0.5
    push16(0);
    push16(0x7FFF);

    WavData wav = parse_wav(bytes, "test");
    EXPECT_DOUBLE_EQ(wav.rate, 16000.0);
    ASSERT_EQ(wav.samples.size(), 4u);
    EXPECT_DOUBLE_EQ(wav.samples[0], 0.5);
    EXPECT_DOUBLE_EQ(wav.samples[1], -0.5);
    EXPECT_DOUBLE_EQ(wav.samples[2], 0.0);
    EXPECT_NEAR(wav.samples[3], 1.0, 1e-3);

    bytes[0] = 'X';
    EXPECT_THROW(parse_wav(bytes, "test"), FormatError);
}
