#pragma once

// Generator for a stand-in corpus in the Speech Commands v0.02 directory
// layout: 35 keyword directories of one-second 16 kHz clips plus
// _background_noise_. Each keyword is a fixed sequence of formant-synthesized
// segments; each clip renders it with a speaker's pitch, vocal-tract length,
// tempo, loudness and recording noise.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "metakws/audio.hpp"
#include "metakws/dataset.hpp"
#include "metakws/feature_store.hpp"

namespace metakws {

inline const std::vector<std::string>& speech_commands_keywords() {
    static const std::vector<std::string> words = {
        "backward", "bed",  "bird",  "cat",    "dog",   "down", "eight", "five",  "follow", "forward", "four", "go",
        "happy",    "house", "learn", "left",  "marvin", "nine", "no",   "off",   "on",     "one",     "right", "seven",
        "sheila",   "six",  "stop",  "three", "tree",  "two",  "up",    "visual", "wow",    "yes",     "zero"};
    return words;
}

struct SyntheticCorpusConfig {
    std::size_t clips_per_keyword = 220;
    std::size_t speakers = 250;
    std::size_t noise_files = 6;
    double noise_seconds = 20.0;
    std::uint64_t seed = 1;
};

namespace synth {

struct Segment {
    bool voiced = true;
    std::array<double, 3> formants{};  // Hz, voiced segments
    double fric_centre = 0;            // Hz, unvoiced segments
    double duration = 0.1;             // seconds at tempo 1
    double level = 1.0;
};

struct WordTemplate {
    std::vector<Segment> segments;
    double pitch_slope = 0;  // relative f0 change over the word
};

struct Speaker {
    double f0 = 140;
    double tract = 1.0;  // formant scale
    double tempo = 1.0;
    double breath = 0.05;
};

inline WordTemplate word_template(const std::string& word, std::uint64_t seed) {
    std::mt19937_64 rng(fnv1a(word) ^ (seed * 0x9e3779b97f4a7c15ull));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    WordTemplate w;
    const std::size_t n = 2 + static_cast<std::size_t>(u(rng) * 3.0);
    for (std::size_t i = 0; i < n; ++i) {
        Segment s;
        s.voiced = i == 0 || u(rng) > 0.25;
        s.formants = {250 + 600 * u(rng), 700 + 1700 * u(rng), 2200 + 1000 * u(rng)};
        s.fric_centre = 2500 + 3500 * u(rng);
        s.duration = s.voiced ? 0.08 + 0.14 * u(rng) : 0.05 + 0.08 * u(rng);
        s.level = 0.6 + 0.4 * u(rng);
        w.segments.push_back(s);
    }
    w.pitch_slope = -0.3 + 0.5 * u(rng);
    return w;
}

inline Speaker make_speaker(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Speaker s;
    s.f0 = 85.0 * std::pow(260.0 / 85.0, u(rng));
    s.tract = 0.85 + 0.33 * u(rng);
    s.tempo = 0.8 + 0.45 * u(rng);
    s.breath = 0.02 + 0.1 * u(rng);
    return s;
}

/// Second-order band-pass resonator (RBJ cookbook, constant 0 dB peak gain).
class Resonator {
  public:
    void set(double centre, double q) {
        const double w = 2 * std::numbers::pi * centre / kSampleRate, alpha = std::sin(w) / (2 * q), a0 = 1 + alpha;
        b0_ = alpha / a0;
        b2_ = -alpha / a0;
        a1_ = -2 * std::cos(w) / a0;
        a2_ = (1 - alpha) / a0;
    }
    double operator()(double x) {
        const double y = b0_ * x + b2_ * x2_ - a1_ * y1_ - a2_ * y2_;
        x2_ = x1_;
        x1_ = x;
        y2_ = y1_;
        y1_ = y;
        return y;
    }

  private:
    double b0_ = 0, b2_ = 0, a1_ = 0, a2_ = 0, x1_ = 0, x2_ = 0, y1_ = 0, y2_ = 0;
};

inline std::vector<float> render_word(const WordTemplate& word, const Speaker& spk, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> gauss;
    const double tempo = spk.tempo * (0.9 + 0.2 * u(rng));

    struct Placed {
        Segment seg;
        double start, end;
    };
    std::vector<Placed> segs;
    double t = 0;
    for (const auto& s : word.segments) {
        Placed p{s, t, 0};
        for (auto& f : p.seg.formants) f *= spk.tract * (0.93 + 0.14 * u(rng));
        p.seg.fric_centre *= 0.9 + 0.2 * u(rng);
        const double d = s.duration / tempo * (0.85 + 0.3 * u(rng));
        p.end = t + d;
        t = p.end;
        segs.push_back(p);
    }
    const double total = t;
    const double onset = u(rng) * std::max(0.0, 0.95 - total);

    // Parameter tracks interpolate between segment midpoints.
    auto track = [&](double time, auto get) {
        if (time <= 0.5 * (segs.front().start + segs.front().end)) return get(segs.front());
        for (std::size_t i = 0; i + 1 < segs.size(); ++i) {
            const double m0 = 0.5 * (segs[i].start + segs[i].end), m1 = 0.5 * (segs[i + 1].start + segs[i + 1].end);
            if (time <= m1) {
                const double a = (time - m0) / (m1 - m0);
                return (1 - a) * get(segs[i]) + a * get(segs[i + 1]);
            }
        }
        return get(segs.back());
    };

    std::vector<float> out(kClipSamples, 0.0f);
    const double f0_base = spk.f0 * (0.92 + 0.16 * u(rng));
    const double gain = 0.05 * std::pow(12.0, u(rng));
    Resonator fric;
    double phase = 0, f0 = f0_base;
    std::array<double, 3> formants{};
    double voicing = 1, fc = 3000, level = 1;
    std::vector<double> harm;
    const std::array<double, 3> bw = {90, 120, 180}, fg = {1.0, 0.55, 0.3};
    const std::size_t first = static_cast<std::size_t>(onset * kSampleRate);
    const std::size_t count = std::min<std::size_t>(kClipSamples - first, static_cast<std::size_t>(total * kSampleRate));
    for (std::size_t n = 0; n < count; ++n) {
        const double time = static_cast<double>(n) / kSampleRate;
        if (n % 32 == 0) {
            for (std::size_t i = 0; i < 3; ++i) formants[i] = track(time, [&](const Placed& p) { return p.seg.formants[i]; });
            voicing = track(time, [](const Placed& p) { return p.seg.voiced ? 1.0 : 0.0; });
            fc = track(time, [](const Placed& p) { return p.seg.fric_centre; });
            level = track(time, [](const Placed& p) { return p.seg.level; });
            f0 = f0_base * (1 + word.pitch_slope * time / total);
            fric.set(fc, 3.0);
            const std::size_t k_max = static_cast<std::size_t>(4000.0 / f0);
            harm.assign(k_max, 0.0);
            for (std::size_t k = 1; k <= k_max; ++k) {
                const double f = static_cast<double>(k) * f0;
                double a = 0;
                for (std::size_t i = 0; i < 3; ++i) a += fg[i] / (1 + std::pow((f - formants[i]) / bw[i], 2));
                harm[k - 1] = a / std::sqrt(static_cast<double>(k));
            }
        }
        phase += 2 * std::numbers::pi * f0 / kSampleRate;
        if (phase > 2 * std::numbers::pi) phase -= 2 * std::numbers::pi;
        // sin(k*phase) by the Chebyshev recurrence.
        const double c2 = 2 * std::cos(phase);
        double s_prev = 0, s_cur = std::sin(phase), voiced = 0;
        for (double a : harm) {
            voiced += a * s_cur;
            const double s_next = c2 * s_cur - s_prev;
            s_prev = s_cur;
            s_cur = s_next;
        }
        const double noise = gauss(rng);
        const double unvoiced = fric(noise) * 2.5;
        double env = 1;
        const double attack = 0.015, release = 0.04;
        if (time < attack) env = time / attack;
        if (total - time < release) env = std::max(0.0, (total - time) / release);
        const double s = level * env * (voicing * (voiced * 0.3 + spk.breath * noise * 0.2) + (1 - voicing) * unvoiced);
        out[first + n] = static_cast<float>(gain * s);
    }
    const double floor_noise = gain * 0.3 * std::pow(10.0, -(10 + 30 * u(rng)) / 20.0);
    for (auto& s : out) s = std::clamp(static_cast<float>(s + floor_noise * gauss(rng)), -1.0f, 0.999f);
    return out;
}

inline std::vector<float> render_noise(std::size_t kind, double seconds, std::mt19937_64& rng) {
    std::normal_distribution<double> gauss;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const std::size_t n = static_cast<std::size_t>(seconds * kSampleRate);
    std::vector<float> out(n);
    double pink = 0, brown = 0, hum_phase = 0;
    Resonator tap;
    tap.set(1200 + 800 * u(rng), 1.5);
    const double level = 0.05 + 0.25 * u(rng);
    for (std::size_t i = 0; i < n; ++i) {
        const double w = gauss(rng);
        double s = 0;
        switch (kind % 6) {
            case 0: s = w * 0.3; break;
            case 1: pink = 0.97 * pink + 0.03 * w * 6; s = pink; break;
            case 2: brown = 0.995 * brown + 0.05 * w; s = brown; break;
            case 3: s = tap(w) * 2; break;
            case 4:
                hum_phase += 2 * std::numbers::pi * 60.0 / kSampleRate;
                s = 0.5 * std::sin(hum_phase) + 0.25 * std::sin(3 * hum_phase) + 0.05 * w;
                break;
            default: s = (u(rng) < 0.0005 ? 4.0 : 0.0) * w + 0.05 * w; break;
        }
        out[i] = static_cast<float>(std::clamp(level * s, -1.0, 0.999));
    }
    return out;
}

}  // namespace synth

/// Writes the corpus under `root` (created if needed). Deterministic per seed.
inline void generate_synthetic_corpus(const std::filesystem::path& root, const SyntheticCorpusConfig& cfg) {
    std::filesystem::create_directories(root / kBackgroundNoiseDir);
    std::mt19937_64 rng(cfg.seed);
    std::vector<synth::Speaker> speakers;
    std::vector<std::string> speaker_ids;
    for (std::size_t i = 0; i < cfg.speakers; ++i) {
        speakers.push_back(synth::make_speaker(rng));
        char id[16];
        std::snprintf(id, sizeof id, "%08x", static_cast<unsigned>(rng() & 0xffffffffu));
        speaker_ids.push_back(id);
    }
    for (const auto& word : speech_commands_keywords()) {
        const auto tmpl = synth::word_template(word, cfg.seed);
        std::filesystem::create_directories(root / word);
        std::mt19937_64 wrng(fnv1a(word) + cfg.seed);
        std::vector<std::size_t> takes(cfg.speakers, 0);
        for (std::size_t c = 0; c < cfg.clips_per_keyword; ++c) {
            const std::size_t s = std::uniform_int_distribution<std::size_t>(0, cfg.speakers - 1)(wrng);
            const auto clip = synth::render_word(tmpl, speakers[s], wrng);
            write_wav(root / word / (speaker_ids[s] + "_nohash_" + std::to_string(takes[s]++) + ".wav"), clip);
        }
    }
    for (std::size_t k = 0; k < cfg.noise_files; ++k) {
        const auto noise = synth::render_noise(k, cfg.noise_seconds, rng);
        write_wav(root / kBackgroundNoiseDir / ("noise_" + std::to_string(k) + ".wav"), noise);
    }
}

}  // namespace metakws
