#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "metakws/errors.hpp"

namespace metakws {

inline constexpr int kSampleRate = 16000;
inline constexpr std::size_t kClipSamples = 16000;

/// Mono PCM audio of arbitrary length, normalized to [-1, 1].
struct Waveform {
    std::vector<float> samples;
    int sample_rate = kSampleRate;
};

/// Exactly one second of 16 kHz mono audio.
class AudioClip {
  public:
    AudioClip() : samples_(kClipSamples, 0.0f) {}

    /// Zero-pads or truncates the tail to 16000 samples.
    explicit AudioClip(std::span<const float> samples) : samples_(kClipSamples, 0.0f) {
        std::copy_n(samples.begin(), std::min(samples.size(), kClipSamples), samples_.begin());
        for (float s : samples_)
            if (!std::isfinite(s)) throw FormatError("audio clip contains non-finite samples");
    }

    std::span<const float> samples() const noexcept { return samples_; }
    int sample_rate() const noexcept { return kSampleRate; }
    std::size_t size() const noexcept { return samples_.size(); }
    float operator[](std::size_t i) const { return samples_[i]; }

    bool operator==(const AudioClip&) const = default;

  private:
    std::vector<float> samples_;
};

namespace detail {

inline std::uint32_t read_u32(const unsigned char* p) {
    return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}

inline std::uint16_t read_u16(const unsigned char* p) { return std::uint16_t(p[0] | p[1] << 8); }

inline void put_u32(std::ostream& os, std::uint32_t v) {
    const char b[4] = {char(v & 0xff), char(v >> 8 & 0xff), char(v >> 16 & 0xff), char(v >> 24 & 0xff)};
    os.write(b, 4);
}

inline void put_u16(std::ostream& os, std::uint16_t v) {
    const char b[2] = {char(v & 0xff), char(v >> 8 & 0xff)};
    os.write(b, 2);
}

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot read " + path.string());
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace detail

/// Decodes RIFF/WAVE bytes holding 16-bit little-endian mono PCM at 16 kHz.
/// Samples are scaled by 1/32768. `name` prefixes error messages.
inline Waveform decode_wav(std::span<const unsigned char> bytes, const std::string& name) {
    const std::string where = name + ": ";
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
        throw FormatError(where + "not a RIFF/WAVE file");

    bool have_fmt = false;
    std::span<const unsigned char> data;
    std::size_t pos = 12;
    while (pos + 8 <= bytes.size()) {
        const unsigned char* chunk = bytes.data() + pos;
        const std::size_t len = detail::read_u32(chunk + 4);
        const std::size_t body = pos + 8;
        const std::size_t avail = std::min(len, bytes.size() - body);
        if (std::memcmp(chunk, "fmt ", 4) == 0) {
            if (avail < 16) throw FormatError(where + "truncated fmt chunk");
            const unsigned char* f = bytes.data() + body;
            std::uint16_t format = detail::read_u16(f);
            if (format == 0xFFFE && avail >= 26) format = detail::read_u16(f + 24);  // WAVE_FORMAT_EXTENSIBLE subformat
            if (format != 1) throw FormatError(where + "unsupported audio_format " + std::to_string(format) + " (need PCM)");
            if (const auto ch = detail::read_u16(f + 2); ch != 1)
                throw FormatError(where + "unsupported channels " + std::to_string(ch) + " (need mono)");
            if (const auto rate = detail::read_u32(f + 4); rate != kSampleRate)
                throw FormatError(where + "unsupported sample_rate " + std::to_string(rate) + " (need 16000)");
            if (const auto bits = detail::read_u16(f + 14); bits != 16)
                throw FormatError(where + "unsupported bits_per_sample " + std::to_string(bits) + " (need 16)");
            have_fmt = true;
        } else if (std::memcmp(chunk, "data", 4) == 0) {
            data = std::span<const unsigned char>(bytes.data() + body, avail);
        }
        pos = body + len + (len & 1);
    }
    if (!have_fmt) throw FormatError(where + "missing fmt chunk");
    if (data.data() == nullptr) throw FormatError(where + "missing data chunk");

    Waveform w;
    w.samples.resize(data.size() / 2);
    for (std::size_t i = 0; i < w.samples.size(); ++i)
        w.samples[i] = static_cast<float>(static_cast<std::int16_t>(detail::read_u16(data.data() + 2 * i))) / 32768.0f;
    return w;
}

inline Waveform read_wav(const std::filesystem::path& path) { return decode_wav(detail::read_file(path), path.string()); }

inline AudioClip load_wav(const std::filesystem::path& path) { return AudioClip(read_wav(path).samples); }

/// Writes 16-bit mono PCM; samples are clamped to [-1, 1).
inline void write_wav(const std::filesystem::path& path, std::span<const float> samples, int sample_rate = kSampleRate) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + path.string());
    const auto data_len = static_cast<std::uint32_t>(samples.size() * 2);
    os.write("RIFF", 4);
    detail::put_u32(os, 36 + data_len);
    os.write("WAVEfmt ", 8);
    detail::put_u32(os, 16);
    detail::put_u16(os, 1);
    detail::put_u16(os, 1);
    detail::put_u32(os, static_cast<std::uint32_t>(sample_rate));
    detail::put_u32(os, static_cast<std::uint32_t>(sample_rate * 2));
    detail::put_u16(os, 2);
    detail::put_u16(os, 16);
    os.write("data", 4);
    detail::put_u32(os, data_len);
    for (float s : samples) {
        const long q = std::lround(std::clamp(s, -1.0f, 1.0f) * 32768.0f);
        detail::put_u16(os, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::clamp(q, -32768L, 32767L))));
    }
    if (!os) throw Error("failed writing " + path.string());
}

// ----------------------------------------------------------------- silence

/// Where to crop a noise recording and how loud to make it.
struct SilenceDraw {
    std::size_t offset = 0;
    float gain = 0.0f;

    bool operator==(const SilenceDraw&) const = default;
};

inline SilenceDraw draw_silence(std::size_t noise_length, std::mt19937_64& rng, std::pair<float, float> gain_range) {
    if (noise_length < kClipSamples)
        throw DataError("background noise has " + std::to_string(noise_length) + " samples, need at least 16000");
    if (gain_range.first > gain_range.second) throw ConfigError("silence gain range is inverted");
    std::uniform_int_distribution<std::size_t> pick(0, noise_length - kClipSamples);
    std::uniform_real_distribution<float> gain(gain_range.first, gain_range.second);
    SilenceDraw d;
    d.offset = pick(rng);
    d.gain = gain_range.first == gain_range.second ? gain_range.first : gain(rng);
    return d;
}

inline AudioClip render_silence(const Waveform& noise, const SilenceDraw& d) {
    if (d.offset + kClipSamples > noise.samples.size()) throw DataError("silence crop runs past the end of the noise");
    std::vector<float> out(kClipSamples);
    for (std::size_t i = 0; i < kClipSamples; ++i) out[i] = noise.samples[d.offset + i] * d.gain;
    return AudioClip(out);
}

/// A uniformly placed one-second crop of `noise` scaled by a gain drawn from `gain_range`.
inline AudioClip synthesize_silence(const Waveform& noise, std::mt19937_64& rng,
                                    std::pair<float, float> gain_range = {0.0f, 1.0f}) {
    return render_silence(noise, draw_silence(noise.samples.size(), rng, gain_range));
}

}  // namespace metakws
