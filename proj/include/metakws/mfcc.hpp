#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "metakws/audio.hpp"
#include "metakws/errors.hpp"

namespace metakws {

struct FrontendConfig {
    std::size_t frame_len = 480;   // 30 ms
    std::size_t frame_step = 160;  // 10 ms
    std::size_t fft_size = 512;
    std::size_t n_mels = 40;
    std::size_t n_coeffs = 40;
    double mel_low_hz = 20.0;
    double mel_high_hz = 7600.0;
    double log_floor = 1e-10;

    std::size_t frames(std::size_t n_samples = kClipSamples) const {
        return n_samples < frame_len ? 0 : (n_samples - frame_len) / frame_step + 1;
    }

    void validate() const {
        if (frame_len == 0 || frame_step == 0) throw ConfigError("frontend: frame_len and frame_step must be positive");
        if (frame_len > fft_size) throw ConfigError("frontend: frame_len exceeds fft_size");
        if (frame_step > frame_len) throw ConfigError("frontend: frame_step exceeds frame_len");
        if ((fft_size & (fft_size - 1)) != 0) throw ConfigError("frontend: fft_size must be a power of two");
        if (n_coeffs == 0 || n_mels < n_coeffs) throw ConfigError("frontend: need n_mels >= n_coeffs > 0");
        if (!(mel_low_hz >= 0 && mel_low_hz < mel_high_hz && mel_high_hz <= kSampleRate / 2.0))
            throw ConfigError("frontend: mel range must satisfy 0 <= low < high <= 8000");
        if (!(log_floor > 0)) throw ConfigError("frontend: log_floor must be positive");
    }

    /// Canonical text form; the feature cache keys on its hash.
    std::string canonical() const {
        std::ostringstream os;
        os.precision(17);
        os << "frame_len=" << frame_len << ";frame_step=" << frame_step << ";fft_size=" << fft_size
           << ";n_mels=" << n_mels << ";n_coeffs=" << n_coeffs << ";mel_low_hz=" << mel_low_hz
           << ";mel_high_hz=" << mel_high_hz << ";log_floor=" << log_floor;
        return os.str();
    }

    bool operator==(const FrontendConfig&) const = default;
};

/// T x D cepstral matrix, row-major (frame-major).
struct FeatureMap {
    std::size_t frames = 0;
    std::size_t coeffs = 0;
    std::vector<float> values;

    float at(std::size_t t, std::size_t d) const { return values[t * coeffs + d]; }
    bool operator==(const FeatureMap&) const = default;
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Triangular filters on the HTK mel scale, evaluated at FFT bin centre
/// frequencies. Row m has fft_size/2+1 weights.
inline std::vector<std::vector<double>> mel_filterbank(const FrontendConfig& cfg) {
    const std::size_t bins = cfg.fft_size / 2 + 1;
    const double lo = hz_to_mel(cfg.mel_low_hz), hi = hz_to_mel(cfg.mel_high_hz);
    std::vector<double> edges(cfg.n_mels + 2);
    for (std::size_t i = 0; i < edges.size(); ++i)
        edges[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(cfg.n_mels + 1));

    std::vector<std::vector<double>> fb(cfg.n_mels, std::vector<double>(bins, 0.0));
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
        const double left = edges[m], centre = edges[m + 1], right = edges[m + 2];
        for (std::size_t k = 0; k < bins; ++k) {
            const double f = static_cast<double>(k) * kSampleRate / static_cast<double>(cfg.fft_size);
            if (f > left && f < centre)
                fb[m][k] = (f - left) / (centre - left);
            else if (f >= centre && f < right)
                fb[m][k] = (right - f) / (right - centre);
        }
    }
    return fb;
}

/// Per frame: periodic Hann window, |FFT|^2, mel filterbank, natural log with
/// floor, orthonormal DCT-II truncated to n_coeffs. Computed in double,
/// stored as float.
class MfccExtractor {
  public:
    explicit MfccExtractor(FrontendConfig cfg = {}) : cfg_(cfg) {
        cfg_.validate();
        window_.resize(cfg_.frame_len);
        for (std::size_t n = 0; n < cfg_.frame_len; ++n)
            window_[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) /
                                              static_cast<double>(cfg_.frame_len));
        filterbank_ = mel_filterbank(cfg_);
        dct_.assign(cfg_.n_coeffs * cfg_.n_mels, 0.0);
        const double m = static_cast<double>(cfg_.n_mels);
        for (std::size_t k = 0; k < cfg_.n_coeffs; ++k) {
            const double s = k == 0 ? std::sqrt(1.0 / m) : std::sqrt(2.0 / m);
            for (std::size_t n = 0; n < cfg_.n_mels; ++n)
                dct_[k * cfg_.n_mels + n] =
                    s * std::cos(std::numbers::pi * static_cast<double>(k) * (2.0 * static_cast<double>(n) + 1.0) / (2.0 * m));
        }
    }

    const FrontendConfig& config() const noexcept { return cfg_; }

    FeatureMap operator()(const AudioClip& clip) const {
        const auto samples = clip.samples();
        FeatureMap out;
        out.frames = cfg_.frames(samples.size());
        out.coeffs = cfg_.n_coeffs;
        out.values.resize(out.frames * out.coeffs);

        Eigen::FFT<double> fft;
        std::vector<double> frame(cfg_.fft_size, 0.0);
        std::vector<std::complex<double>> spectrum;
        const std::size_t bins = cfg_.fft_size / 2 + 1;
        std::vector<double> power(bins), logmel(cfg_.n_mels);
        for (std::size_t t = 0; t < out.frames; ++t) {
            const std::size_t start = t * cfg_.frame_step;
            for (std::size_t n = 0; n < cfg_.frame_len; ++n) frame[n] = static_cast<double>(samples[start + n]) * window_[n];
            fft.fwd(spectrum, frame);
            for (std::size_t k = 0; k < bins; ++k) power[k] = std::norm(spectrum[k]);
            for (std::size_t m = 0; m < cfg_.n_mels; ++m) {
                double e = 0.0;
                for (std::size_t k = 0; k < bins; ++k) e += filterbank_[m][k] * power[k];
                logmel[m] = std::log(std::max(e, cfg_.log_floor));
            }
            for (std::size_t k = 0; k < cfg_.n_coeffs; ++k) {
                double c = 0.0;
                for (std::size_t n = 0; n < cfg_.n_mels; ++n) c += dct_[k * cfg_.n_mels + n] * logmel[n];
                out.values[t * out.coeffs + k] = static_cast<float>(c);
            }
        }
        return out;
    }

  private:
    FrontendConfig cfg_;
    std::vector<double> window_;
    std::vector<std::vector<double>> filterbank_;
    std::vector<double> dct_;
};

inline FeatureMap mfcc(const AudioClip& clip, const FrontendConfig& cfg = {}) { return MfccExtractor(cfg)(clip); }

}  // namespace metakws
