#pragma once

// Textbook MFCC written independently of metakws::MfccExtractor: direct DFT,
// natural-log mel formula, explicit DCT sum. Used only as a test oracle.

#include <cmath>
#include <vector>

namespace metakws::testing {

struct ReferenceMfccSettings {
    int sample_rate = 16000;
    int frame_len = 480;
    int frame_step = 160;
    int fft_size = 512;
    int n_mels = 40;
    int n_coeffs = 40;
    double low_hz = 20.0;
    double high_hz = 7600.0;
    double floor = 1e-10;
};

inline std::vector<std::vector<double>> reference_mfcc(const std::vector<double>& x, const ReferenceMfccSettings& s = {}) {
    const double pi = std::acos(-1.0);
    auto mel = [](double f) { return 1127.0 * std::log(1.0 + f / 700.0); };
    auto inv_mel = [](double m) { return 700.0 * (std::exp(m / 1127.0) - 1.0); };

    const int n_bins = s.fft_size / 2 + 1;
    std::vector<double> centres;
    for (int i = 0; i <= s.n_mels + 1; ++i)
        centres.push_back(inv_mel(mel(s.low_hz) + i * (mel(s.high_hz) - mel(s.low_hz)) / (s.n_mels + 1)));

    std::vector<std::vector<double>> result;
    for (int start = 0; start + s.frame_len <= static_cast<int>(x.size()); start += s.frame_step) {
        std::vector<double> power(n_bins);
        for (int k = 0; k < n_bins; ++k) {
            double re = 0, im = 0;
            for (int n = 0; n < s.frame_len; ++n) {
                const double w = std::pow(std::sin(pi * n / s.frame_len), 2);  // periodic Hann
                const double v = x[start + n] * w;
                re += v * std::cos(2 * pi * k * n / s.fft_size);
                im -= v * std::sin(2 * pi * k * n / s.fft_size);
            }
            power[k] = re * re + im * im;
        }
        std::vector<double> logmel(s.n_mels);
        for (int m = 0; m < s.n_mels; ++m) {
            double acc = 0;
            for (int k = 0; k < n_bins; ++k) {
                const double f = k * static_cast<double>(s.sample_rate) / s.fft_size;
                double w = 0;
                if (f > centres[m] && f < centres[m + 1]) w = (f - centres[m]) / (centres[m + 1] - centres[m]);
                if (f >= centres[m + 1] && f < centres[m + 2]) w = (centres[m + 2] - f) / (centres[m + 2] - centres[m + 1]);
                acc += w * power[k];
            }
            logmel[m] = std::log(acc > s.floor ? acc : s.floor);
        }
        std::vector<double> ceps(s.n_coeffs);
        for (int k = 0; k < s.n_coeffs; ++k) {
            double acc = 0;
            for (int n = 0; n < s.n_mels; ++n) acc += logmel[n] * std::cos(pi * k * (n + 0.5) / s.n_mels);
            ceps[k] = acc * std::sqrt((k == 0 ? 1.0 : 2.0) / s.n_mels);
        }
        result.push_back(ceps);
    }
    return result;
}

}  // namespace metakws::testing
