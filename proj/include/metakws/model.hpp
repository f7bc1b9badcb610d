#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "metakws/autodiff.hpp"
#include "metakws/mfcc.hpp"
#include "metakws/param_set.hpp"

namespace metakws {

/// Base CNN: n_blocks x [conv k x k (stride 2, same padding) -> relu -> batch norm],
/// then flatten -> linear to n_outputs.
struct ModelConfig {
    std::size_t n_blocks = 4;
    std::size_t filters = 64;
    std::size_t kernel = 3;
    std::size_t stride = 2;
    std::size_t n_outputs = 12;
    std::size_t input_h = 98;
    std::size_t input_w = 40;
    bool batch_norm = true;
    double bn_eps = 1e-5;

    void validate() const {
        if (n_blocks == 0 || filters == 0 || kernel == 0 || stride == 0)
            throw ConfigError("model: n_blocks, filters, kernel and stride must be positive");
        if (n_outputs < 2) throw ConfigError("model: n_outputs must be at least 2");
        if (input_h == 0 || input_w == 0) throw ConfigError("model: empty input shape");
    }

    kernels::ConvGeometry block_geometry(std::size_t block) const {
        kernels::ConvGeometry g{.in_channels = 1, .in_h = input_h, .in_w = input_w, .out_channels = filters,
                                .kernel = kernel, .stride = stride, .pad = kernel / 2};
        for (std::size_t b = 0; b < block; ++b) {
            const auto prev = g;
            g.in_channels = filters;
            g.in_h = prev.out_h();
            g.in_w = prev.out_w();
        }
        return g;
    }

    std::size_t flatten_size() const {
        const auto last = block_geometry(n_blocks - 1);
        return filters * last.out_h() * last.out_w();
    }

    bool operator==(const ModelConfig&) const = default;
};

/// New-class slots 0..N-1, fixed-class slots N..N+M-1 (silence = N, unknown = N+1).
struct OutputLayout {
    std::size_t n_new = 10;
    std::size_t n_fixed = 2;

    std::size_t size() const { return n_new + n_fixed; }
    std::size_t silence_slot() const { return n_new; }
    std::size_t unknown_slot() const { return n_new + 1; }
    bool is_fixed(std::size_t slot) const { return slot >= n_new && slot < size(); }
};

inline std::string conv_weight_name(std::size_t b) { return "block" + std::to_string(b) + ".conv.weight"; }
inline std::string conv_bias_name(std::size_t b) { return "block" + std::to_string(b) + ".conv.bias"; }
inline std::string bn_gamma_name(std::size_t b) { return "block" + std::to_string(b) + ".bn.gamma"; }
inline std::string bn_beta_name(std::size_t b) { return "block" + std::to_string(b) + ".bn.beta"; }
inline const std::string kOutputWeight = "output.weight";
inline const std::string kOutputBias = "output.bias";

/// He-uniform weights (bound sqrt(6 / fan_in)), zero biases, unit BN scale.
template <class T>
ParamSet<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    auto he_uniform = [&](Shape shape, std::size_t fan_in) {
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        Tensor<T> t(std::move(shape));
        for (auto& v : t.data()) v = static_cast<T>(dist(rng));
        return t;
    };
    ParamSet<T> p;
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
        const auto g = cfg.block_geometry(b);
        p.add(conv_weight_name(b), he_uniform(g.weight_shape(), g.patch()));
        p.add(conv_bias_name(b), Tensor<T>({cfg.filters}));
        if (cfg.batch_norm) {
            p.add(bn_gamma_name(b), Tensor<T>({cfg.filters}, T(1)));
            p.add(bn_beta_name(b), Tensor<T>({cfg.filters}));
        }
    }
    p.add(kOutputWeight, he_uniform({cfg.n_outputs, cfg.flatten_size()}, cfg.flatten_size()));
    p.add(kOutputBias, Tensor<T>({cfg.n_outputs}));
    return p;
}

/// Logits [B, n_outputs] for inputs [B, H, W] or [B, 1, H, W].
template <class T>
ad::Var<T> forward(const ModelConfig& cfg, const ParamVars<T>& params, const ad::Var<T>& input) {
    ad::Var<T> x = input;
    const Shape& s = input.shape();
    if (s.size() == 3) x = ad::reshape(input, {s[0], 1, s[1], s[2]});
    const Shape& xs = x.shape();
    if (xs.size() != 4 || xs[0] == 0 || xs[1] != 1 || xs[2] != cfg.input_h || xs[3] != cfg.input_w)
        throw DimensionError("model input " + shape_str(s) + " does not match expected " +
                             shape_str({0, 1, cfg.input_h, cfg.input_w}) + " (batch dimension free)");
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
        const auto g = cfg.block_geometry(b);
        x = ad::conv2d(x, params.at(conv_weight_name(b)), g);
        x = ad::add_channel_bias(x, params.at(conv_bias_name(b)));
        x = ad::relu(x);
        if (cfg.batch_norm)
            x = ad::batch_norm(x, params.at(bn_gamma_name(b)), params.at(bn_beta_name(b)), static_cast<T>(cfg.bn_eps));
    }
    return ad::linear(ad::flatten(x), params.at(kOutputWeight), params.at(kOutputBias));
}

enum class Reduction { sum, mean };

/// -sum_j log softmax(logits_j)[label_j], or its mean over the batch.
template <class T>
ad::Var<T> cross_entropy(const ad::Var<T>& logits, const std::vector<int>& labels, Reduction reduction = Reduction::sum) {
    const Shape& s = logits.shape();
    if (s.size() != 2 || s[0] != labels.size())
        throw DimensionError("cross_entropy: logits " + shape_str(s) + " vs " + std::to_string(labels.size()) + " labels");
    Tensor<T> onehot(s);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= s[1])
            throw DataError("label " + std::to_string(labels[i]) + " out of range [0, " + std::to_string(s[1]) + ")");
        onehot[i * s[1] + static_cast<std::size_t>(labels[i])] = T(1);
    }
    auto loss = ad::neg(ad::sum(ad::mul_const(ad::log_softmax(logits), onehot)));
    if (reduction == Reduction::mean) loss = ad::scale(loss, T(1) / static_cast<T>(labels.size()));
    return loss;
}

/// Row-wise argmax; ties resolve to the lowest index.
template <class T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
    const std::size_t b = logits.dim(0), c = logits.dim(1);
    std::vector<int> out(b);
    for (std::size_t i = 0; i < b; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j)
            if (logits[i * c + j] > logits[i * c + best]) best = j;
        out[i] = static_cast<int>(best);
    }
    return out;
}

/// Stacks feature maps into a [B, 1, T, D] tensor.
template <class T>
Tensor<T> stack_features(const std::vector<const FeatureMap*>& maps) {
    if (maps.empty()) throw DimensionError("stack_features: empty batch");
    const std::size_t rows = maps.front()->frames, cols = maps.front()->coeffs;
    Tensor<T> out({maps.size(), 1, rows, cols});
    auto dst = out.data();
    for (std::size_t i = 0; i < maps.size(); ++i) {
        if (maps[i]->frames != rows || maps[i]->coeffs != cols)
            throw DimensionError("stack_features: feature map " + shape_str({maps[i]->frames, maps[i]->coeffs}) +
                                 " vs " + shape_str({rows, cols}));
        std::copy(maps[i]->values.begin(), maps[i]->values.end(), dst.begin() + static_cast<long>(i * rows * cols));
    }
    return out;
}

}  // namespace metakws
