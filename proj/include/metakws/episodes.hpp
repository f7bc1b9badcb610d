#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "metakws/audio.hpp"
#include "metakws/dataset.hpp"
#include "metakws/feature_store.hpp"
#include "metakws/model.hpp"

namespace metakws {

enum class Variant { extended, original, supervised };

inline std::string variant_name(Variant v) {
    switch (v) {
        case Variant::extended: return "extended";
        case Variant::original: return "original";
        default: return "supervised";
    }
}

inline Variant parse_variant(const std::string& s) {
    if (s == "extended") return Variant::extended;
    if (s == "original") return Variant::original;
    if (s == "supervised") return Variant::supervised;
    throw ConfigError("unknown variant '" + s + "' (expected extended, original or supervised)");
}

/// N+M-way, K-shot task shape. Fixed classes are silence then unknown.
struct EpisodeConfig {
    std::size_t n_new = 10;
    std::size_t n_fixed = 2;
    std::size_t k_shot = 5;
    std::size_t query_per_class = 15;
    Variant variant = Variant::extended;
    float silence_gain_lo = 0.0f;
    float silence_gain_hi = 1.0f;

    std::size_t n_classes() const { return n_new + n_fixed; }
    OutputLayout layout() const { return {n_new, n_fixed}; }

    void validate() const {
        if (n_new < 1) throw ConfigError("episode: n_new must be at least 1");
        if (n_fixed > 2) throw ConfigError("episode: n_fixed must be 0, 1 (silence) or 2 (silence, unknown)");
        if (k_shot < 1) throw ConfigError("episode: k_shot must be at least 1");
        if (query_per_class < 1) throw ConfigError("episode: query_per_class must be at least 1");
        if (!(silence_gain_lo >= 0 && silence_gain_lo <= silence_gain_hi))
            throw ConfigError("episode: silence gain range must satisfy 0 <= lo <= hi");
    }

    bool operator==(const EpisodeConfig&) const = default;
};

/// A corpus file, or a silence crop of a background-noise file.
struct ClipRef {
    std::string class_name;
    std::string path;
    std::optional<SilenceDraw> silence;

    bool is_silence() const { return silence.has_value(); }
    bool operator==(const ClipRef&) const = default;
};

struct MetaTask {
    std::vector<ClipRef> support;
    std::vector<int> support_labels;
    std::vector<ClipRef> query;
    std::vector<int> query_labels;
    std::vector<std::string> slot_classes;       // slot -> class name
    std::map<std::string, int> keyword_map;      // sampled keyword -> new-class slot

    bool operator==(const MetaTask&) const = default;
};

using NoiseLengths = std::map<std::string, std::size_t>;

inline NoiseLengths noise_lengths(FeatureStore& store, const ClassPartition& p) {
    NoiseLengths out;
    for (const auto& f : p.silence_sources) out[f] = store.noise(f)->samples.size();
    return out;
}

/// Decorrelated 64-bit seed for stream `a`, item `b` (SplitMix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
    std::uint64_t z = base + 0x9e3779b97f4a7c15ull * (a + 1) + 0xbf58476d1ce4e5b9ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

namespace detail {

/// `n` distinct items of `pool`, uniformly.
inline std::vector<std::string> sample_files(const std::vector<std::string>& pool, std::size_t n, std::mt19937_64& rng,
                                             const std::string& what) {
    if (pool.size() < n)
        throw DataError(what + " has " + std::to_string(pool.size()) + " files, need " + std::to_string(n));
    std::vector<std::size_t> idx(pool.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = std::uniform_int_distribution<std::size_t>(i, idx.size() - 1)(rng);
        std::swap(idx[i], idx[j]);
        out.push_back(pool[idx[i]]);
    }
    return out;
}

inline ClipRef draw_silence_ref(const NoiseLengths& noise, const EpisodeConfig& cfg, std::mt19937_64& rng) {
    if (noise.empty()) throw DataError("no background-noise files for silence synthesis");
    auto it = noise.begin();
    std::advance(it, static_cast<long>(std::uniform_int_distribution<std::size_t>(0, noise.size() - 1)(rng)));
    return {kSilenceClass, it->first, draw_silence(it->second, rng, {cfg.silence_gain_lo, cfg.silence_gain_hi})};
}

/// `n` distinct unknown clips: keyword uniform over the unknown set, then file uniform.
inline std::vector<ClipRef> draw_unknown(const SplitManifest& m, std::size_t n, std::mt19937_64& rng) {
    const auto& kws = m.partition.unknown_keywords;
    std::size_t available = 0;
    for (const auto& k : kws) available += m.meta_train.count(k) ? m.meta_train.at(k).size() : 0;
    if (available < n)
        throw DataError("unknown keywords have " + std::to_string(available) + " meta-train files, need " + std::to_string(n));
    std::set<std::string> used;
    std::vector<ClipRef> out;
    while (out.size() < n) {
        const auto& k = kws[std::uniform_int_distribution<std::size_t>(0, kws.size() - 1)(rng)];
        const auto& files = m.meta_train.at(k);
        if (files.empty()) continue;
        const auto& f = files[std::uniform_int_distribution<std::size_t>(0, files.size() - 1)(rng)];
        if (used.insert(f).second) out.push_back({kUnknownClass, f, std::nullopt});
    }
    return out;
}

inline void push(std::vector<ClipRef>& refs, std::vector<int>& labels, ClipRef r, std::size_t slot) {
    refs.push_back(std::move(r));
    labels.push_back(static_cast<int>(slot));
}

}  // namespace detail

/// One meta-training task. Extended: support holds K clips of each of N
/// training keywords; query adds silence and unknown in the fixed slots.
/// Original: silence and unknown are ordinary classes in support and query,
/// and all slots are shuffled.
inline MetaTask sample_meta_task(const SplitManifest& m, const NoiseLengths& noise, const EpisodeConfig& cfg,
                                 std::uint64_t seed) {
    cfg.validate();
    if (cfg.variant == Variant::supervised) throw ConfigError("the supervised variant has no meta-training tasks");
    const auto& training = m.partition.training_keywords;
    if (cfg.n_new > training.size())
        throw DataError("n_new = " + std::to_string(cfg.n_new) + " exceeds the " + std::to_string(training.size()) +
                        " training keywords");
    std::mt19937_64 rng(seed);
    const auto chosen = detail::sample_files(training, cfg.n_new, rng, "training keyword set");

    MetaTask t;
    std::vector<std::string> classes = chosen;
    if (cfg.n_fixed >= 1) classes.push_back(kSilenceClass);
    if (cfg.n_fixed >= 2) classes.push_back(kUnknownClass);
    if (cfg.variant == Variant::original) std::shuffle(classes.begin(), classes.end(), rng);
    t.slot_classes = classes;

    const std::size_t k = cfg.k_shot, q = cfg.query_per_class;
    for (std::size_t slot = 0; slot < classes.size(); ++slot) {
        const auto& c = classes[slot];
        const bool fixed = c == kSilenceClass || c == kUnknownClass;
        const std::size_t n_support = fixed && cfg.variant == Variant::extended ? 0 : k;
        std::vector<ClipRef> refs;
        if (c == kSilenceClass) {
            for (std::size_t i = 0; i < n_support + q; ++i) refs.push_back(detail::draw_silence_ref(noise, cfg, rng));
        } else if (c == kUnknownClass) {
            refs = detail::draw_unknown(m, n_support + q, rng);
        } else {
            t.keyword_map[c] = static_cast<int>(slot);
            for (auto& f : detail::sample_files(m.meta_train.at(c), n_support + q, rng, "keyword '" + c + "'"))
                refs.push_back({c, std::move(f), std::nullopt});
        }
        for (std::size_t i = 0; i < refs.size(); ++i)
            detail::push(i < n_support ? t.support : t.query, i < n_support ? t.support_labels : t.query_labels, refs[i],
                         slot);
    }
    return t;
}

/// The fine-tune/evaluate task on the user keywords. Slots: user keywords in
/// alphabetical order, then silence, unknown. Support: K clips per user keyword
/// from the fine-tune pool (plus K silence and K unknown for the original and
/// supervised variants). Query: the whole eval pool plus as many silence crops.
inline MetaTask build_target_task(const SplitManifest& m, const NoiseLengths& noise, const EpisodeConfig& cfg,
                                  std::uint64_t seed) {
    cfg.validate();
    auto users = m.partition.user_keywords;
    std::sort(users.begin(), users.end());
    if (cfg.n_new != users.size())
        throw ConfigError("n_new = " + std::to_string(cfg.n_new) + " but the partition has " +
                          std::to_string(users.size()) + " user keywords");
    std::mt19937_64 rng(seed);
    MetaTask t;
    t.slot_classes = users;
    if (cfg.n_fixed >= 1) t.slot_classes.push_back(kSilenceClass);
    if (cfg.n_fixed >= 2) t.slot_classes.push_back(kUnknownClass);
    const bool fixed_in_support = cfg.variant != Variant::extended;

    for (std::size_t slot = 0; slot < t.slot_classes.size(); ++slot) {
        const auto& c = t.slot_classes[slot];
        if (c == kSilenceClass) {
            if (fixed_in_support)
                for (std::size_t i = 0; i < cfg.k_shot; ++i)
                    detail::push(t.support, t.support_labels, detail::draw_silence_ref(noise, cfg, rng), slot);
            continue;
        }
        if (c != kUnknownClass) t.keyword_map[c] = static_cast<int>(slot);
        if (c == kUnknownClass && !fixed_in_support) continue;
        const auto pool = m.fine_tune_pool.find(c);
        if (pool == m.fine_tune_pool.end()) throw DataError("no fine-tune pool for class '" + c + "'");
        for (auto& f : detail::sample_files(pool->second, cfg.k_shot, rng, "fine-tune pool of '" + c + "'"))
            detail::push(t.support, t.support_labels, {c, std::move(f), std::nullopt}, slot);
    }
    // Query draws come after all support draws, from a separate stream, so
    // silence crops depend only on the seed.
    std::mt19937_64 qrng(derive_seed(seed, 1));
    for (std::size_t slot = 0; slot < t.slot_classes.size(); ++slot) {
        const auto& c = t.slot_classes[slot];
        if (c == kSilenceClass) {
            for (std::size_t i = 0; i < m.eval_per_class; ++i)
                detail::push(t.query, t.query_labels, detail::draw_silence_ref(noise, cfg, qrng), slot);
            continue;
        }
        const auto pool = m.eval_pool.find(c);
        if (pool == m.eval_pool.end()) throw DataError("no eval pool for class '" + c + "'");
        for (const auto& f : pool->second) detail::push(t.query, t.query_labels, {c, f, std::nullopt}, slot);
    }
    return t;
}

// ----------------------------------------------------------------- features

template <class T>
struct TaskTensors {
    Tensor<T> support_x;
    std::vector<int> support_y;
    Tensor<T> query_x;
    std::vector<int> query_y;
};

template <class T>
Tensor<T> featurize(const std::vector<ClipRef>& refs, FeatureStore& store) {
    std::vector<FeatureStore::Ptr> keep;
    std::vector<const FeatureMap*> maps;
    for (const auto& r : refs) {
        keep.push_back(r.is_silence() ? store.silence(r.path, *r.silence) : store.clip(r.path));
        maps.push_back(keep.back().get());
    }
    return stack_features<T>(maps);
}

template <class T>
TaskTensors<T> materialize(const MetaTask& t, FeatureStore& store) {
    TaskTensors<T> out;
    if (!t.support.empty()) out.support_x = featurize<T>(t.support, store);
    out.support_y = t.support_labels;
    out.query_x = featurize<T>(t.query, store);
    out.query_y = t.query_labels;
    return out;
}

// ----------------------------------------------------------------- dumps

inline nlohmann::json to_json(const ClipRef& r, int label) {
    nlohmann::json j = {{"class", r.class_name}, {"path", r.path}, {"label", label}};
    if (r.silence) {
        j["offset"] = r.silence->offset;
        j["gain"] = r.silence->gain;
    }
    return j;
}

/// One JSON object per task, for JSON-lines episode dumps.
inline nlohmann::json to_json(const MetaTask& t) {
    nlohmann::json support = nlohmann::json::array(), query = nlohmann::json::array();
    for (std::size_t i = 0; i < t.support.size(); ++i) support.push_back(to_json(t.support[i], t.support_labels[i]));
    for (std::size_t i = 0; i < t.query.size(); ++i) query.push_back(to_json(t.query[i], t.query_labels[i]));
    return {{"slots", t.slot_classes}, {"keyword_map", t.keyword_map}, {"support", support}, {"query", query}};
}

}  // namespace metakws
