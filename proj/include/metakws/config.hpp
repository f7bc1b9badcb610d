#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "toml.hpp"

#include "metakws/dataset.hpp"
#include "metakws/episodes.hpp"
#include "metakws/meta_learn.hpp"
#include "metakws/mfcc.hpp"
#include "metakws/model.hpp"

namespace metakws {

/// One declarative configuration for every command. Top-level keys hold
/// paths, seeds and evaluation settings; module settings live in the
/// [frontend] [model] [episode] [train] tables.
struct RunConfig {
    std::string data_root;
    std::string out = "out";
    std::string manifest;  // empty: <out>/manifest.json
    std::string cache_dir;  // empty: METAKWS_CACHE_DIR or the per-user default
    TaskPreset preset = TaskPreset::digits;
    std::uint64_t seed = 1;
    std::size_t eval_per_class = 100;
    std::size_t max_shot = 100;
    std::size_t trials = 100;
    std::uint64_t eval_seed = 1000;

    FrontendConfig frontend;
    ModelConfig model;
    EpisodeConfig episode;
    TrainConfig train;

    /// Model input and output shape follow the front-end and the episode.
    void derive() {
        model.input_h = frontend.frames();
        model.input_w = frontend.n_coeffs;
        model.n_outputs = episode.n_classes();
    }

    void validate() const {
        frontend.validate();
        model.validate();
        episode.validate();
        train.validate();
        if (trials == 0) throw ConfigError("trials must be at least 1");
        if (eval_per_class == 0) throw ConfigError("eval_per_class must be at least 1");
    }

    std::filesystem::path manifest_path() const {
        return manifest.empty() ? std::filesystem::path(out) / "manifest.json" : std::filesystem::path(manifest);
    }

    std::optional<std::filesystem::path> feature_cache_dir() const {
        if (!cache_dir.empty()) return std::filesystem::path(cache_dir);
        return default_cache_dir();
    }
};

namespace detail {

template <class E>
struct EnumField {
    E* target;
    std::string (*name)(E);
    E (*parse)(const std::string&);
};

inline std::string reduction_name(Reduction r) { return r == Reduction::sum ? "sum" : "mean"; }
inline Reduction parse_reduction(const std::string& s) {
    if (s == "sum") return Reduction::sum;
    if (s == "mean") return Reduction::mean;
    throw ConfigError("unknown loss reduction '" + s + "' (expected sum or mean)");
}
inline std::string aggregation_name(TaskAggregation a) { return a == TaskAggregation::sum ? "sum" : "mean"; }
inline TaskAggregation parse_aggregation(const std::string& s) {
    if (s == "sum") return TaskAggregation::sum;
    if (s == "mean") return TaskAggregation::mean;
    throw ConfigError("unknown task aggregation '" + s + "' (expected sum or mean)");
}
inline std::string optimizer_name(OuterOptimizerKind k) { return k == OuterOptimizerKind::sgd ? "sgd" : "adam"; }
inline OuterOptimizerKind parse_optimizer(const std::string& s) {
    if (s == "sgd") return OuterOptimizerKind::sgd;
    if (s == "adam") return OuterOptimizerKind::adam;
    throw ConfigError("unknown outer optimizer '" + s + "' (expected sgd or adam)");
}

struct SeedField {
    std::uint64_t* target;
};

using FieldRef = std::variant<std::size_t*, SeedField, double*, float*, bool*, std::string*,
                              EnumField<TaskPreset>, EnumField<Variant>, EnumField<Reduction>,
                              EnumField<TaskAggregation>, EnumField<OuterOptimizerKind>>;

struct Field {
    std::string section;  // empty for top-level keys
    std::string key;
    FieldRef ref;
    bool derived = false;

    std::string full_name() const { return section.empty() ? key : section + "." + key; }
};

/// Every configurable field, in the order the resolved config lists them.
inline std::vector<Field> fields(RunConfig& c) {
    std::vector<Field> f = {
        {"", "data_root", &c.data_root},
        {"", "out", &c.out},
        {"", "manifest", &c.manifest},
        {"", "cache_dir", &c.cache_dir},
        {"", "preset", EnumField<TaskPreset>{&c.preset, preset_name, parse_preset}},
        {"", "seed", SeedField{&c.seed}},
        {"", "eval_per_class", &c.eval_per_class},
        {"", "max_shot", &c.max_shot},
        {"", "trials", &c.trials},
        {"", "eval_seed", SeedField{&c.eval_seed}},

        {"frontend", "frame_len", &c.frontend.frame_len},
        {"frontend", "frame_step", &c.frontend.frame_step},
        {"frontend", "fft_size", &c.frontend.fft_size},
        {"frontend", "n_mels", &c.frontend.n_mels},
        {"frontend", "n_coeffs", &c.frontend.n_coeffs},
        {"frontend", "mel_low_hz", &c.frontend.mel_low_hz},
        {"frontend", "mel_high_hz", &c.frontend.mel_high_hz},
        {"frontend", "log_floor", &c.frontend.log_floor},

        {"model", "n_blocks", &c.model.n_blocks},
        {"model", "filters", &c.model.filters},
        {"model", "kernel", &c.model.kernel},
        {"model", "stride", &c.model.stride},
        {"model", "batch_norm", &c.model.batch_norm},
        {"model", "bn_eps", &c.model.bn_eps},
        {"model", "n_outputs", &c.model.n_outputs, true},
        {"model", "input_h", &c.model.input_h, true},
        {"model", "input_w", &c.model.input_w, true},

        {"episode", "n_new", &c.episode.n_new},
        {"episode", "n_fixed", &c.episode.n_fixed},
        {"episode", "k_shot", &c.episode.k_shot},
        {"episode", "query_per_class", &c.episode.query_per_class},
        {"episode", "variant", EnumField<Variant>{&c.episode.variant, variant_name, parse_variant}},
        {"episode", "silence_gain_lo", &c.episode.silence_gain_lo},
        {"episode", "silence_gain_hi", &c.episode.silence_gain_hi},

        {"train", "alpha", &c.train.alpha},
        {"train", "beta", &c.train.beta},
        {"train", "inner_steps", &c.train.inner_steps},
        {"train", "finetune_steps", &c.train.finetune_steps},
        {"train", "meta_batch", &c.train.meta_batch},
        {"train", "meta_iterations", &c.train.meta_iterations},
        {"train", "first_order", &c.train.first_order},
        {"train", "loss_reduction", EnumField<Reduction>{&c.train.loss_reduction, reduction_name, parse_reduction}},
        {"train", "task_aggregation",
         EnumField<TaskAggregation>{&c.train.task_aggregation, aggregation_name, parse_aggregation}},
        {"train", "outer_optimizer",
         EnumField<OuterOptimizerKind>{&c.train.outer_optimizer, optimizer_name, parse_optimizer}},
        {"train", "supervised_steps", &c.train.supervised_steps},
        {"train", "supervised_batch", &c.train.supervised_batch},
        {"train", "checkpoint_every", &c.train.checkpoint_every},
        {"train", "threads", &c.train.threads},
        {"train", "divergence_limit", &c.train.divergence_limit},
    };
    return f;
}

[[noreturn]] inline void bad_type(const Field& f, const char* expected) {
    throw ConfigError("config key '" + f.full_name() + "' must be " + expected);
}

inline void assign(const Field& f, const toml::node& n) {
    std::visit(
        [&](auto target) {
            using P = decltype(target);
            if constexpr (std::is_same_v<P, std::size_t*> || std::is_same_v<P, SeedField>) {
                const auto v = n.value<std::int64_t>();
                if (!v || !n.is_integer() || *v < 0) bad_type(f, "a non-negative integer");
                if constexpr (std::is_same_v<P, SeedField>) *target.target = static_cast<std::uint64_t>(*v);
                else *target = static_cast<std::size_t>(*v);
            } else if constexpr (std::is_same_v<P, double*> || std::is_same_v<P, float*>) {
                if (!n.is_number()) bad_type(f, "a number");
                *target = static_cast<std::remove_pointer_t<P>>(*n.value<double>());
            } else if constexpr (std::is_same_v<P, bool*>) {
                if (!n.is_boolean()) bad_type(f, "true or false");
                *target = *n.value<bool>();
            } else if constexpr (std::is_same_v<P, std::string*>) {
                if (!n.is_string()) bad_type(f, "a string");
                *target = *n.value<std::string>();
            } else {
                if (!n.is_string()) bad_type(f, "a string");
                *target.target = target.parse(*n.value<std::string>());
            }
        },
        f.ref);
}

inline void emit(const Field& f, toml::table& t) {
    std::visit(
        [&](auto target) {
            using P = decltype(target);
            if constexpr (std::is_same_v<P, std::size_t*>)
                t.insert_or_assign(f.key, static_cast<std::int64_t>(*target));
            else if constexpr (std::is_same_v<P, SeedField>)
                t.insert_or_assign(f.key, static_cast<std::int64_t>(*target.target));
            else if constexpr (std::is_same_v<P, double*> || std::is_same_v<P, float*>)
                t.insert_or_assign(f.key, static_cast<double>(*target));
            else if constexpr (std::is_same_v<P, bool*> || std::is_same_v<P, std::string*>)
                t.insert_or_assign(f.key, *target);
            else
                t.insert_or_assign(f.key, target.name(*target.target));
        },
        f.ref);
}

}  // namespace detail

/// Applies a parsed TOML document on top of `base`. Unknown sections or keys
/// raise ConfigError naming the key.
inline RunConfig apply_toml(RunConfig base, const toml::table& doc) {
    auto fs = detail::fields(base);
    std::map<std::string, const detail::Field*> by_name;
    std::map<std::string, bool> sections;
    for (const auto& f : fs) {
        by_name[f.full_name()] = &f;
        if (!f.section.empty()) sections[f.section] = true;
    }
    std::vector<std::pair<const detail::Field*, const toml::node*>> derived;
    for (const auto& [k, node] : doc) {
        const std::string key(k.str());
        if (sections.count(key)) {
            if (!node.is_table()) throw ConfigError("config key '" + key + "' must be a table");
            for (const auto& [sk, snode] : *node.as_table()) {
                const std::string full = key + "." + std::string(sk.str());
                const auto it = by_name.find(full);
                if (it == by_name.end()) throw ConfigError("unknown config key '" + full + "'");
                if (it->second->derived) derived.emplace_back(it->second, &snode);
                else detail::assign(*it->second, snode);
            }
            continue;
        }
        const auto it = by_name.find(key);
        if (it == by_name.end() || !it->second->section.empty())
            throw ConfigError("unknown config key '" + key + "'");
        detail::assign(*it->second, node);
    }
    base.derive();
    // Derived model fields may be restated but must agree.
    for (const auto& [f, node] : derived) {
        const auto v = node->value<std::int64_t>();
        const auto actual = *std::get<std::size_t*>(f->ref);
        if (!v || *v < 0 || static_cast<std::size_t>(*v) != actual)
            throw ConfigError("config key '" + f->full_name() + "' is derived and must equal " + std::to_string(actual));
    }
    return base;
}

inline RunConfig parse_config_text(std::string_view text, const std::string& source = "config", RunConfig base = {}) {
    toml::table doc;
    try {
        doc = toml::parse(text, source);
    } catch (const toml::parse_error& e) {
        std::ostringstream os;
        os << source << ": " << e.description() << " at line " << e.source().begin.line;
        throw ConfigError(os.str());
    }
    return apply_toml(std::move(base), doc);
}

inline RunConfig load_config(const std::filesystem::path& path, RunConfig base = {}) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), path.string(), std::move(base));
}

/// `section.key=value` override; the value is read as a TOML value, or as a
/// bare string if it does not parse as one.
inline RunConfig apply_override(RunConfig base, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq), value = assignment.substr(eq + 1);
    toml::table parsed;
    try {
        parsed = toml::parse("v = " + value);
    } catch (const toml::parse_error&) {
        parsed = toml::table{{"v", value}};
    }
    toml::table doc;
    const auto dot = key.find('.');
    if (dot == std::string::npos) doc.insert(key, *parsed.get("v"));
    else doc.insert(key.substr(0, dot), toml::table{{key.substr(dot + 1), *parsed.get("v")}});
    return apply_toml(std::move(base), doc);
}

/// Every field with its resolved value, derived ones included.
inline toml::table to_toml(RunConfig c) {
    c.derive();
    toml::table root;
    for (const auto& f : detail::fields(c)) {
        if (f.section.empty()) {
            detail::emit(f, root);
            continue;
        }
        if (!root.contains(f.section)) root.insert(f.section, toml::table{});
        detail::emit(f, *root.get_as<toml::table>(f.section));
    }
    return root;
}

inline std::string to_toml_string(const RunConfig& c) {
    std::ostringstream os;
    os << to_toml(c) << '\n';
    return os.str();
}

inline void save_config(const std::filesystem::path& path, const RunConfig& c) {
    std::ofstream(path, std::ios::trunc) << to_toml_string(c);
}

inline bool operator==(const RunConfig& a, const RunConfig& b) { return to_toml_string(a) == to_toml_string(b); }

}  // namespace metakws
