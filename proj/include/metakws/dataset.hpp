#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "metakws/audio.hpp"
#include "metakws/errors.hpp"

namespace metakws {

inline const std::string kBackgroundNoiseDir = "_background_noise_";
inline const std::string kSilenceClass = "silence";
inline const std::string kUnknownClass = "unknown";

/// Keyword -> sorted WAV paths (relative to root), plus background-noise files.
struct CorpusIndex {
    std::filesystem::path root;
    std::map<std::string, std::vector<std::string>> keywords;
    std::vector<std::string> silence_sources;

    std::filesystem::path resolve(const std::string& rel) const { return root / rel; }
};

namespace detail {

inline std::vector<std::string> wav_files(const std::filesystem::path& root, const std::string& dir) {
    std::vector<std::string> out;
    for (const auto& e : std::filesystem::directory_iterator(root / dir)) {
        if (!e.is_regular_file()) continue;
        auto ext = e.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        if (ext == ".wav") out.push_back(dir + "/" + e.path().filename().string());
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace detail

/// Every subdirectory not starting with '_' or '.' is a keyword.
inline CorpusIndex scan_corpus(const std::filesystem::path& root) {
    std::error_code ec;
    if (!std::filesystem::is_directory(root, ec)) throw DataError("corpus root does not exist: " + root.string());
    CorpusIndex index;
    index.root = root;
    for (const auto& e : std::filesystem::directory_iterator(root)) {
        if (!e.is_directory()) continue;
        const auto name = e.path().filename().string();
        if (name == kBackgroundNoiseDir)
            index.silence_sources = detail::wav_files(root, name);
        else if (!name.starts_with('_') && !name.starts_with('.'))
            index.keywords[name] = detail::wav_files(root, name);
    }
    if (index.keywords.empty()) throw DataError("no keyword directories under " + root.string());
    return index;
}

// ----------------------------------------------------------------- partition

enum class TaskPreset { digits, commands };

inline std::string preset_name(TaskPreset p) { return p == TaskPreset::digits ? "digits" : "commands"; }

inline TaskPreset parse_preset(const std::string& s) {
    if (s == "digits") return TaskPreset::digits;
    if (s == "commands") return TaskPreset::commands;
    throw ConfigError("unknown task preset '" + s + "' (expected digits or commands)");
}

inline std::vector<std::string> preset_keywords(TaskPreset p) {
    if (p == TaskPreset::digits) return {"zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"};
    return {"yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go"};
}

inline constexpr std::size_t kCorpusKeywords = 35;
inline constexpr std::size_t kUnknownKeywords = 5;

struct ClassPartition {
    TaskPreset preset = TaskPreset::digits;
    std::vector<std::string> user_keywords;
    std::vector<std::string> training_keywords;
    std::vector<std::string> unknown_keywords;
    std::vector<std::string> silence_sources;

    void validate() const {
        std::set<std::string> all;
        for (const auto* list : {&user_keywords, &training_keywords, &unknown_keywords})
            for (const auto& k : *list)
                if (!all.insert(k).second) throw DataError("keyword '" + k + "' appears in more than one role");
        if (user_keywords.empty() || training_keywords.empty() || unknown_keywords.empty())
            throw DataError("partition has an empty keyword role");
    }

    bool operator==(const ClassPartition&) const = default;
};

/// User keywords from the preset; 5 of the remaining keywords (seeded) form the
/// unknown set; the rest are training keywords. Lists other than the user
/// keywords are sorted.
inline ClassPartition make_partition(const CorpusIndex& index, TaskPreset preset, std::uint64_t seed) {
    ClassPartition p;
    p.preset = preset;
    p.user_keywords = preset_keywords(preset);
    std::vector<std::string> missing;
    for (const auto& k : p.user_keywords)
        if (!index.keywords.count(k)) missing.push_back(k);
    if (!missing.empty()) {
        std::string names;
        for (const auto& k : missing) names += (names.empty() ? "" : ", ") + k;
        throw DataError("preset " + preset_name(preset) + " keywords missing from corpus: " + names);
    }
    if (index.keywords.size() != kCorpusKeywords)
        throw DataError("expected " + std::to_string(kCorpusKeywords) + " keyword directories, found " +
                        std::to_string(index.keywords.size()));

    std::vector<std::string> rest;
    for (const auto& [k, files] : index.keywords)
        if (std::find(p.user_keywords.begin(), p.user_keywords.end(), k) == p.user_keywords.end()) rest.push_back(k);
    std::mt19937_64 rng(seed);
    std::shuffle(rest.begin(), rest.end(), rng);
    p.unknown_keywords.assign(rest.begin(), rest.begin() + kUnknownKeywords);
    p.training_keywords.assign(rest.begin() + kUnknownKeywords, rest.end());
    std::sort(p.unknown_keywords.begin(), p.unknown_keywords.end());
    std::sort(p.training_keywords.begin(), p.training_keywords.end());
    p.silence_sources = index.silence_sources;
    p.validate();
    return p;
}

// ----------------------------------------------------------------- splits

using FileLists = std::map<std::string, std::vector<std::string>>;

/// File assignment to meta-train / fine-tune pool / eval pool. The fine-tune and
/// eval pools are keyed by user keyword plus "unknown"; the unknown pools are
/// held out from the unknown keywords' meta-train lists.
struct SplitManifest {
    std::uint64_t seed = 0;
    std::size_t eval_per_class = 100;
    std::size_t max_shot = 100;
    ClassPartition partition;
    FileLists meta_train;
    FileLists fine_tune_pool;
    FileLists eval_pool;

    bool operator==(const SplitManifest&) const = default;
};

inline SplitManifest make_splits(const CorpusIndex& index, const ClassPartition& partition, std::size_t eval_per_class,
                                 std::size_t max_shot, std::uint64_t seed) {
    partition.validate();
    SplitManifest m;
    m.seed = seed;
    m.eval_per_class = eval_per_class;
    m.max_shot = max_shot;
    m.partition = partition;
    std::mt19937_64 rng(seed);
    auto files_of = [&](const std::string& k) -> const std::vector<std::string>& {
        auto it = index.keywords.find(k);
        if (it == index.keywords.end()) throw DataError("keyword '" + k + "' not in corpus index");
        return it->second;
    };

    for (const auto& k : partition.user_keywords) {
        auto files = files_of(k);
        if (files.size() < eval_per_class + max_shot)
            throw DataError("keyword '" + k + "' has " + std::to_string(files.size()) + " files, need " +
                            std::to_string(eval_per_class + max_shot) + " (eval_per_class + max_shot)");
        std::shuffle(files.begin(), files.end(), rng);
        m.eval_pool[k].assign(files.begin(), files.begin() + static_cast<long>(eval_per_class));
        m.fine_tune_pool[k].assign(files.begin() + static_cast<long>(eval_per_class), files.end());
    }
    for (const auto& k : partition.training_keywords) m.meta_train[k] = files_of(k);

    // Unknown pools are drawn round-robin over the shuffled unknown keywords.
    std::vector<std::vector<std::string>> unk;
    std::size_t total = 0;
    for (const auto& k : partition.unknown_keywords) {
        auto files = files_of(k);
        std::shuffle(files.begin(), files.end(), rng);
        total += files.size();
        unk.push_back(std::move(files));
    }
    if (total < eval_per_class + max_shot)
        throw DataError("unknown keywords have " + std::to_string(total) + " files, need " +
                        std::to_string(eval_per_class + max_shot));
    std::vector<std::size_t> taken(unk.size(), 0);
    auto draw = [&](std::size_t n, std::vector<std::string>& out) {
        std::size_t k = 0;
        while (out.size() < n) {
            if (taken[k] < unk[k].size()) out.push_back(unk[k][taken[k]++]);
            k = (k + 1) % unk.size();
        }
    };
    draw(eval_per_class, m.eval_pool[kUnknownClass]);
    draw(max_shot, m.fine_tune_pool[kUnknownClass]);
    for (std::size_t k = 0; k < unk.size(); ++k) {
        auto& rest = m.meta_train[partition.unknown_keywords[k]];
        rest.assign(unk[k].begin() + static_cast<long>(taken[k]), unk[k].end());
        std::sort(rest.begin(), rest.end());
    }
    return m;
}

/// Throws if a file is listed twice or (when `root` is given) does not exist.
inline void validate_manifest(const SplitManifest& m, const std::optional<std::filesystem::path>& root = std::nullopt) {
    m.partition.validate();
    std::map<std::string, std::string> owner;
    auto check = [&](const FileLists& lists, const std::string& split) {
        for (const auto& [cls, files] : lists)
            for (const auto& f : files) {
                const auto [it, fresh] = owner.emplace(f, split + "/" + cls);
                if (!fresh) throw DataError("file " + f + " listed in both " + it->second + " and " + split + "/" + cls);
                if (root && !std::filesystem::exists(*root / f)) throw DataError("manifest file missing: " + f);
            }
    };
    check(m.meta_train, "meta_train");
    check(m.fine_tune_pool, "fine_tune_pool");
    check(m.eval_pool, "eval_pool");
    for (const auto& k : m.partition.user_keywords)
        if (m.meta_train.count(k)) throw DataError("user keyword '" + k + "' listed in meta_train");
}

// ----------------------------------------------------------------- JSON

inline nlohmann::json to_json(const ClassPartition& p) {
    return {{"preset", preset_name(p.preset)},
            {"user_keywords", p.user_keywords},
            {"training_keywords", p.training_keywords},
            {"unknown_keywords", p.unknown_keywords},
            {"silence_sources", p.silence_sources}};
}

inline ClassPartition partition_from_json(const nlohmann::json& j) {
    ClassPartition p;
    p.preset = parse_preset(j.at("preset").get<std::string>());
    p.user_keywords = j.at("user_keywords").get<std::vector<std::string>>();
    p.training_keywords = j.at("training_keywords").get<std::vector<std::string>>();
    p.unknown_keywords = j.at("unknown_keywords").get<std::vector<std::string>>();
    p.silence_sources = j.at("silence_sources").get<std::vector<std::string>>();
    return p;
}

inline constexpr int kManifestVersion = 1;

inline nlohmann::json to_json(const SplitManifest& m) {
    return {{"format", "metakws-manifest"},
            {"version", kManifestVersion},
            {"seed", m.seed},
            {"eval_per_class", m.eval_per_class},
            {"max_shot", m.max_shot},
            {"partition", to_json(m.partition)},
            {"meta_train", m.meta_train},
            {"fine_tune_pool", m.fine_tune_pool},
            {"eval_pool", m.eval_pool}};
}

inline SplitManifest manifest_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format") != "metakws-manifest") throw FormatError("not a metakws manifest");
        if (j.at("version") != kManifestVersion)
            throw FormatError("unsupported manifest version " + j.at("version").dump());
        SplitManifest m;
        m.seed = j.at("seed").get<std::uint64_t>();
        m.eval_per_class = j.at("eval_per_class").get<std::size_t>();
        m.max_shot = j.at("max_shot").get<std::size_t>();
        m.partition = partition_from_json(j.at("partition"));
        m.meta_train = j.at("meta_train").get<FileLists>();
        m.fine_tune_pool = j.at("fine_tune_pool").get<FileLists>();
        m.eval_pool = j.at("eval_pool").get<FileLists>();
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed manifest: ") + e.what());
    }
}

inline void save_manifest(const std::filesystem::path& path, const SplitManifest& m) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + path.string());
    os << to_json(m).dump(2) << '\n';
}

inline SplitManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot read manifest " + path.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return manifest_from_json(j);
}

}  // namespace metakws
