#pragma once

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <deque>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "metakws/audio.hpp"
#include "metakws/mfcc.hpp"

namespace metakws {

inline std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a(const std::string& s) {
    return fnv1a(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(s.data()), s.size()));
}

// ----------------------------------------------------------------- cache file
//
//   "MKWSFEAT" | u32 version | u32 rows | u32 cols | rows*cols float32, all little-endian

inline constexpr char kFeatureMagic[8] = {'M', 'K', 'W', 'S', 'F', 'E', 'A', 'T'};
inline constexpr std::uint32_t kFeatureCacheVersion = 2;

inline void write_feature_file(const std::filesystem::path& path, const FeatureMap& f) {
    std::ostringstream buf;
    buf.write(kFeatureMagic, 8);
    detail::put_u32(buf, kFeatureCacheVersion);
    detail::put_u32(buf, static_cast<std::uint32_t>(f.frames));
    detail::put_u32(buf, static_cast<std::uint32_t>(f.coeffs));
    for (float v : f.values) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        detail::put_u32(buf, bits);
    }
    // Unique temp name per writer, then an atomic rename.
    static std::atomic<std::uint64_t> counter{0};
    const auto tmp = path.string() + ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id())) +
                     "-" + std::to_string(counter++);
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw Error("cannot write " + tmp);
        const auto s = buf.str();
        os.write(s.data(), static_cast<std::streamsize>(s.size()));
        if (!os) throw Error("failed writing " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

/// nullopt if the file is absent, truncated, or has a foreign header.
inline std::optional<FeatureMap> read_feature_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) return std::nullopt;
    const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
    if (bytes.size() < 20 || std::memcmp(bytes.data(), kFeatureMagic, 8) != 0) return std::nullopt;
    if (detail::read_u32(bytes.data() + 8) != kFeatureCacheVersion) return std::nullopt;
    FeatureMap f;
    f.frames = detail::read_u32(bytes.data() + 12);
    f.coeffs = detail::read_u32(bytes.data() + 16);
    if (bytes.size() != 20 + 4 * f.frames * f.coeffs) return std::nullopt;
    f.values.resize(f.frames * f.coeffs);
    for (std::size_t i = 0; i < f.values.size(); ++i) {
        const std::uint32_t bits = detail::read_u32(bytes.data() + 20 + 4 * i);
        std::memcpy(&f.values[i], &bits, 4);
    }
    return f;
}

/// $METAKWS_CACHE_DIR, else ~/.cache/metakws/features, else nullopt.
inline std::optional<std::filesystem::path> default_cache_dir() {
    if (const char* env = std::getenv("METAKWS_CACHE_DIR"); env && *env) return std::filesystem::path(env);
    if (const char* home = std::getenv("HOME"); home && *home)
        return std::filesystem::path(home) / ".cache" / "metakws" / "features";
    return std::nullopt;
}

/// Lazily computed MFCCs for corpus files and synthesized silence, with an
/// in-memory memo and an optional on-disk cache keyed by (file content hash,
/// front-end config hash). Thread-safe.
class FeatureStore {
  public:
    using Ptr = std::shared_ptr<const FeatureMap>;

    FeatureStore(std::filesystem::path corpus_root, FrontendConfig cfg,
                 std::optional<std::filesystem::path> cache_dir = default_cache_dir(), std::size_t memo_capacity = 65536)
        : root_(std::move(corpus_root)),
          extractor_(cfg),
          cfg_hash_(fnv1a(cfg.canonical())),
          cache_dir_(std::move(cache_dir)),
          capacity_(memo_capacity) {
        if (cache_dir_) std::filesystem::create_directories(*cache_dir_);
    }

    const FrontendConfig& config() const { return extractor_.config(); }
    const std::filesystem::path& root() const { return root_; }
    const std::optional<std::filesystem::path>& cache_dir() const { return cache_dir_; }

    /// Features of a corpus file given by its path relative to the root.
    Ptr clip(const std::string& rel_path) {
        if (auto hit = memo_get(rel_path)) return hit;
        const auto bytes = detail::read_file(root_ / rel_path);
        std::optional<std::filesystem::path> cache_file;
        if (cache_dir_) {
            char name[48];
            std::snprintf(name, sizeof name, "%016llx-%016llx.mkf", static_cast<unsigned long long>(fnv1a(bytes)),
                          static_cast<unsigned long long>(cfg_hash_));
            cache_file = *cache_dir_ / name;
            if (auto f = read_feature_file(*cache_file)) {
                disk_hits_++;
                return memo_put(rel_path, std::make_shared<const FeatureMap>(std::move(*f)));
            }
        }
        auto f = std::make_shared<const FeatureMap>(extractor_(AudioClip(decode_wav(bytes, rel_path).samples)));
        computed_++;
        if (cache_file) write_feature_file(*cache_file, *f);
        return memo_put(rel_path, std::move(f));
    }

    /// Features of a one-second crop of a background-noise file.
    Ptr silence(const std::string& noise_rel_path, const SilenceDraw& d) {
        std::uint32_t gain_bits;
        std::memcpy(&gain_bits, &d.gain, 4);
        const std::string key = "silence:" + noise_rel_path + "@" + std::to_string(d.offset) + "x" + std::to_string(gain_bits);
        if (auto hit = memo_get(key)) return hit;
        auto f = std::make_shared<const FeatureMap>(extractor_(render_silence(*noise(noise_rel_path), d)));
        computed_++;
        return memo_put(key, std::move(f));
    }

    std::shared_ptr<const Waveform> noise(const std::string& rel_path) {
        {
            std::lock_guard lock(mu_);
            if (auto it = noise_.find(rel_path); it != noise_.end()) return it->second;
        }
        auto w = std::make_shared<const Waveform>(read_wav(root_ / rel_path));
        std::lock_guard lock(mu_);
        return noise_.emplace(rel_path, std::move(w)).first->second;
    }

    std::size_t computed() const { return computed_; }
    std::size_t disk_hits() const { return disk_hits_; }

  private:
    Ptr memo_get(const std::string& key) {
        std::lock_guard lock(mu_);
        auto it = memo_.find(key);
        return it == memo_.end() ? nullptr : it->second;
    }

    Ptr memo_put(const std::string& key, Ptr value) {
        std::lock_guard lock(mu_);
        auto [it, fresh] = memo_.emplace(key, value);
        if (!fresh) return it->second;
        order_.push_back(key);
        while (order_.size() > capacity_) {
            memo_.erase(order_.front());
            order_.pop_front();
        }
        return value;
    }

    std::filesystem::path root_;
    MfccExtractor extractor_;
    std::uint64_t cfg_hash_;
    std::optional<std::filesystem::path> cache_dir_;
    std::size_t capacity_;

    std::mutex mu_;
    std::unordered_map<std::string, Ptr> memo_;
    std::deque<std::string> order_;
    std::unordered_map<std::string, std::shared_ptr<const Waveform>> noise_;
    std::atomic<std::size_t> computed_{0};
    std::atomic<std::size_t> disk_hits_{0};
};

}  // namespace metakws
