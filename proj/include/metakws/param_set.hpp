#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "metakws/autodiff.hpp"
#include "metakws/errors.hpp"
#include "metakws/tensor.hpp"

namespace metakws {

/// Insertion-ordered name -> value map with unique names.
template <class V>
class Named {
  public:
    using Item = std::pair<std::string, V>;

    void add(std::string name, V value) {
        if (index_.count(name)) throw Error("duplicate parameter name '" + name + "'");
        index_.emplace(name, items_.size());
        items_.emplace_back(std::move(name), std::move(value));
    }

    const V& at(const std::string& name) const { return items_.at(lookup(name)).second; }
    V& at(const std::string& name) { return items_.at(lookup(name)).second; }
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t size() const noexcept { return items_.size(); }

    /// Total number of scalar entries.
    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& [name, v] : items_) n += v.size();
        return n;
    }
    bool empty() const noexcept { return items_.empty(); }
    const Item& operator[](std::size_t i) const { return items_[i]; }
    Item& operator[](std::size_t i) { return items_[i]; }

    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }
    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (const auto& [n, v] : items_) out.push_back(n);
        return out;
    }

    std::vector<V> values() const {
        std::vector<V> out;
        for (const auto& [n, v] : items_) out.push_back(v);
        return out;
    }

    /// Same names and order, new values.
    template <class U>
    Named<U> with_values(std::vector<U> values) const {
        if (values.size() != items_.size()) throw Error("with_values: count mismatch");
        Named<U> out;
        for (std::size_t i = 0; i < items_.size(); ++i) out.add(items_[i].first, std::move(values[i]));
        return out;
    }

    bool operator==(const Named&) const = default;

  private:
    std::size_t lookup(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw Error("unknown parameter '" + name + "'");
        return it->second;
    }

    std::vector<Item> items_;
    std::map<std::string, std::size_t> index_;
};

template <class T>
using ParamSet = Named<Tensor<T>>;

template <class T>
using ParamVars = Named<ad::Var<T>>;

template <class T>
ParamVars<T> as_leaves(const ParamSet<T>& params) {
    std::vector<ad::Var<T>> vars;
    for (const auto& [name, t] : params) vars.push_back(ad::Var<T>::leaf(t));
    return params.with_values(std::move(vars));
}

template <class T>
ParamVars<T> as_constants(const ParamSet<T>& params) {
    std::vector<ad::Var<T>> vars;
    for (const auto& [name, t] : params) vars.push_back(ad::Var<T>::constant(t));
    return params.with_values(std::move(vars));
}

template <class T>
ParamSet<T> values_of(const ParamVars<T>& vars) {
    std::vector<Tensor<T>> out;
    for (const auto& [name, v] : vars) out.push_back(v.value());
    return vars.with_values(std::move(out));
}

template <class U, class T>
ParamSet<U> cast_params(const ParamSet<T>& params) {
    std::vector<Tensor<U>> out;
    for (const auto& [name, t] : params) out.push_back(t.template cast<U>());
    return params.with_values(std::move(out));
}

/// Euclidean norm of the concatenated parameter vector.
template <class T>
double l2_norm(const ParamSet<T>& params) {
    double acc = 0;
    for (const auto& [name, t] : params)
        for (T x : t.data()) acc += static_cast<double>(x) * static_cast<double>(x);
    return std::sqrt(acc);
}

// ----------------------------------------------------------------- checkpoint
//
// Text header, then raw little-endian payloads in header order:
//
//   METAKWS-PARAMS 1
//   count <n>
//   <name> <f32|f64> <rank> <dims...>
//   ...
//   end
//   <payload bytes>

inline constexpr int kCheckpointVersion = 1;

namespace detail {

template <class T>
constexpr const char* dtype_name() {
    if constexpr (std::is_same_v<T, float>)
        return "f32";
    else
        return "f64";
}

template <class T>
void write_le(std::ostream& os, std::span<const T> values) {
    static_assert(std::is_floating_point_v<T>);
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
    } else {
        for (T v : values) {
            auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
            std::reverse(bytes.begin(), bytes.end());
            os.write(bytes.data(), sizeof(T));
        }
    }
}

template <class T>
void read_le(std::istream& is, std::span<T> values) {
    is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
    if constexpr (std::endian::native != std::endian::little) {
        for (T& v : values) {
            auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
            std::reverse(bytes.begin(), bytes.end());
            v = std::bit_cast<T>(bytes);
        }
    }
}

}  // namespace detail

template <class T>
void save_params(const std::filesystem::path& path, const ParamSet<T>& params) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write checkpoint " + path.string());
    os << "METAKWS-PARAMS " << kCheckpointVersion << '\n' << "count " << params.size() << '\n';
    for (const auto& [name, t] : params) {
        os << name << ' ' << detail::dtype_name<T>() << ' ' << t.rank();
        for (auto d : t.shape()) os << ' ' << d;
        os << '\n';
    }
    os << "end\n";
    for (const auto& [name, t] : params) detail::write_le<T>(os, t.data());
    if (!os) throw Error("failed writing checkpoint " + path.string());
}

/// Loads a checkpoint, converting the stored dtype to T.
template <class T>
ParamSet<T> load_params(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open checkpoint " + path.string());
    std::string line, magic;
    int version = 0;
    std::getline(is, line);
    std::istringstream(line) >> magic >> version;
    if (magic != "METAKWS-PARAMS") throw FormatError(path.string() + ": not a parameter checkpoint");
    if (version != kCheckpointVersion)
        throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));

    std::size_t count = 0;
    std::getline(is, line);
    {
        std::istringstream ls(line);
        std::string key;
        ls >> key >> count;
        if (key != "count") throw FormatError(path.string() + ": missing count line");
    }
    struct Entry {
        std::string name, dtype;
        Shape shape;
    };
    std::vector<Entry> entries(count);
    for (auto& e : entries) {
        if (!std::getline(is, line)) throw FormatError(path.string() + ": truncated header");
        std::istringstream ls(line);
        std::size_t rank = 0;
        ls >> e.name >> e.dtype >> rank;
        e.shape.resize(rank);
        for (auto& d : e.shape) ls >> d;
        if (!ls || (e.dtype != "f32" && e.dtype != "f64"))
            throw FormatError(path.string() + ": bad header entry '" + line + "'");
    }
    std::getline(is, line);
    if (line != "end") throw FormatError(path.string() + ": header not terminated");

    ParamSet<T> out;
    for (const auto& e : entries) {
        const std::size_t n = shape_size(e.shape);
        std::vector<T> values(n);
        if (e.dtype == "f32") {
            std::vector<float> raw(n);
            detail::read_le<float>(is, raw);
            std::copy(raw.begin(), raw.end(), values.begin());
        } else {
            std::vector<double> raw(n);
            detail::read_le<double>(is, raw);
            std::copy(raw.begin(), raw.end(), values.begin());
        }
        if (!is) throw FormatError(path.string() + ": truncated payload for '" + e.name + "'");
        out.add(e.name, Tensor<T>(e.shape, std::move(values)));
    }
    return out;
}

}  // namespace metakws
