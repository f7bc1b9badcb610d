#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "metakws/episodes.hpp"
#include "metakws/meta_learn.hpp"

namespace metakws {

using Confusion = std::vector<std::vector<std::size_t>>;  // [true][predicted]

struct TrialResult {
    std::uint64_t seed = 0;
    double accuracy = 0;
    Confusion confusion;
    std::size_t support_size = 0;
    std::size_t query_size = 0;
};

/// Everything a trial needs besides the checkpoint and the seed.
template <class T>
struct EvalContext {
    const SplitManifest* manifest = nullptr;
    const NoiseLengths* noise = nullptr;
    FeatureStore* store = nullptr;
    EpisodeConfig episode;
    TrainConfig train;
    ModelConfig model;
};

/// Predicted class per row of `x`, classified as one batch.
template <class T>
std::vector<int> classify(const ModelConfig& model, const ParamSet<T>& theta, const Tensor<T>& x) {
    ad::NoGradGuard no_grad;
    return argmax_rows(forward(model, as_constants(theta), ad::Var<T>::constant(x)).value());
}

/// build_target_task -> fine-tune (or, for the supervised variant, train from
/// scratch on the support) -> argmax over the whole query set.
template <class T>
TrialResult run_trial(const ParamSet<T>& checkpoint, const EvalContext<T>& ctx, std::uint64_t seed) {
    const auto task = build_target_task(*ctx.manifest, *ctx.noise, ctx.episode, seed);
    const auto tensors = materialize<T>(task, *ctx.store);
    ParamSet<T> theta;
    if (ctx.episode.variant == Variant::supervised)
        theta = train_supervised<T>(tensors.support_x, tensors.support_y, ctx.train, ctx.model, derive_seed(seed, 7));
    else
        theta = fine_tune_model<T>(ctx.model, checkpoint, tensors, ctx.episode, ctx.train);
    const auto pred = classify(ctx.model, theta, tensors.query_x);

    TrialResult r;
    r.seed = seed;
    r.support_size = task.support.size();
    r.query_size = task.query.size();
    const std::size_t c = ctx.episode.n_classes();
    r.confusion.assign(c, std::vector<std::size_t>(c, 0));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        r.confusion[static_cast<std::size_t>(tensors.query_y[i])][static_cast<std::size_t>(pred[i])]++;
        correct += pred[i] == tensors.query_y[i];
    }
    r.accuracy = static_cast<double>(correct) / static_cast<double>(pred.size());
    return r;
}

struct EvalReport {
    std::string variant;
    std::size_t k_shot = 0;
    std::size_t n_trials = 0;
    std::uint64_t base_seed = 0;
    std::vector<double> accuracies;
    double mean = 0;
    double ci95 = 0;
    Confusion confusion;
    std::vector<std::string> classes;
    std::size_t support_size = 0;
    std::size_t query_size = 0;
    std::string protocol;

    bool operator==(const EvalReport&) const = default;
};

/// Sample standard deviation (n - 1); zero for fewer than two values.
inline double sample_stddev(const std::vector<double>& xs) {
    if (xs.size() < 2) return 0;
    double mean = 0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double ss = 0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

/// mean and 1.96 * stddev / sqrt(n).
inline std::pair<double, double> mean_ci95(const std::vector<double>& xs) {
    if (xs.empty()) return {0, 0};
    double mean = 0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    return {mean, 1.96 * sample_stddev(xs) / std::sqrt(static_cast<double>(xs.size()))};
}

inline const char* kEvalProtocol =
    "each trial re-samples the K-shot support and the silence crops; eval-pool membership is fixed by the manifest; "
    "ci95 = 1.96 * sample stddev / sqrt(n_trials)";

inline EvalReport aggregate(const std::vector<TrialResult>& trials, const std::string& variant, std::size_t k,
                            std::uint64_t base_seed, std::vector<std::string> classes) {
    EvalReport rep;
    rep.variant = variant;
    rep.k_shot = k;
    rep.n_trials = trials.size();
    rep.base_seed = base_seed;
    rep.classes = std::move(classes);
    rep.protocol = kEvalProtocol;
    for (const auto& t : trials) {
        rep.accuracies.push_back(t.accuracy);
        if (rep.confusion.empty()) rep.confusion = t.confusion;
        else
            for (std::size_t i = 0; i < t.confusion.size(); ++i)
                for (std::size_t j = 0; j < t.confusion[i].size(); ++j) rep.confusion[i][j] += t.confusion[i][j];
        rep.support_size = t.support_size;
        rep.query_size = t.query_size;
    }
    std::tie(rep.mean, rep.ci95) = mean_ci95(rep.accuracies);
    return rep;
}

/// Trials with seeds base_seed .. base_seed + n_trials - 1, run on up to
/// `threads` workers; results are stored by seed index.
template <class T>
EvalReport run_eval(const ParamSet<T>& checkpoint, const EvalContext<T>& ctx, std::size_t n_trials,
                    std::uint64_t base_seed, std::size_t threads = 1) {
    if (n_trials == 0) throw ConfigError("evaluate: n_trials must be at least 1");
    std::vector<TrialResult> trials(n_trials);
    const std::size_t workers = std::min(std::max<std::size_t>(threads, 1), n_trials);
    if (workers == 1) {
        for (std::size_t i = 0; i < n_trials; ++i) trials[i] = run_trial(checkpoint, ctx, base_seed + i);
    } else {
        std::atomic<std::size_t> next{0};
        std::exception_ptr failure;
        std::mutex mu;
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (std::size_t i; (i = next++) < n_trials;) {
                    try {
                        trials[i] = run_trial(checkpoint, ctx, base_seed + i);
                    } catch (...) {
                        std::lock_guard lock(mu);
                        if (!failure) failure = std::current_exception();
                    }
                }
            });
        for (auto& t : pool) t.join();
        if (failure) std::rethrow_exception(failure);
    }
    auto users = ctx.manifest->partition.user_keywords;
    std::sort(users.begin(), users.end());
    if (ctx.episode.n_fixed >= 1) users.push_back(kSilenceClass);
    if (ctx.episode.n_fixed >= 2) users.push_back(kUnknownClass);
    return aggregate(trials, variant_name(ctx.episode.variant), ctx.episode.k_shot, base_seed, users);
}

// ----------------------------------------------------------------- outputs

inline nlohmann::json to_json(const EvalReport& r) {
    return {{"variant", r.variant},         {"k_shot", r.k_shot},     {"n_trials", r.n_trials},
            {"base_seed", r.base_seed},     {"accuracies", r.accuracies}, {"mean", r.mean},
            {"ci95", r.ci95},               {"classes", r.classes},   {"confusion", r.confusion},
            {"support_size", r.support_size}, {"query_size", r.query_size}, {"protocol", r.protocol}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
    EvalReport r;
    r.variant = j.at("variant");
    r.k_shot = j.at("k_shot");
    r.n_trials = j.at("n_trials");
    r.base_seed = j.at("base_seed");
    r.accuracies = j.at("accuracies").get<std::vector<double>>();
    r.mean = j.at("mean");
    r.ci95 = j.at("ci95");
    r.classes = j.at("classes").get<std::vector<std::string>>();
    r.confusion = j.at("confusion").get<Confusion>();
    r.support_size = j.at("support_size");
    r.query_size = j.at("query_size");
    r.protocol = j.at("protocol");
    return r;
}

inline std::string csv_header() { return "method,K,mean,ci95"; }

/// Percentages with two decimals, as in the accuracy tables.
inline std::string csv_row(const EvalReport& r) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s,%zu,%.2f,%.2f", r.variant.c_str(), r.k_shot, 100 * r.mean, 100 * r.ci95);
    return buf;
}

inline void write_report(const std::filesystem::path& json_path, const std::filesystem::path& csv_path,
                         const EvalReport& r) {
    std::ofstream(json_path, std::ios::trunc) << to_json(r).dump(2) << '\n';
    std::ofstream(csv_path, std::ios::trunc) << csv_header() << '\n' << csv_row(r) << '\n';
}

/// One report per K; `evaluate_k` runs (or trains and runs) the evaluation for
/// a shot count.
inline std::vector<EvalReport> shot_sweep(const std::vector<std::size_t>& k_list,
                                          const std::function<EvalReport(std::size_t)>& evaluate_k) {
    if (k_list.empty()) throw ConfigError("sweep: empty K list");
    std::vector<EvalReport> out;
    for (std::size_t k : k_list) out.push_back(evaluate_k(k));
    return out;
}

inline void write_sweep(const std::filesystem::path& table_csv, const std::filesystem::path& plot_csv,
                        const std::vector<EvalReport>& reports) {
    std::ofstream table(table_csv, std::ios::trunc), plot(plot_csv, std::ios::trunc);
    table << csv_header() << '\n';
    plot << "K,mean,ci95,variant\n";
    for (const auto& r : reports) {
        table << csv_row(r) << '\n';
        char buf[128];
        std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%s", r.k_shot, r.mean, r.ci95, r.variant.c_str());
        plot << buf << '\n';
    }
}

}  // namespace metakws
