#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "metakws/autodiff.hpp"
#include "metakws/episodes.hpp"
#include "metakws/model.hpp"
#include "metakws/param_set.hpp"

namespace metakws {

enum class TaskAggregation { sum, mean };
enum class OuterOptimizerKind { sgd, adam };

struct TrainConfig {
    double alpha = 0.1;
    double beta = 0.001;
    std::size_t inner_steps = 5;
    std::size_t finetune_steps = 10;
    std::size_t meta_batch = 16;
    std::size_t meta_iterations = 1000;
    bool first_order = false;
    Reduction loss_reduction = Reduction::mean;
    TaskAggregation task_aggregation = TaskAggregation::sum;
    OuterOptimizerKind outer_optimizer = OuterOptimizerKind::sgd;
    std::size_t supervised_steps = 500;
    std::size_t supervised_batch = 32;
    std::size_t checkpoint_every = 500;
    std::size_t threads = 1;
    double divergence_limit = 1e4;

    void validate() const {
        if (!(alpha > 0) || !(beta > 0)) throw ConfigError("train: alpha and beta must be positive");
        if (inner_steps < 1) throw ConfigError("train: inner_steps must be at least 1");
        if (meta_batch < 1) throw ConfigError("train: meta_batch must be at least 1");
        if (supervised_batch < 1) throw ConfigError("train: supervised_batch must be at least 1");
        if (checkpoint_every < 1) throw ConfigError("train: checkpoint_every must be at least 1");
        if (threads < 1) throw ConfigError("train: threads must be at least 1");
        if (!(divergence_limit > 0)) throw ConfigError("train: divergence_limit must be positive");
    }

    bool operator==(const TrainConfig&) const = default;
};

/// Meta-batch size rule: 4 tasks for K >= 50, else 16.
inline std::size_t meta_batch_for_shots(std::size_t k) { return k >= 50 ? 4 : 16; }

inline void check_loss(double loss, double limit, const std::string& where) {
    if (!std::isfinite(loss) || loss > limit) {
        std::ostringstream os;
        os << "divergence: loss " << loss << " at " << where;
        throw DivergenceError(os.str());
    }
}

/// Scalar loss of a parameter set.
template <class T>
using Objective = std::function<ad::Var<T>(const ParamVars<T>&)>;

template <class T>
struct TaskObjectives {
    Objective<T> support;
    Objective<T> query;
    std::uint64_t seed = 0;
};

namespace detail {

template <class T>
ParamVars<T> sgd_update(const ParamVars<T>& theta, const std::vector<ad::Var<T>>& grads, double lr) {
    std::vector<ad::Var<T>> out;
    for (std::size_t i = 0; i < theta.size(); ++i)
        out.push_back(ad::sub(theta[i].second, ad::scale(grads[i], static_cast<T>(lr))));
    return theta.with_values(std::move(out));
}

template <class T>
ParamSet<T> axpy(const ParamSet<T>& x, const ParamSet<T>& g, double a) {
    std::vector<Tensor<T>> out;
    for (std::size_t i = 0; i < x.size(); ++i) {
        Tensor<T> t = x[i].second;
        const auto gd = g[i].second.data();
        auto td = t.data();
        for (std::size_t j = 0; j < td.size(); ++j) td[j] += static_cast<T>(a) * gd[j];
        out.push_back(std::move(t));
    }
    return x.with_values(std::move(out));
}

}  // namespace detail

/// `steps` repetitions of theta <- theta - alpha * grad L_S(theta). With
/// create_graph the result stays differentiable with respect to the input
/// nodes (second-order); without it each gradient enters as a constant
/// (first-order).
template <class T>
ParamVars<T> inner_adapt(const ParamVars<T>& theta, const Objective<T>& support_loss, double alpha, std::size_t steps,
                         bool create_graph, double limit = 1e4) {
    ParamVars<T> cur = theta;
    for (std::size_t s = 0; s < steps; ++s) {
        const auto loss = support_loss(cur);
        check_loss(static_cast<double>(loss.value().item()), limit, "inner step " + std::to_string(s));
        const auto g = ad::grad(loss, cur.values(), create_graph);
        cur = detail::sgd_update(cur, g, alpha);
    }
    return cur;
}

template <class T>
struct MetaGradient {
    ParamSet<T> grad;
    double meta_loss = 0;
    std::vector<double> task_losses;
};

/// Gradient of the aggregated query loss sum_i L_Qi(theta'_i) with respect to
/// theta. Per-task work may run on `threads` workers, each with a private
/// graph; contributions are reduced in task order.
template <class T>
MetaGradient<T> meta_gradient(const ParamSet<T>& theta, const std::vector<TaskObjectives<T>>& tasks,
                              const TrainConfig& cfg) {
    if (tasks.empty()) throw ConfigError("meta_step: empty task batch");
    std::vector<std::vector<Tensor<T>>> grads(tasks.size());
    std::vector<double> losses(tasks.size());
    auto run = [&](std::size_t i) {
        const auto leaves = as_leaves(theta);
        const auto where = " (task seed " + std::to_string(tasks[i].seed) + ")";
        ParamVars<T> adapted;
        try {
            adapted = inner_adapt(leaves, tasks[i].support, cfg.alpha, cfg.inner_steps, !cfg.first_order,
                                  cfg.divergence_limit);
        } catch (const DivergenceError& e) {
            throw DivergenceError(e.what() + where);
        }
        const auto q = tasks[i].query(adapted);
        losses[i] = static_cast<double>(q.value().item());
        check_loss(losses[i], cfg.divergence_limit, "query" + where);
        for (auto& g : ad::grad(q, leaves.values())) grads[i].push_back(g.value());
    };

    const std::size_t workers = std::min(cfg.threads, tasks.size());
    if (workers <= 1) {
        for (std::size_t i = 0; i < tasks.size(); ++i) run(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::exception_ptr failure;
        std::mutex fail_mu;
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (std::size_t i; (i = next++) < tasks.size();) {
                    try {
                        run(i);
                    } catch (...) {
                        std::lock_guard lock(fail_mu);
                        if (!failure) failure = std::current_exception();
                    }
                }
            });
        for (auto& t : pool) t.join();
        if (failure) std::rethrow_exception(failure);
    }

    const double scale = cfg.task_aggregation == TaskAggregation::mean ? 1.0 / static_cast<double>(tasks.size()) : 1.0;
    MetaGradient<T> out;
    std::vector<Tensor<T>> total = grads[0];
    for (std::size_t i = 1; i < tasks.size(); ++i)
        for (std::size_t p = 0; p < total.size(); ++p) {
            auto d = total[p].data();
            const auto s = grads[i][p].data();
            for (std::size_t j = 0; j < d.size(); ++j) d[j] += s[j];
        }
    if (scale != 1.0)
        for (auto& t : total)
            for (auto& v : t.data()) v = static_cast<T>(v * scale);
    out.grad = theta.with_values(std::move(total));
    for (double l : losses) out.meta_loss += l * scale;
    out.task_losses = std::move(losses);
    return out;
}

/// Outer-loop update rule: plain gradient descent at rate beta, or Adam.
template <class T>
class OuterOptimizer {
  public:
    OuterOptimizer(OuterOptimizerKind kind, double beta) : kind_(kind), beta_(beta) {}

    ParamSet<T> apply(const ParamSet<T>& theta, const ParamSet<T>& grad) {
        if (kind_ == OuterOptimizerKind::sgd) return detail::axpy(theta, grad, -beta_);
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        if (m_.empty()) {
            for (const auto& [n, t] : theta) {
                m_.push_back(std::vector<double>(t.size(), 0.0));
                v_.push_back(std::vector<double>(t.size(), 0.0));
            }
        }
        ++t_;
        const double c1 = 1 - std::pow(b1, static_cast<double>(t_)), c2 = 1 - std::pow(b2, static_cast<double>(t_));
        std::vector<Tensor<T>> out;
        for (std::size_t p = 0; p < theta.size(); ++p) {
            Tensor<T> x = theta[p].second;
            const auto g = grad[p].second.data();
            auto xd = x.data();
            for (std::size_t j = 0; j < xd.size(); ++j) {
                const double gj = static_cast<double>(g[j]);
                m_[p][j] = b1 * m_[p][j] + (1 - b1) * gj;
                v_[p][j] = b2 * v_[p][j] + (1 - b2) * gj * gj;
                xd[j] = static_cast<T>(xd[j] - beta_ * (m_[p][j] / c1) / (std::sqrt(v_[p][j] / c2) + eps));
            }
            out.push_back(std::move(x));
        }
        return theta.with_values(std::move(out));
    }

  private:
    OuterOptimizerKind kind_;
    double beta_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

template <class T>
struct MetaStepResult {
    ParamSet<T> theta;
    double meta_loss = 0;
};

/// One outer update theta <- theta - beta * grad_theta sum_i L_Qi(theta'_i).
template <class T>
MetaStepResult<T> meta_step(const ParamSet<T>& theta, const std::vector<TaskObjectives<T>>& tasks, const TrainConfig& cfg) {
    auto mg = meta_gradient(theta, tasks, cfg);
    return {detail::axpy(theta, mg.grad, -cfg.beta), mg.meta_loss};
}

/// `steps` plain gradient steps at rate alpha; no graph is kept between steps.
template <class T>
ParamSet<T> fine_tune(const ParamSet<T>& theta, const Objective<T>& support_loss, double alpha, std::size_t steps,
                      double limit = 1e4) {
    ParamSet<T> cur = theta;
    for (std::size_t s = 0; s < steps; ++s) {
        const auto leaves = as_leaves(cur);
        const auto loss = support_loss(leaves);
        check_loss(static_cast<double>(loss.value().item()), limit, "fine-tune step " + std::to_string(s));
        const auto g = ad::grad(loss, leaves.values());
        std::vector<Tensor<T>> gv;
        for (const auto& v : g) gv.push_back(v.value());
        cur = detail::axpy(cur, cur.with_values(std::move(gv)), -alpha);
    }
    return cur;
}

// ----------------------------------------------------------------- model wiring

template <class T>
Objective<T> model_loss(const ModelConfig& model, std::shared_ptr<const Tensor<T>> x, std::vector<int> y,
                        Reduction reduction) {
    return [model, x = std::move(x), y = std::move(y), reduction](const ParamVars<T>& p) {
        return cross_entropy(forward(model, p, ad::Var<T>::constant(*x)), y, reduction);
    };
}

template <class T>
TaskObjectives<T> model_objectives(const ModelConfig& model, const TaskTensors<T>& tensors, Reduction reduction,
                                   std::uint64_t seed) {
    if (tensors.support_y.empty()) throw DataError("meta-task has an empty support set");
    return {model_loss<T>(model, std::make_shared<const Tensor<T>>(tensors.support_x), tensors.support_y, reduction),
            model_loss<T>(model, std::make_shared<const Tensor<T>>(tensors.query_x), tensors.query_y, reduction), seed};
}

/// Rejects fixed-class examples in an extended-variant support set.
inline void require_no_fixed_labels(const std::vector<int>& labels, const OutputLayout& layout) {
    for (int l : labels)
        if (layout.is_fixed(static_cast<std::size_t>(l)))
            throw DataError("extended-variant support contains fixed-class label " + std::to_string(l));
}

template <class T>
ParamSet<T> fine_tune_model(const ModelConfig& model, const ParamSet<T>& theta, const TaskTensors<T>& task,
                            const EpisodeConfig& ep, const TrainConfig& cfg) {
    if (ep.variant == Variant::extended) require_no_fixed_labels(task.support_y, ep.layout());
    if (cfg.finetune_steps == 0) return theta;
    return fine_tune<T>(theta, model_loss<T>(model, std::make_shared<const Tensor<T>>(task.support_x), task.support_y,
                                             cfg.loss_reduction),
                        cfg.alpha, cfg.finetune_steps, cfg.divergence_limit);
}

/// Mini-batch gradient descent from a fresh initialization on the support set
/// only. Batches of min(supervised_batch, |support|) are drawn from a per-epoch
/// shuffle.
template <class T>
ParamSet<T> train_supervised(const Tensor<T>& x, const std::vector<int>& y, const TrainConfig& cfg,
                             const ModelConfig& model, std::uint64_t seed) {
    if (y.empty()) throw DataError("supervised baseline: empty support set");
    ParamSet<T> theta = init_params<T>(model, derive_seed(seed, 0));
    std::mt19937_64 rng(derive_seed(seed, 1));
    const std::size_t n = y.size(), batch = std::min(cfg.supervised_batch, n);
    const std::size_t per = x.size() / n;
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::size_t cursor = n;
    for (std::size_t step = 0; step < cfg.supervised_steps; ++step) {
        Shape bs = x.shape();
        bs[0] = batch;
        auto xb = Tensor<T>::uninitialized(bs);
        std::vector<int> yb(batch);
        for (std::size_t b = 0; b < batch; ++b) {
            if (cursor == n) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            const std::size_t i = order[cursor++];
            std::copy_n(x.data().begin() + static_cast<long>(i * per), per, xb.data().begin() + static_cast<long>(b * per));
            yb[b] = y[i];
        }
        const auto leaves = as_leaves(theta);
        const auto loss = cross_entropy(forward(model, leaves, ad::Var<T>::constant(xb)), yb, cfg.loss_reduction);
        check_loss(static_cast<double>(loss.value().item()), cfg.divergence_limit,
                   "supervised step " + std::to_string(step));
        const auto g = ad::grad(loss, leaves.values());
        std::vector<Tensor<T>> gv;
        for (const auto& v : g) gv.push_back(v.value());
        theta = detail::axpy(theta, theta.with_values(std::move(gv)), -cfg.alpha);
    }
    return theta;
}

// ----------------------------------------------------------------- meta_train

struct LogRow {
    std::size_t iteration = 0;
    double meta_loss = 0;
    double wall_ms = 0;
};

struct MetaTrainOptions {
    std::optional<std::filesystem::path> out_dir;  // checkpoints and train_log.csv
    std::function<void(const LogRow&)> on_iteration;
};

template <class T>
struct MetaTrainResult {
    ParamSet<T> theta;
    std::vector<LogRow> log;
};

inline std::string checkpoint_name(std::size_t iteration) { return "ckpt_" + std::to_string(iteration); }

/// Task seed for task `i` of outer iteration `iter` (1-based).
inline std::uint64_t task_seed(std::uint64_t seed, std::size_t iter, std::size_t i) { return derive_seed(seed, 1 + iter, i); }

/// Algorithm loop: sample a meta-batch, take one outer step, log, checkpoint
/// every `checkpoint_every` iterations and at the end.
template <class T>
MetaTrainResult<T> meta_train(const SplitManifest& manifest, const NoiseLengths& noise, FeatureStore& store,
                              const EpisodeConfig& ep, const TrainConfig& cfg, const ModelConfig& model,
                              std::uint64_t seed, const MetaTrainOptions& opts = {}) {
    ep.validate();
    model.validate();
    if (model.n_outputs != ep.n_classes())
        throw ConfigError("model n_outputs = " + std::to_string(model.n_outputs) + " but the episode has " +
                          std::to_string(ep.n_classes()) + " classes");
    MetaTrainResult<T> result;
    result.theta = init_params<T>(model, derive_seed(seed, 0));
    OuterOptimizer<T> opt(cfg.outer_optimizer, cfg.beta);

    std::ofstream log_file;
    if (opts.out_dir) {
        std::filesystem::create_directories(*opts.out_dir);
        log_file.open(*opts.out_dir / "train_log.csv", std::ios::trunc);
        log_file << "iteration,meta_loss,wall_ms\n";
    }
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t iter = 1; iter <= cfg.meta_iterations; ++iter) {
        std::vector<TaskObjectives<T>> tasks;
        for (std::size_t i = 0; i < cfg.meta_batch; ++i) {
            const auto s = task_seed(seed, iter, i);
            const auto task = sample_meta_task(manifest, noise, ep, s);
            tasks.push_back(model_objectives<T>(model, materialize<T>(task, store), cfg.loss_reduction, s));
        }
        MetaGradient<T> mg;
        try {
            mg = meta_gradient(result.theta, tasks, cfg);
        } catch (const DivergenceError& e) {
            throw DivergenceError(std::string(e.what()) + ", iteration " + std::to_string(iter));
        }
        result.theta = opt.apply(result.theta, mg.grad);
        const LogRow row{iter, mg.meta_loss,
                         std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count()};
        result.log.push_back(row);
        if (log_file.is_open()) {
            log_file << row.iteration << ',' << row.meta_loss << ',' << row.wall_ms << '\n';
            log_file.flush();
        }
        if (opts.on_iteration) opts.on_iteration(row);
        if (opts.out_dir && iter % cfg.checkpoint_every == 0 && iter != cfg.meta_iterations)
            save_params(*opts.out_dir / checkpoint_name(iter), result.theta);
    }
    if (opts.out_dir) save_params(*opts.out_dir / checkpoint_name(cfg.meta_iterations), result.theta);
    return result;
}

}  // namespace metakws
