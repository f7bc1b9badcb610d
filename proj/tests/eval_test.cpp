#include <gtest/gtest.h>

#include <fstream>
#include <numeric>
#include <sstream>

#include "metakws/eval.hpp"
#include "support/small_corpus.hpp"

using namespace metakws;
using metakws::testing::narrow_model;
using metakws::testing::small_corpus;
using metakws::testing::TempDir;

namespace {

EpisodeConfig small_episode(Variant v = Variant::extended) {
    EpisodeConfig ep;
    ep.k_shot = 1;
    ep.query_per_class = 2;
    ep.variant = v;
    return ep;
}

TrainConfig small_train() {
    TrainConfig cfg;
    cfg.meta_batch = 2;
    cfg.meta_iterations = 2;
    cfg.inner_steps = 1;
    cfg.finetune_steps = 2;
    cfg.supervised_steps = 5;
    cfg.loss_reduction = Reduction::mean;
    return cfg;
}

EvalContext<float> context(Variant v = Variant::extended) {
    return {&small_corpus().manifest, &small_corpus().noise, small_corpus().store.get(), small_episode(v),
            small_train(), narrow_model()};
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST(Statistics, ConstantAccuraciesHaveZeroInterval) {
    const auto [m, ci] = mean_ci95(std::vector<double>(10, 0.5));
    EXPECT_DOUBLE_EQ(m, 0.5);
    EXPECT_EQ(ci, 0.0);
}

TEST(Statistics, SingleTrialHasZeroInterval) {
    const auto [m, ci] = mean_ci95({0.7});
    EXPECT_DOUBLE_EQ(m, 0.7);
    EXPECT_EQ(ci, 0.0);
}

TEST(Statistics, IntervalMatchesHandComputation) {
    // deviations -0.3, -0.1, 0.4; sum of squares 0.26; variance 0.13
    const auto [m, ci] = mean_ci95({0.2, 0.4, 0.9});
    EXPECT_NEAR(m, 0.5, 1e-15);
    EXPECT_NEAR(ci, 1.96 * std::sqrt(0.13) / std::sqrt(3.0), 1e-15);
    EXPECT_NEAR(ci, 0.408006, 1e-6);
}

TEST(Statistics, IntervalMatchesOnePassRecomputation) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.1, 0.9);
    std::vector<double> xs(100);
    for (auto& x : xs) x = u(rng);
    double s = 0, s2 = 0;
    for (double x : xs) {
        s += x;
        s2 += x * x;
    }
    const double n = 100, var = (s2 - s * s / n) / (n - 1);
    const auto [m, ci] = mean_ci95(xs);
    EXPECT_NEAR(m, s / n, 1e-12);
    EXPECT_NEAR(ci, 1.96 * std::sqrt(var / n), 1e-10);
}

TEST(Aggregate, SumsConfusionsAndKeepsTrialOrder) {
    TrialResult a{1, 0.5, {{1, 1}, {0, 2}}, 2, 4}, b{2, 0.75, {{2, 0}, {1, 1}}, 2, 4};
    const auto r = aggregate({a, b}, "extended", 5, 1, {"x", "y"});
    EXPECT_EQ(r.accuracies, (std::vector<double>{0.5, 0.75}));
    EXPECT_EQ(r.confusion, (Confusion{{3, 1}, {1, 3}}));
    EXPECT_DOUBLE_EQ(r.mean, 0.625);
    EXPECT_EQ(r.n_trials, 2u);
}

TEST(Reports, CsvRowIsPercentWithTwoDecimals) {
    EvalReport r;
    r.variant = "extended";
    r.k_shot = 5;
    r.mean = 0.627667;
    r.ci95 = 0.0147851;
    EXPECT_EQ(csv_header(), "method,K,mean,ci95");
    EXPECT_EQ(csv_row(r), "extended,5,62.77,1.48");
}

TEST(Reports, JsonRoundTrip) {
    TrialResult a{4, 0.25, {{1, 3}, {0, 4}}, 2, 8};
    const auto r = aggregate({a}, "original", 10, 4, {"x", "y"});
    EXPECT_EQ(report_from_json(nlohmann::json::parse(to_json(r).dump())), r);
}

TEST(Sweep, EmptyListRejected) {
    EXPECT_THROW(shot_sweep({}, [](std::size_t) { return EvalReport{}; }), ConfigError);
}

TEST(Sweep, SingleShotCountGivesOneRow) {
    const auto reports = shot_sweep({3}, [](std::size_t k) {
        EvalReport r;
        r.variant = "supervised";
        r.k_shot = k;
        r.mean = 0.5;
        return r;
    });
    ASSERT_EQ(reports.size(), 1u);
    TempDir dir;
    write_sweep(dir / "table.csv", dir / "plot.csv", reports);
    EXPECT_EQ(slurp(dir / "table.csv"), "method,K,mean,ci95\nsupervised,3,50.00,0.00\n");
    EXPECT_EQ(slurp(dir / "plot.csv"), "K,mean,ci95,variant\n3,0.500000,0.000000,supervised\n");
}

TEST(RunEval, ConfusionCoversEveryQueryItem) {
    const auto ctx = context();
    const auto theta = init_params<float>(ctx.model, 2);
    const auto rep = run_eval(theta, ctx, 3, 10);
    EXPECT_EQ(rep.n_trials, 3u);
    EXPECT_EQ(rep.support_size, 10u);
    EXPECT_EQ(rep.query_size, 12u * 4);
    ASSERT_EQ(rep.confusion.size(), 12u);
    std::size_t total = 0;
    for (const auto& row : rep.confusion) {
        const auto n = std::accumulate(row.begin(), row.end(), std::size_t{0});
        EXPECT_EQ(n, 3u * 4);
        total += n;
    }
    EXPECT_EQ(total, 3u * rep.query_size);
    EXPECT_EQ(rep.classes.size(), 12u);
    EXPECT_EQ(rep.classes[10], kSilenceClass);
    for (double a : rep.accuracies) EXPECT_TRUE(a >= 0 && a <= 1);
}

TEST(RunEval, DeterministicAndThreadIndependent) {
    const auto ctx = context();
    const auto theta = init_params<float>(ctx.model, 2);
    const auto a = run_eval(theta, ctx, 3, 20);
    EXPECT_EQ(run_eval(theta, ctx, 3, 20), a);
    EXPECT_EQ(run_eval(theta, ctx, 3, 20, 3), a);
}

TEST(RunEval, SupervisedVariantIgnoresCheckpoint) {
    const auto ctx = context(Variant::supervised);
    const auto a = run_eval(init_params<float>(ctx.model, 1), ctx, 2, 0);
    const auto b = run_eval(init_params<float>(ctx.model, 9), ctx, 2, 0);
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.support_size, 12u);
    EXPECT_EQ(a.variant, "supervised");
}

TEST(RunEval, ZeroTrialsRejected) {
    const auto ctx = context();
    EXPECT_THROW(run_eval(init_params<float>(ctx.model, 1), ctx, 0, 0), ConfigError);
}

TEST(MetaTrain, ZeroIterationsLeavesInitialisation) {
    TempDir out;
    auto cfg = small_train();
    cfg.meta_iterations = 0;
    const auto r = meta_train<float>(small_corpus().manifest, small_corpus().noise, *small_corpus().store,
                                     small_episode(), cfg, narrow_model(), 6, {out.path(), {}});
    EXPECT_EQ(r.theta, init_params<float>(narrow_model(), derive_seed(6, 0)));
    EXPECT_TRUE(r.log.empty());
    EXPECT_EQ(load_params<float>(out / "ckpt_0"), r.theta);
}

TEST(MetaTrain, DeterministicWithCheckpointsAndLog) {
    TempDir out;
    auto cfg = small_train();
    cfg.meta_iterations = 3;
    cfg.checkpoint_every = 2;
    std::size_t callbacks = 0;
    const auto a = meta_train<float>(small_corpus().manifest, small_corpus().noise, *small_corpus().store,
                                     small_episode(), cfg, narrow_model(), 6,
                                     {out.path(), [&](const LogRow&) { ++callbacks; }});
    const auto b = meta_train<float>(small_corpus().manifest, small_corpus().noise, *small_corpus().store,
                                     small_episode(), cfg, narrow_model(), 6);
    EXPECT_EQ(a.theta, b.theta);
    EXPECT_NE(a.theta, init_params<float>(narrow_model(), derive_seed(6, 0)));
    EXPECT_EQ(callbacks, 3u);
    ASSERT_EQ(a.log.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(a.log[i].iteration, i + 1);
        EXPECT_EQ(a.log[i].meta_loss, b.log[i].meta_loss);
    }
    EXPECT_TRUE(std::filesystem::exists(out / "ckpt_2"));
    EXPECT_EQ(load_params<float>(out / "ckpt_3"), a.theta);
    EXPECT_FALSE(std::filesystem::exists(out / "ckpt_1"));
    const auto log = slurp(out / "train_log.csv");
    EXPECT_TRUE(log.starts_with("iteration,meta_loss,wall_ms\n1,"));
    EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 4);
}

TEST(MetaTrain, OutputCountMustMatchEpisode) {
    auto model = narrow_model();
    model.n_outputs = 10;
    EXPECT_THROW(meta_train<float>(small_corpus().manifest, small_corpus().noise, *small_corpus().store,
                                   small_episode(), small_train(), model, 1),
                 ConfigError);
}
