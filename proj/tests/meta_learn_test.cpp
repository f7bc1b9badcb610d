#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "metakws/meta_learn.hpp"
#include "support/finite_diff.hpp"

using namespace metakws;
using ad::Var;

namespace {

ParamSet<double> scalar_theta(double v) {
    ParamSet<double> p;
    p.add("theta", Tensor<double>::scalar(v));
    return p;
}

/// 0.5 * (theta - c)^2
Objective<double> half_square(double c) {
    return [c](const ParamVars<double>& p) {
        const auto d = ad::add_scalar(p.at("theta"), -c);
        return ad::scale(ad::mul(d, d), 0.5);
    };
}

/// c * theta
Objective<double> linear(double c) {
    return [c](const ParamVars<double>& p) { return ad::scale(p.at("theta"), c); };
}

TrainConfig scalar_config(double alpha, double beta, std::size_t inner = 1) {
    TrainConfig cfg;
    cfg.alpha = alpha;
    cfg.beta = beta;
    cfg.inner_steps = inner;
    return cfg;
}

ModelConfig tiny_model(std::size_t outputs = 3) {
    ModelConfig m;
    m.n_blocks = 1;
    m.filters = 4;
    m.input_h = 8;
    m.input_w = 6;
    m.n_outputs = outputs;
    return m;
}

/// Batch of noisy copies of per-class prototypes.
struct ToyBatch {
    Tensor<float> x;
    std::vector<int> y;
};

ToyBatch toy_batch(const std::vector<Tensor<float>>& protos, const std::vector<int>& labels, std::mt19937_64& rng,
                   float noise = 0.3f) {
    std::normal_distribution<float> n(0.0f, noise);
    const std::size_t per = protos[0].size();
    ToyBatch b{Tensor<float>({labels.size(), 1, 8, 6}), labels};
    for (std::size_t i = 0; i < labels.size(); ++i)
        for (std::size_t j = 0; j < per; ++j)
            b.x[i * per + j] = protos[static_cast<std::size_t>(labels[i])][j] + n(rng);
    return b;
}

std::vector<Tensor<float>> prototypes(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> d;
    std::vector<Tensor<float>> out;
    for (std::size_t i = 0; i < n; ++i) {
        Tensor<float> t({8, 6});
        for (auto& v : t.data()) v = d(rng);
        out.push_back(t);
    }
    return out;
}

}  // namespace

TEST(InnerAdapt, OneStepOnScalarQuadratic) {
    const auto out = inner_adapt(as_leaves(scalar_theta(1.0)), half_square(0.0), 0.1, 1, true);
    EXPECT_DOUBLE_EQ(out.at("theta").value().item(), 0.9);
}

TEST(InnerAdapt, ThreeStepsCompound) {
    const auto out = inner_adapt(as_leaves(scalar_theta(1.0)), half_square(0.0), 0.1, 3, true);
    EXPECT_NEAR(out.at("theta").value().item(), std::pow(0.9, 3), 1e-15);
    EXPECT_NEAR(out.at("theta").value().item(), 0.729, 1e-12);
}

TEST(InnerAdapt, ZeroAlphaIsIdentity) {
    const auto out = inner_adapt(as_leaves(scalar_theta(1.2345)), half_square(3.0), 0.0, 4, true);
    EXPECT_EQ(out.at("theta").value().item(), 1.2345);
}

TEST(InnerAdapt, NonFiniteLossReportsStep) {
    Objective<double> blowup = [](const ParamVars<double>& p) { return ad::log(ad::add_scalar(p.at("theta"), -1.0)); };
    // theta = 3 -> log 2 fine; gradient 1/2 moves theta to 3 - 4 * 0.5 = 1 -> log 0 = -inf at step 1
    try {
        inner_adapt(as_leaves(scalar_theta(3.0)), blowup, 4.0, 3, false);
        FAIL() << "expected DivergenceError";
    } catch (const DivergenceError& e) {
        EXPECT_NE(std::string(e.what()).find("inner step 1"), std::string::npos) << e.what();
    }
}

TEST(MetaGradient, ClosedFormScalarCase) {
    // theta' = theta - alpha (theta - 1); dL_Q(theta')/dtheta = (1 - alpha)(theta' + 1)
    const auto mg = meta_gradient(scalar_theta(0.0), {{half_square(1.0), half_square(-1.0), 0}}, scalar_config(0.1, 1.0));
    EXPECT_NEAR(mg.grad.at("theta").item(), 0.99, 1e-12);
    const auto step = meta_step(scalar_theta(0.0), {{half_square(1.0), half_square(-1.0), 0}}, scalar_config(0.1, 1.0));
    EXPECT_NEAR(step.theta.at("theta").item(), -0.99, 1e-12);
    EXPECT_NEAR(step.meta_loss, 0.5 * 1.1 * 1.1, 1e-12);
}

TEST(MetaGradient, MatchesFiniteDifferencesOfComposedObjective) {
    const double alpha = 0.3;
    for (double theta : {-1.5, 0.2, 2.0}) {
        // Non-quadratic support loss so that the Hessian varies with theta.
        Objective<double> support = [](const ParamVars<double>& p) {
            const auto t = p.at("theta");
            return ad::add(ad::scale(ad::mul(ad::mul(t, t), t), 0.2), ad::exp(ad::scale(t, 0.5)));
        };
        const auto mg = meta_gradient(scalar_theta(theta), {{support, half_square(0.7), 0}}, scalar_config(alpha, 1.0));
        auto composed = [&](double t) {
            const double g = 0.6 * t * t + 0.5 * std::exp(0.5 * t);
            const double tp = t - alpha * g;
            return 0.5 * (tp - 0.7) * (tp - 0.7);
        };
        const double h = 1e-5, fd = (composed(theta + h) - composed(theta - h)) / (2 * h);
        EXPECT_NEAR(mg.grad.at("theta").item(), fd, 1e-7 * std::max(1.0, std::abs(fd))) << theta;
    }
}

TEST(MetaGradient, FirstOrderDiffersOnCurvedLoss) {
    auto cfg = scalar_config(0.1, 1.0);
    const auto full = meta_gradient(scalar_theta(0.0), {{half_square(1.0), half_square(-1.0), 0}}, cfg);
    cfg.first_order = true;
    const auto fo = meta_gradient(scalar_theta(0.0), {{half_square(1.0), half_square(-1.0), 0}}, cfg);
    EXPECT_NEAR(fo.grad.at("theta").item(), 1.1, 1e-12);
    EXPECT_NE(full.grad.at("theta").item(), fo.grad.at("theta").item());
}

TEST(MetaGradient, FirstOrderAgreesOnLinearInnerLoss) {
    auto cfg = scalar_config(0.2, 1.0, 3);
    const auto full = meta_gradient(scalar_theta(0.4), {{linear(1.7), half_square(-1.0), 0}}, cfg);
    cfg.first_order = true;
    const auto fo = meta_gradient(scalar_theta(0.4), {{linear(1.7), half_square(-1.0), 0}}, cfg);
    EXPECT_NEAR(full.grad.at("theta").item(), fo.grad.at("theta").item(), 1e-10);
}

TEST(MetaStep, ZeroAlphaIsPlainQueryGradientStep) {
    auto cfg = scalar_config(0.0, 0.25, 5);
    const std::vector<TaskObjectives<double>> tasks = {{half_square(1.0), half_square(-1.0), 0},
                                                       {half_square(3.0), half_square(2.0), 1}};
    const auto step = meta_step(scalar_theta(0.5), tasks, cfg);
    // sum of query gradients at theta: (0.5 + 1) + (0.5 - 2)
    EXPECT_EQ(step.theta.at("theta").item(), 0.5 - 0.25 * ((0.5 + 1.0) + (0.5 - 2.0)));
}

TEST(MetaStep, DivergenceNamesTaskSeed) {
    Objective<double> huge = [](const ParamVars<double>& p) { return ad::add_scalar(p.at("theta"), 1e6); };
    try {
        meta_step(scalar_theta(0.0), {{half_square(0.0), huge, 77}}, scalar_config(0.1, 1.0));
        FAIL() << "expected DivergenceError";
    } catch (const DivergenceError& e) {
        EXPECT_NE(std::string(e.what()).find("task seed 77"), std::string::npos) << e.what();
    }
}

TEST(MetaStep, BatchEqualsSumOfPerTaskContributions) {
    const auto model = tiny_model();
    const auto theta = init_params<float>(model, 3);
    const auto protos = prototypes(3, 1);
    std::mt19937_64 rng(5);
    std::vector<TaskObjectives<float>> tasks;
    for (std::uint64_t i = 0; i < 3; ++i) {
        const auto s = toy_batch(protos, {0, 1, 2, 0, 1, 2}, rng), q = toy_batch(protos, {2, 1, 0, 0}, rng);
        tasks.push_back({model_loss<float>(model, std::make_shared<const Tensor<float>>(s.x), s.y, Reduction::sum),
                         model_loss<float>(model, std::make_shared<const Tensor<float>>(q.x), q.y, Reduction::sum), i});
    }
    auto cfg = scalar_config(0.05, 0.01, 2);
    const auto batched = meta_step(theta, tasks, cfg).theta;
    ParamSet<float> summed = theta;
    for (const auto& t : tasks) {
        const auto g = meta_gradient(theta, {t}, cfg).grad;
        summed = detail::axpy(summed, g, -cfg.beta);
    }
    for (std::size_t p = 0; p < theta.size(); ++p)
        for (std::size_t j = 0; j < theta[p].second.size(); ++j)
            EXPECT_NEAR(batched[p].second[j], summed[p].second[j], 1e-6) << theta[p].first;

    cfg.threads = 3;
    const auto threaded = meta_step(theta, tasks, cfg).theta;
    EXPECT_EQ(threaded, batched);

    cfg.threads = 1;
    cfg.task_aggregation = TaskAggregation::mean;
    const auto mean = meta_gradient(theta, tasks, cfg);
    const auto sum = meta_gradient(theta, tasks, scalar_config(0.05, 0.01, 2));
    EXPECT_NEAR(mean.meta_loss * 3, sum.meta_loss, 1e-4);
    EXPECT_NEAR(mean.grad[0].second[0] * 3, sum.grad[0].second[0], 1e-5);
}

TEST(MetaStep, SecondOrderMatchesFiniteDifferencesOnModel) {
    ModelConfig model = tiny_model(2);
    model.filters = 2;
    auto theta = init_params<double>(model, 4);
    const auto protos = prototypes(2, 8);
    std::mt19937_64 rng(2);
    const auto s = toy_batch(protos, {0, 1, 1, 0}, rng), q = toy_batch(protos, {1, 0, 0}, rng);
    const auto sx = s.x.cast<double>(), qx = q.x.cast<double>();
    const auto support = model_loss<double>(model, std::make_shared<const Tensor<double>>(sx), s.y, Reduction::sum);
    const auto query = model_loss<double>(model, std::make_shared<const Tensor<double>>(qx), q.y, Reduction::sum);
    const auto cfg = scalar_config(0.05, 1.0, 1);
    const auto mg = meta_gradient(theta, {{support, query, 0}}, cfg);
    const auto numeric = metakws::testing::numeric_gradient(
        [&](const std::vector<Tensor<double>>& ts) {
            const auto adapted = inner_adapt(as_leaves(theta.with_values(ts)), support, cfg.alpha, 1, false);
            return query(adapted).value().item();
        },
        theta.values());
    EXPECT_LT(metakws::testing::max_relative_error(mg.grad.values(), numeric), 1e-5);
}

TEST(MetaTrainLoop, ToyMetaLossDecreases) {
    // Tasks: 2-way classification between two of six fixed prototypes, with a
    // random slot assignment per task.
    const auto model = tiny_model(2);
    const auto protos = prototypes(6, 3);
    auto theta = init_params<float>(model, 1);
    auto cfg = scalar_config(0.01, 0.01, 1);
    std::vector<double> losses;
    for (std::uint64_t it = 0; it < 50; ++it) {
        std::vector<TaskObjectives<float>> tasks;
        for (std::uint64_t t = 0; t < 4; ++t) {
            std::mt19937_64 rng(derive_seed(11, it, t));
            std::vector<std::size_t> pick = {0, 1, 2, 3, 4, 5};
            std::shuffle(pick.begin(), pick.end(), rng);
            const std::vector<Tensor<float>> pair = {protos[pick[0]], protos[pick[1]]};
            const auto s = toy_batch(pair, {0, 1, 0, 1, 0, 1}, rng, 1.0f), q = toy_batch(pair, {0, 1, 1, 0, 1, 0}, rng, 1.0f);
            tasks.push_back({model_loss<float>(model, std::make_shared<const Tensor<float>>(s.x), s.y, Reduction::sum),
                             model_loss<float>(model, std::make_shared<const Tensor<float>>(q.x), q.y, Reduction::sum),
                             t});
        }
        const auto step = meta_step(theta, tasks, cfg);
        ASSERT_TRUE(std::isfinite(step.meta_loss));
        losses.push_back(step.meta_loss);
        theta = step.theta;
    }
    double first = 0, last = 0;
    for (std::size_t i = 0; i < 10; ++i) {
        first += losses[i];
        last += losses[losses.size() - 1 - i];
    }
    EXPECT_LT(last, first);
}

TEST(FineTune, ZeroStepsIsIdentity) {
    const auto theta = init_params<float>(tiny_model(), 2);
    Objective<float> any = [](const ParamVars<float>& p) { return ad::sum(p.at(kOutputBias)); };
    EXPECT_EQ(fine_tune<float>(theta, any, 0.1, 0), theta);
}

TEST(FineTune, SaturatedSupportBarelyMoves) {
    const auto model = tiny_model();
    auto theta = init_params<float>(model, 2);
    theta.at(kOutputBias)[1] = 60.0f;
    std::mt19937_64 rng(1);
    const auto b = toy_batch(prototypes(3, 2), {1, 1, 1, 1}, rng);
    const auto tuned =
        fine_tune<float>(theta, model_loss<float>(model, std::make_shared<const Tensor<float>>(b.x), b.y, Reduction::sum),
                         0.1, 10);
    EXPECT_LT(l2_norm(detail::axpy(tuned, theta, -1.0)), 1e-3);
}

TEST(FineTune, SmallStepLossIsNonIncreasing) {
    const auto model = tiny_model();
    auto theta = init_params<float>(model, 6);
    std::mt19937_64 rng(3);
    const auto b = toy_batch(prototypes(3, 4), {0, 1, 2, 0, 1, 2}, rng);
    const auto loss = model_loss<float>(model, std::make_shared<const Tensor<float>>(b.x), b.y, Reduction::sum);
    double prev = loss(as_constants(theta)).value().item();
    for (int s = 0; s < 3; ++s) {
        theta = fine_tune<float>(theta, loss, 0.01, 1);
        const double cur = loss(as_constants(theta)).value().item();
        EXPECT_LE(cur, prev) << "step " << s;
        prev = cur;
    }
}

TEST(FineTune, ExtendedSupportRejectsFixedClasses) {
    ModelConfig model = tiny_model(12);
    const auto theta = init_params<float>(model, 1);
    TaskTensors<float> task;
    task.support_x = Tensor<float>({2, 1, 8, 6});
    task.support_y = {3, 10};
    EpisodeConfig ep;
    TrainConfig cfg;
    EXPECT_THROW(fine_tune_model(model, theta, task, ep, cfg), DataError);
    ep.variant = Variant::original;
    cfg.finetune_steps = 0;
    EXPECT_NO_THROW(fine_tune_model(model, theta, task, ep, cfg));
}

TEST(TrainSupervised, FitsItsOwnSupport) {
    const auto model = tiny_model(12);
    std::vector<Tensor<float>> protos = prototypes(12, 9);
    std::vector<int> labels(12);
    for (int i = 0; i < 12; ++i) labels[static_cast<std::size_t>(i)] = i;
    std::mt19937_64 rng(4);
    const auto b = toy_batch(protos, labels, rng);
    TrainConfig cfg;
    cfg.loss_reduction = Reduction::mean;
    const auto theta = train_supervised<float>(b.x, b.y, cfg, model, 1);
    EXPECT_EQ(train_supervised<float>(b.x, b.y, cfg, model, 1), theta);
    ad::NoGradGuard ng;
    EXPECT_EQ(argmax_rows(forward(model, as_constants(theta), Var<float>::constant(b.x)).value()), labels);
}

TEST(OuterOptimizer, SgdAndAdamFirstStep) {
    auto g = scalar_theta(0.5);
    OuterOptimizer<double> sgd(OuterOptimizerKind::sgd, 0.1), adam(OuterOptimizerKind::adam, 0.1);
    EXPECT_DOUBLE_EQ(sgd.apply(scalar_theta(1.0), g).at("theta").item(), 0.95);
    EXPECT_NEAR(adam.apply(scalar_theta(1.0), g).at("theta").item(), 0.9, 1e-6);
}

TEST(TrainConfig, Validation) {
    TrainConfig cfg;
    EXPECT_NO_THROW(cfg.validate());
    cfg.alpha = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = {};
    cfg.inner_steps = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    EXPECT_EQ(meta_batch_for_shots(5), 16u);
    EXPECT_EQ(meta_batch_for_shots(50), 4u);
    EXPECT_EQ(meta_batch_for_shots(100), 4u);
}
