#include <gtest/gtest.h>

#include "metakws/config.hpp"
#include "support/temp_dir.hpp"

using namespace metakws;

namespace {

std::string error_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST(RunConfig, DefaultsDeriveModelShape) {
    RunConfig c;
    c.derive();
    EXPECT_EQ(c.model.input_h, 98u);
    EXPECT_EQ(c.model.input_w, 40u);
    EXPECT_EQ(c.model.n_outputs, 12u);
    EXPECT_NO_THROW(c.validate());
}

TEST(RunConfig, SectionsOverrideDefaults) {
    const auto c = parse_config_text(R"(
data_root = "/data"
seed = 9
preset = "commands"
[frontend]
n_coeffs = 20
n_mels = 40
[model]
filters = 16
[episode]
k_shot = 1
variant = "original"
[train]
alpha = 0.05
outer_optimizer = "adam"
first_order = true
)");
    EXPECT_EQ(c.data_root, "/data");
    EXPECT_EQ(c.seed, 9u);
    EXPECT_EQ(c.preset, TaskPreset::commands);
    EXPECT_EQ(c.model.filters, 16u);
    EXPECT_EQ(c.model.input_w, 20u);
    EXPECT_EQ(c.episode.k_shot, 1u);
    EXPECT_EQ(c.episode.variant, Variant::original);
    EXPECT_DOUBLE_EQ(c.train.alpha, 0.05);
    EXPECT_EQ(c.train.outer_optimizer, OuterOptimizerKind::adam);
    EXPECT_TRUE(c.train.first_order);
    EXPECT_EQ(c.train.inner_steps, TrainConfig{}.inner_steps);
}

TEST(RunConfig, UnknownKeysAreNamed) {
    EXPECT_NE(error_of([] { parse_config_text("[train]\nalpah = 0.1\n"); }).find("train.alpah"), std::string::npos);
    EXPECT_NE(error_of([] { parse_config_text("colour = 1\n"); }).find("colour"), std::string::npos);
    EXPECT_NE(error_of([] { parse_config_text("[optimizer]\nlr = 1\n"); }).find("optimizer"), std::string::npos);
    EXPECT_NE(error_of([] { parse_config_text("alpha = 0.1\n"); }).find("'alpha'"), std::string::npos);
}

TEST(RunConfig, TypeErrorsAreNamed) {
    EXPECT_NE(error_of([] { parse_config_text("[train]\ninner_steps = \"five\"\n"); }).find("train.inner_steps"),
              std::string::npos);
    EXPECT_NE(error_of([] { parse_config_text("[episode]\nk_shot = -1\n"); }).find("episode.k_shot"),
              std::string::npos);
    EXPECT_THROW(parse_config_text("[episode]\nvariant = \"maml\"\n"), ConfigError);
    EXPECT_THROW(parse_config_text("[train\n"), ConfigError);
}

TEST(RunConfig, DerivedFieldsMustAgree) {
    EXPECT_NO_THROW(parse_config_text("[model]\nn_outputs = 12\n"));
    EXPECT_NE(error_of([] { parse_config_text("[model]\nn_outputs = 11\n"); }).find("model.n_outputs"),
              std::string::npos);
}

TEST(RunConfig, ResolvedConfigRoundTripsWithEveryField) {
    auto c = parse_config_text("[train]\nbeta = 0.01\n[episode]\nn_fixed = 1\n");
    const auto text = to_toml_string(c);
    for (const char* key : {"data_root", "eval_seed", "log_floor", "bn_eps", "silence_gain_hi", "divergence_limit",
                            "loss_reduction", "n_outputs"})
        EXPECT_NE(text.find(key), std::string::npos) << key;
    const auto back = parse_config_text(text);
    EXPECT_EQ(back, c);
    EXPECT_EQ(back.model.n_outputs, 11u);

    metakws::testing::TempDir dir;
    save_config(dir / "r.toml", c);
    EXPECT_EQ(load_config(dir / "r.toml"), c);
}

TEST(RunConfig, OverridesParseTomlValues) {
    RunConfig c;
    c = apply_override(c, "train.alpha=0.25");
    c = apply_override(c, "episode.variant=original");
    c = apply_override(c, "data_root=/tmp/x");
    c = apply_override(c, "train.first_order=true");
    EXPECT_DOUBLE_EQ(c.train.alpha, 0.25);
    EXPECT_EQ(c.episode.variant, Variant::original);
    EXPECT_EQ(c.data_root, "/tmp/x");
    EXPECT_TRUE(c.train.first_order);
    EXPECT_THROW(apply_override(c, "train.nope=1"), ConfigError);
    EXPECT_THROW(apply_override(c, "novalue"), ConfigError);
}

TEST(RunConfig, MissingFileIsConfigError) {
    EXPECT_THROW(load_config("/nonexistent/run.toml"), ConfigError);
}
