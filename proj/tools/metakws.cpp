#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "metakws/config.hpp"
#include "metakws/dataset.hpp"
#include "metakws/episodes.hpp"
#include "metakws/eval.hpp"
#include "metakws/feature_store.hpp"
#include "metakws/meta_learn.hpp"
#include "metakws/synthetic_corpus.hpp"

namespace fs = std::filesystem;
using namespace metakws;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kUsage = 2, kDiverged = 3 };

/// Options shared by the config-driven commands.
struct Common {
    std::string config;
    std::vector<std::string> overrides;
    std::string out;
    std::string data_root;
    std::size_t threads = 0;
    std::uint64_t seed = 0;
    bool seed_given = false;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "TOML run configuration");
    cmd->add_option("--set", c.overrides, "Override a config value, e.g. --set train.alpha=0.05");
    cmd->add_option("--out", c.out, "Output directory");
    cmd->add_option("--data-root", c.data_root, "Corpus root");
    cmd->add_option("--threads", c.threads, "Worker threads (1 is the bit-deterministic mode)");
    cmd->add_option_function<std::uint64_t>(
        "--seed",
        [&c](const std::uint64_t& s) {
            c.seed = s;
            c.seed_given = true;
        },
        "Run seed");
}

RunConfig resolve(const Common& c, const std::vector<std::string>& extra = {}) {
    RunConfig cfg;
    if (!c.config.empty()) cfg = load_config(c.config);
    for (const auto& o : c.overrides) cfg = apply_override(std::move(cfg), o);
    for (const auto& o : extra) cfg = apply_override(std::move(cfg), o);
    if (!c.out.empty()) cfg.out = c.out;
    if (!c.data_root.empty()) cfg.data_root = c.data_root;
    if (c.threads) cfg.train.threads = c.threads;
    if (c.seed_given) cfg.seed = c.seed;
    cfg.derive();
    cfg.validate();
    return cfg;
}

/// Records every produced file and writes the list as outputs-<command>.json.
class Outputs {
  public:
    Outputs(fs::path dir, std::string command) : dir_(std::move(dir)), command_(std::move(command)) {
        fs::create_directories(dir_);
    }
    fs::path path(const std::string& name) {
        files_.push_back(name);
        return dir_ / name;
    }
    void finish() const {
        const auto list = dir_ / ("outputs-" + command_ + ".json");
        std::ofstream(list, std::ios::trunc) << nlohmann::json{{"command", command_}, {"files", files_}}.dump(2) << '\n';
        std::cout << "wrote " << files_.size() << " files under " << dir_.string() << '\n';
    }

  private:
    fs::path dir_;
    std::string command_;
    std::vector<std::string> files_;
};

void require_dir(const std::string& p, const char* what) {
    if (p.empty()) throw ConfigError(std::string(what) + " is not set");
    if (!fs::is_directory(p)) throw DataError(std::string(what) + " does not exist: " + p);
}

/// Corpus, manifest, feature store and noise lengths for one command.
struct Workspace {
    SplitManifest manifest;
    std::unique_ptr<FeatureStore> store;
    NoiseLengths noise;
};

Workspace open_workspace(const RunConfig& cfg, Outputs& out) {
    require_dir(cfg.data_root, "data_root");
    Workspace ws;
    const auto mpath = cfg.manifest_path();
    if (fs::exists(mpath)) {
        ws.manifest = load_manifest(mpath);
    } else {
        if (!cfg.manifest.empty()) throw DataError("manifest does not exist: " + mpath.string());
        const auto index = scan_corpus(cfg.data_root);
        ws.manifest = make_splits(index, make_partition(index, cfg.preset, cfg.seed), cfg.eval_per_class, cfg.max_shot,
                                  cfg.seed);
        save_manifest(out.path("manifest.json"), ws.manifest);
    }
    validate_manifest(ws.manifest, fs::path(cfg.data_root));
    if (ws.manifest.max_shot < cfg.episode.k_shot)
        throw ConfigError("episode.k_shot = " + std::to_string(cfg.episode.k_shot) + " exceeds the manifest max_shot " +
                          std::to_string(ws.manifest.max_shot));
    ws.store = std::make_unique<FeatureStore>(cfg.data_root, cfg.frontend, cfg.feature_cache_dir());
    ws.noise = noise_lengths(*ws.store, ws.manifest.partition);
    return ws;
}

EvalContext<float> eval_context(const RunConfig& cfg, Workspace& ws) {
    return {&ws.manifest, &ws.noise, ws.store.get(), cfg.episode, cfg.train, cfg.model};
}

std::string report_stem(const EvalReport& r) { return "eval_" + r.variant + "_K" + std::to_string(r.k_shot); }

void emit_report(const EvalReport& r, Outputs& out) {
    const auto stem = report_stem(r);
    write_report(out.path(stem + ".json"), out.path(stem + ".csv"), r);
    std::printf("%s K=%zu trials=%zu mean=%.2f%% ci95=%.2f\n", r.variant.c_str(), r.k_shot, r.n_trials, 100 * r.mean,
                100 * r.ci95);
}

ParamSet<float> run_meta_train(const RunConfig& cfg, Workspace& ws, const fs::path& dir) {
    MetaTrainOptions opts;
    opts.out_dir = dir;
    opts.on_iteration = [&](const LogRow& row) {
        if (row.iteration == 1 || row.iteration % 10 == 0 || row.iteration == cfg.train.meta_iterations)
            std::printf("iter %zu meta_loss %.5f (%.1f s)\n", row.iteration, row.meta_loss, row.wall_ms / 1000);
        std::fflush(stdout);
    };
    return meta_train<float>(ws.manifest, ws.noise, *ws.store, cfg.episode, cfg.train, cfg.model, cfg.seed, opts).theta;
}

std::vector<std::string> checkpoint_files(const fs::path& dir) {
    std::vector<std::string> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().filename().string().starts_with("ckpt_")) out.push_back(e.path().filename().string());
    std::sort(out.begin(), out.end());
    return out;
}

// ----------------------------------------------------------------- commands

int cmd_prepare(const Common& c, bool warm) {
    auto cfg = resolve(c);
    require_dir(cfg.data_root, "data_root");
    Outputs out(cfg.out, "prepare");
    const auto index = scan_corpus(cfg.data_root);
    const auto partition = make_partition(index, cfg.preset, cfg.seed);
    const auto manifest = make_splits(index, partition, cfg.eval_per_class, cfg.max_shot, cfg.seed);
    validate_manifest(manifest, fs::path(cfg.data_root));
    save_manifest(out.path("manifest.json"), manifest);
    cfg.manifest = (fs::path(cfg.out) / "manifest.json").string();
    save_config(out.path("resolved-prepare.toml"), cfg);
    std::printf("user %zu, training %zu, unknown %zu keywords\n", partition.user_keywords.size(),
                partition.training_keywords.size(), partition.unknown_keywords.size());
    if (warm) {
        FeatureStore store(cfg.data_root, cfg.frontend, cfg.feature_cache_dir());
        std::size_t n = 0;
        for (const auto* lists : {&manifest.meta_train, &manifest.fine_tune_pool, &manifest.eval_pool})
            for (const auto& [k, files] : *lists)
                for (const auto& f : files) {
                    store.clip(f);
                    ++n;
                }
        std::printf("feature cache: %zu clips, %zu computed\n", n, store.computed());
    }
    out.finish();
    return kOk;
}

int cmd_meta_train(const Common& c, const std::string& variant) {
    std::vector<std::string> extra;
    if (!variant.empty()) extra.push_back("episode.variant=\"" + variant + "\"");
    const auto cfg = resolve(c, extra);
    if (cfg.episode.variant == Variant::supervised)
        throw ConfigError("meta-train needs variant extended or original; use baseline for supervised");
    Outputs out(cfg.out, "meta-train");
    auto ws = open_workspace(cfg, out);
    save_config(out.path("resolved-meta-train.toml"), cfg);
    run_meta_train(cfg, ws, cfg.out);
    out.path("train_log.csv");
    for (const auto& f : checkpoint_files(cfg.out)) out.path(f);
    out.finish();
    return kOk;
}

int cmd_evaluate(const Common& c, const std::string& checkpoint, const std::string& variant, std::size_t k,
                 std::size_t trials) {
    std::vector<std::string> extra;
    if (!variant.empty()) extra.push_back("episode.variant=\"" + variant + "\"");
    if (k) extra.push_back("episode.k_shot=" + std::to_string(k));
    if (trials) extra.push_back("trials=" + std::to_string(trials));
    const auto cfg = resolve(c, extra);
    ParamSet<float> theta;
    if (cfg.episode.variant != Variant::supervised) {
        if (checkpoint.empty()) throw ConfigError("evaluate: --checkpoint is required for variant " +
                                                  variant_name(cfg.episode.variant));
        if (!fs::exists(checkpoint)) throw DataError("checkpoint does not exist: " + checkpoint);
        theta = load_params<float>(checkpoint);
        const auto expected = init_params<float>(cfg.model, 0);
        bool same = theta.names() == expected.names();
        for (std::size_t i = 0; same && i < theta.size(); ++i) same = theta[i].second.shape() == expected[i].second.shape();
        if (!same)
            throw ConfigError("checkpoint " + checkpoint + " does not match the configured model");
    }
    Outputs out(cfg.out, "evaluate");
    auto ws = open_workspace(cfg, out);
    save_config(out.path("resolved-evaluate.toml"), cfg);
    emit_report(run_eval(theta, eval_context(cfg, ws), cfg.trials, cfg.eval_seed, cfg.train.threads), out);
    out.finish();
    return kOk;
}

int cmd_baseline(const Common& c, std::size_t k, std::size_t trials) {
    std::vector<std::string> extra = {"episode.variant=\"supervised\""};
    if (k) extra.push_back("episode.k_shot=" + std::to_string(k));
    if (trials) extra.push_back("trials=" + std::to_string(trials));
    const auto cfg = resolve(c, extra);
    Outputs out(cfg.out, "baseline");
    auto ws = open_workspace(cfg, out);
    save_config(out.path("resolved-baseline.toml"), cfg);
    emit_report(run_eval(ParamSet<float>{}, eval_context(cfg, ws), cfg.trials, cfg.eval_seed, cfg.train.threads), out);
    out.finish();
    return kOk;
}

/// Per K: supervised trains on the support; otherwise the given checkpoint is
/// fine-tuned, or, without one, a fresh meta-training run with the K-shot
/// meta-batch rule precedes evaluation.
int cmd_sweep(const Common& c, const std::vector<std::size_t>& k_list, const std::string& checkpoint,
              std::size_t trials) {
    std::vector<std::string> extra;
    if (trials) extra.push_back("trials=" + std::to_string(trials));
    const auto base = resolve(c, extra);
    if (!checkpoint.empty() && !fs::exists(checkpoint)) throw DataError("checkpoint does not exist: " + checkpoint);
    Outputs out(base.out, "sweep");
    auto ws = open_workspace(base, out);
    save_config(out.path("resolved-sweep.toml"), base);
    const auto reports = shot_sweep(k_list, [&](std::size_t k) {
        RunConfig cfg = apply_override(base, "episode.k_shot=" + std::to_string(k));
        cfg.validate();
        ParamSet<float> theta;
        if (cfg.episode.variant != Variant::supervised) {
            if (!checkpoint.empty()) {
                theta = load_params<float>(checkpoint);
            } else {
                cfg.train.meta_batch = meta_batch_for_shots(k);
                const auto dir = fs::path(cfg.out) / ("meta_K" + std::to_string(k));
                theta = run_meta_train(cfg, ws, dir);
                for (const auto& f : checkpoint_files(dir)) out.path("meta_K" + std::to_string(k) + "/" + f);
                out.path("meta_K" + std::to_string(k) + "/train_log.csv");
            }
        }
        auto r = run_eval(theta, eval_context(cfg, ws), cfg.trials, cfg.eval_seed, cfg.train.threads);
        emit_report(r, out);
        return r;
    });
    write_sweep(out.path("sweep_table.csv"), out.path("sweep_plot.csv"), reports);
    out.finish();
    return kOk;
}

int cmd_synth(const std::string& out_dir, const SyntheticCorpusConfig& scfg) {
    if (out_dir.empty()) throw ConfigError("synth-corpus: --out is required");
    if (fs::exists(out_dir) && !fs::is_empty(out_dir)) throw ConfigError("synth-corpus: " + out_dir + " is not empty");
    generate_synthetic_corpus(out_dir, scfg);
    std::printf("wrote %zu keywords x %zu clips and %zu noise files to %s\n", speech_commands_keywords().size(),
                scfg.clips_per_keyword, scfg.noise_files, out_dir.c_str());
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Few-shot spoken term classification with extended MAML"};
    app.require_subcommand(1);

    Common prep_c, train_c, eval_c, base_c, sweep_c;
    std::string preset;
    bool no_warm = false;
    auto* prep = app.add_subcommand("prepare", "Partition the corpus, write the manifest, warm the feature cache");
    add_common(prep, prep_c);
    prep->add_option("--preset", preset, "digits or commands");
    prep->add_flag("--no-warm", no_warm, "Skip feature extraction");

    std::string train_variant;
    auto* train = app.add_subcommand("meta-train", "Meta-train an initialization");
    add_common(train, train_c);
    train->add_option("--variant", train_variant, "extended or original");

    std::string checkpoint, eval_variant;
    std::size_t eval_k = 0, eval_trials = 0;
    auto* evaluate = app.add_subcommand("evaluate", "Fine-tune a checkpoint on target tasks and report accuracy");
    add_common(evaluate, eval_c);
    evaluate->add_option("--checkpoint", checkpoint, "Parameter file from meta-train");
    evaluate->add_option("--variant", eval_variant, "extended, original or supervised");
    evaluate->add_option("--K", eval_k, "Shots per class");
    evaluate->add_option("--trials", eval_trials, "Number of random target tasks");

    std::size_t base_k = 0, base_trials = 0;
    auto* baseline = app.add_subcommand("baseline", "Supervised baseline trained on the K-shot support only");
    add_common(baseline, base_c);
    baseline->add_option("--K", base_k, "Shots per class");
    baseline->add_option("--trials", base_trials, "Number of random target tasks");

    std::vector<std::size_t> k_list;
    std::string sweep_ckpt;
    std::size_t sweep_trials = 0;
    auto* sweep = app.add_subcommand("sweep", "Accuracy over a list of shot counts");
    add_common(sweep, sweep_c);
    sweep->add_option("--K-list", k_list, "Shot counts")->required()->delimiter(',');
    sweep->add_option("--checkpoint", sweep_ckpt, "Evaluate this checkpoint instead of meta-training per K");
    sweep->add_option("--trials", sweep_trials, "Number of random target tasks");

    std::string synth_out;
    SyntheticCorpusConfig scfg;
    auto* synth = app.add_subcommand("synth-corpus", "Generate a synthetic 35-keyword corpus");
    synth->add_option("--out", synth_out, "Corpus root to create")->required();
    synth->add_option("--clips-per-keyword", scfg.clips_per_keyword);
    synth->add_option("--speakers", scfg.speakers);
    synth->add_option("--noise-files", scfg.noise_files);
    synth->add_option("--seed", scfg.seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*prep) {
            if (!preset.empty()) prep_c.overrides.push_back("preset=\"" + preset + "\"");
            return cmd_prepare(prep_c, !no_warm);
        }
        if (*train) return cmd_meta_train(train_c, train_variant);
        if (*evaluate) return cmd_evaluate(eval_c, checkpoint, eval_variant, eval_k, eval_trials);
        if (*baseline) return cmd_baseline(base_c, base_k, base_trials);
        if (*sweep) return cmd_sweep(sweep_c, k_list, sweep_ckpt, sweep_trials);
        if (*synth) return cmd_synth(synth_out, scfg);
    } catch (const DivergenceError& e) {
        std::cerr << "diverged: " << e.what() << '\n';
        return kDiverged;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kUsage;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kUsage;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kFailure;
    }
    return kOk;
}
