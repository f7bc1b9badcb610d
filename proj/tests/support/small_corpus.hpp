#pragma once

// A generated 35-keyword corpus with manifest, noise lengths and an
// uncached feature store, built once per test process.

#include <memory>

#include "metakws/dataset.hpp"
#include "metakws/episodes.hpp"
#include "metakws/feature_store.hpp"
#include "metakws/synthetic_corpus.hpp"
#include "support/temp_dir.hpp"

namespace metakws::testing {

struct SmallCorpus {
    TempDir dir{"metakws-small"};
    SplitManifest manifest;
    std::unique_ptr<FeatureStore> store;
    NoiseLengths noise;

    SmallCorpus() {
        SyntheticCorpusConfig cfg;
        cfg.clips_per_keyword = 12;
        cfg.speakers = 20;
        cfg.noise_files = 2;
        cfg.noise_seconds = 3;
        generate_synthetic_corpus(dir.path(), cfg);
        const auto index = scan_corpus(dir.path());
        const auto partition = make_partition(index, TaskPreset::digits, 1);
        manifest = make_splits(index, partition, 4, 4, 1);
        store = std::make_unique<FeatureStore>(dir.path(), FrontendConfig{}, std::nullopt);
        noise = noise_lengths(*store, partition);
    }
};

inline SmallCorpus& small_corpus() {
    static SmallCorpus c;
    return c;
}

/// Four conv blocks with two filters: full input geometry, cheap to run.
inline ModelConfig narrow_model() {
    ModelConfig m;
    m.filters = 2;
    return m;
}

}  // namespace metakws::testing
