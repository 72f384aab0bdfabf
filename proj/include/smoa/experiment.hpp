#pragma once

// One-config experiment pipeline: synthesize the biased corpus, train a
// segment-B-only probe, mine the debiasing splits (probe-hard examples,
// label-statistics survivors, anti-overlap training data), run the adapter
// training strategy, and analyze routing. Every artifact lands under a
// single output directory, and every metric that is meant to be
// reproducible goes into one deterministic JSON file; wall-clock numbers
// are quarantined in a separate timing file.

#include "smoa/analysis.hpp"
#include "smoa/data.hpp"
#include "smoa/train.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace smoa {

struct ExperimentConfig {
    // task.seed and task.table are rebuilt from the experiment seed; only
    // the scalar layout fields are read from the config.
    TaskSpec task;
    std::vector<BiasSpec> biases;  // at most one spec per family
    BackboneConfig backbone;
    // train.seed and train.checkpoint_dir are likewise derived; an expert
    // config with n_adapters == 0 resolves to the 2m-1 / top-min(2, n)
    // default for the m debiasing splits.
    TrainConfig train;
    size_t train_size = 20000;
    size_t test_size = 2000;
    size_t challenge_size = 2000;
    size_t overlap_train_size = 4000;  // anti-overlap training split
    size_t probe_epochs = 2;
    double probe_learning_rate = 1e-3;
    size_t routing_subset_size = 256;  // examples per routing subset
    uint64_t seed = 1;
    std::string out_dir = "runs/repro";
};

// The reference desk-scale setup: three shortcut families at strength
// 0.95 with 0.65 coverage, 20k/2k splits, 64-dim two-block backbone.
ExperimentConfig default_experiment_config();

nlohmann::json experiment_config_json(const ExperimentConfig& config);
// Rejects unknown keys so config typos fail loudly instead of silently
// falling back to defaults.
ExperimentConfig parse_experiment_config(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::string& path);

// SHA-256 of the canonical (sorted-key) JSON dump. The output directory is
// excluded: it locates artifacts rather than defining the experiment.
std::string config_digest(const ExperimentConfig& config);

// Applies one "dotted.path=value" override to the JSON form of a config
// (e.g. "train.epochs=3", "biases.0.strength=0.9", "seed=7"). Values parse
// as bool, integer, or real before falling back to string; the path must
// already exist and must name a scalar field.
void apply_override(nlohmann::json& config, const std::string& spec);

// Generator splits for one config: biased train/test, one anti-correlated
// challenge split per configured family, and (when an overlap family is
// configured) the anti-overlap training split.
struct SplitSet {
    TaskSpec task;  // with the lookup table filled in
    Dataset train;
    Dataset test;
    std::vector<std::pair<std::string, Dataset>> challenges;  // family name -> split
    Dataset overlap_train;
};

SplitSet gen_splits(const ExperimentConfig& config);

// The task (with its lookup table) every split of this experiment shares;
// exposed separately for consumers that need no example data.
TaskSpec experiment_task(const ExperimentConfig& config);

// Trains a fresh backbone of the configured shape to predict labels from
// segment B alone; used to mine the examples that view misclassifies.
Model train_probe(const Dataset& train_split, const ExperimentConfig& config);

struct DebiasSplits {
    Dataset hard;  // probe-misclassified, label-rebalanced
    HardFilterReport hard_report;
    Dataset lls;  // label-statistics survivors
    UnbiasedFilterReport lls_report;
};

DebiasSplits mine_debias_splits(const Dataset& train_split, const Model& probe);

// Routing specialization sweep: two fresh challenge subsets per family
// (keyed "<family>#0" / "<family>#1"), last-mixture-layer selection
// distributions, and their pairwise correlations split into same-family
// and different-family means.
struct RoutingAnalysis {
    std::map<std::string, std::vector<double>> distributions;
    std::map<std::string, std::map<std::string, double>> correlation;
    double within_family_mean = 0.0;
    double cross_family_mean = 0.0;
    std::vector<RoutingTrace> traces;
};

RoutingAnalysis analyze_routing(const Model& model, const TaskSpec& task,
                                const ExperimentConfig& config);

struct ReproResult {
    std::string config_hash;
    RunReport report;
    std::map<std::string, double> probe_accuracy;  // segment-B-only scores
    std::map<std::string, size_t> split_sizes;
    HardFilterReport hard_report;
    UnbiasedFilterReport lls_report;
    RoutingAnalysis routing;
    ParamReport params;
    // wall-clock totals; reported in timing.json only
    double probe_seconds = 0.0;
    double analysis_seconds = 0.0;
    double total_seconds = 0.0;
};

// The full pipeline: generate -> probe -> filter -> train -> analyze,
// writing data/, checkpoints/, routing/, config.json, metrics.json, and
// timing.json under config.out_dir. Rerunning with the same config and
// seed reproduces metrics.json byte for byte.
ReproResult run_repro(const ExperimentConfig& config);

// Everything deterministic about a finished run (no wall-clock values).
nlohmann::json repro_metrics_json(const ReproResult& result);

}  // namespace smoa
