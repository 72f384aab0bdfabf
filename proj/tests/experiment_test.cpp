#include "smoa/experiment.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "smoa/checkpoint.hpp"

using namespace smoa;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

// Small-but-statistically-safe setup: the label-statistics filter needs
// enough token frequency mass for unbiased fillers to stay clear of the
// ratio threshold, which caps how far the train split can shrink.
ExperimentConfig mini_config(const fs::path& out_dir) {
    ExperimentConfig config = default_experiment_config();
    config.backbone.d_model = 16;
    config.backbone.n_layers = 1;
    config.backbone.n_heads = 2;
    config.backbone.d_ff = 32;
    config.train_size = 4800;
    config.test_size = 240;
    config.challenge_size = 240;
    config.overlap_train_size = 320;
    config.routing_subset_size = 96;
    config.probe_epochs = 1;
    config.train.phase1_epochs = 1;
    config.train.epochs = 2;
    config.train.batch_size = 32;
    config.train.expert.d_bottleneck = 4;
    config.seed = 5;
    config.out_dir = out_dir.string();
    return config;
}

}  // namespace

TEST_CASE("config serialization round-trips and hashes ignore the output directory") {
    ExperimentConfig config = default_experiment_config();
    nlohmann::json j = experiment_config_json(config);
    ExperimentConfig back = parse_experiment_config(j);
    CHECK(experiment_config_json(back) == j);

    CHECK(config.biases.size() == 3);
    CHECK(back.biases[2].family == BiasFamily::overlap);
    CHECK(back.train.strategy == Strategy::two_stage);

    std::string digest = config_digest(config);
    CHECK(digest.size() == 64);
    ExperimentConfig moved = config;
    moved.out_dir = "somewhere/else";
    CHECK(config_digest(moved) == digest);
    ExperimentConfig reseeded = config;
    reseeded.seed = 2;
    CHECK(config_digest(reseeded) != digest);

    // defaults fill in anything a sparse config omits
    ExperimentConfig sparse = parse_experiment_config(nlohmann::json::object());
    CHECK(sparse.train_size == 20000);
    CHECK(sparse.biases.empty());
}

TEST_CASE("config parsing rejects unknown fields and bad values") {
    CHECK_THROWS_AS(parse_experiment_config({{"trian", 1}}), ConfigError);
    CHECK_THROWS_AS(parse_experiment_config({{"task", {{"vocabsize", 10}}}}), ConfigError);
    CHECK_THROWS_AS(parse_experiment_config({{"train", {{"optimizer", {{"beta3", 0.5}}}}}}),
                    ConfigError);
    CHECK_THROWS_AS(parse_experiment_config({{"biases", 7}}), ConfigError);
    CHECK_THROWS_AS(parse_experiment_config({{"biases", {{{"family", "sideways"}}}}}),
                    ConfigError);
    CHECK_THROWS_AS(parse_experiment_config({{"seed", "one"}}), ConfigError);
    CHECK_THROWS_AS(parse_experiment_config({{"train", {{"strategy", "three_stage"}}}}),
                    ConfigError);
}

TEST_CASE("overrides patch scalar fields through dotted paths") {
    nlohmann::json j = experiment_config_json(default_experiment_config());

    apply_override(j, "train.epochs=9");
    apply_override(j, "biases.0.strength=0.5");
    apply_override(j, "seed=42");
    apply_override(j, "train.strategy=one_stage");
    apply_override(j, "out_dir=runs/elsewhere");
    apply_override(j, "train.train_head_in_phase2=true");

    ExperimentConfig config = parse_experiment_config(j);
    CHECK(config.train.epochs == 9);
    CHECK(config.biases[0].strength == doctest::Approx(0.5));
    CHECK(config.seed == 42);
    CHECK(config.train.strategy == Strategy::one_stage);
    CHECK(config.out_dir == "runs/elsewhere");
    CHECK(config.train.train_head_in_phase2);

    CHECK_THROWS_AS(apply_override(j, "no_such_field=1"), ConfigError);
    CHECK_THROWS_AS(apply_override(j, "train=1"), ConfigError);
    CHECK_THROWS_AS(apply_override(j, "biases.9.strength=1"), ConfigError);
    CHECK_THROWS_AS(apply_override(j, "biases.first.strength=1"), ConfigError);
    CHECK_THROWS_AS(apply_override(j, "train.epochs"), ConfigError);
    CHECK_THROWS_AS(apply_override(j, "=5"), ConfigError);
    CHECK_THROWS_AS(apply_override(j, "seed.deep=1"), ConfigError);
}

TEST_CASE("cross-field validation catches impossible setups") {
    ExperimentConfig config = default_experiment_config();
    config.backbone.n_classes = 4;
    CHECK_THROWS_AS(gen_splits(config), ConfigError);

    config = default_experiment_config();
    config.backbone.vocab_size = 150;
    CHECK_THROWS_AS(gen_splits(config), ConfigError);

    config = default_experiment_config();
    config.backbone.max_len = 12;  // rows reach 3 + (len_a_max+1) + (len_b_max+2) = 14
    CHECK_THROWS_AS(gen_splits(config), ConfigError);

    config = default_experiment_config();
    config.probe_epochs = 0;
    CHECK_THROWS_AS(gen_splits(config), ConfigError);
}

TEST_CASE("split generation is sized, ordered, and deterministic") {
    ExperimentConfig config = default_experiment_config();
    config.train_size = 300;
    config.test_size = 60;
    config.challenge_size = 40;
    config.overlap_train_size = 50;
    config.seed = 9;

    SplitSet splits = gen_splits(config);
    CHECK(splits.train.size() == 300);
    CHECK(splits.test.size() == 60);
    REQUIRE(splits.challenges.size() == 3);
    CHECK(splits.challenges[0].first == "lexical");
    CHECK(splits.challenges[1].first == "partial_input");
    CHECK(splits.challenges[2].first == "overlap");
    for (const auto& [name, data] : splits.challenges) CHECK(data.size() == 40);
    CHECK(splits.overlap_train.size() == 50);
    CHECK(splits.task.table.size() == splits.task.n_keys * splits.task.n_keys);

    SplitSet again = gen_splits(config);
    REQUIRE(again.train.size() == splits.train.size());
    for (size_t i = 0; i < splits.train.size(); ++i) {
        CHECK(again.train.examples[i].a == splits.train.examples[i].a);
        CHECK(again.train.examples[i].b == splits.train.examples[i].b);
        CHECK(again.train.examples[i].label == splits.train.examples[i].label);
    }

    // different experiment seeds shuffle everything, including the task table
    config.seed = 10;
    SplitSet other = gen_splits(config);
    CHECK(other.task.table != splits.task.table);

    // no overlap family configured -> no anti-overlap training split
    config.biases.pop_back();
    SplitSet no_overlap = gen_splits(config);
    CHECK(no_overlap.overlap_train.empty());
    CHECK(no_overlap.challenges.size() == 2);
}

TEST_CASE("the probe learns the segment-B shortcut, not the pair rule") {
    ExperimentConfig config;
    BiasSpec marker;
    marker.family = BiasFamily::partial_input;
    marker.strength = 1.0;
    marker.coverage = 1.0;
    config.biases = {marker};
    config.backbone.d_model = 16;
    config.backbone.n_layers = 1;
    config.backbone.n_heads = 2;
    config.backbone.d_ff = 32;
    config.train_size = 1024;
    config.test_size = 192;
    config.challenge_size = 192;
    config.probe_epochs = 8;
    config.probe_learning_rate = 3e-3;
    config.train.batch_size = 32;
    config.seed = 21;

    SplitSet splits = gen_splits(config);
    Model probe = train_probe(splits.train, config);

    auto predict = [&probe](const Batch& batch) {
        NoGradGuard guard;
        Tensor logits = partial_input_forward(probe, batch);
        const Shape& shape = logits.shape();
        std::vector<int> out(shape[0], 0);
        for (size_t r = 0; r < shape[0]; ++r) {
            for (size_t c = 1; c < shape[1]; ++c) {
                if (logits.values()[r * shape[1] + c] > logits.values()[r * shape[1] + out[r]]) {
                    out[r] = static_cast<int>(c);
                }
            }
        }
        return out;
    };
    double biased_accuracy = evaluate(splits.test, predict);
    double challenge_accuracy = evaluate(splits.challenges[0].second, predict);
    CHECK(biased_accuracy > 0.9);       // reads the planted marker
    CHECK(challenge_accuracy < 0.4);    // marker anti-correlated -> collapses
    CHECK(biased_accuracy - challenge_accuracy > 0.5);

    // probe-hard mining lines up with its report; the label-statistics
    // filter is exercised in the full-pipeline test (at full coverage every
    // example carries a cue, which it correctly refuses to work with)
    DebiasSplits mined;
    mined.hard = filter_hard(splits.train, probe, 128, true, &mined.hard_report);
    CHECK(mined.hard.size() == mined.hard_report.kept);
    CHECK(!mined.hard_report.degenerate_model);
    CHECK_THROWS_AS(mine_debias_splits(splits.train, probe), InputError);
}

TEST_CASE("routing analysis produces a symmetric unit-diagonal correlation matrix") {
    ExperimentConfig config = default_experiment_config();
    config.backbone.d_model = 16;
    config.backbone.n_layers = 1;
    config.backbone.n_heads = 2;
    config.backbone.d_ff = 32;
    config.routing_subset_size = 64;
    config.seed = 33;

    TaskSpec task = experiment_task(config);
    Rng rng(7);
    Model model = build_backbone(config.backbone, rng);
    ExpertConfig expert = default_expert_config(3, 4);
    insert_smoa(model, expert, rng);

    RoutingAnalysis analysis = analyze_routing(model, task, config);
    REQUIRE(analysis.distributions.size() == 6);
    REQUIRE(analysis.traces.size() == 6);
    for (const auto& [key, dist] : analysis.distributions) {
        REQUIRE(dist.size() == expert.n_adapters);
        double total = 0.0;
        for (double v : dist) total += v;
        CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
    }
    double within_sum = 0.0, cross_sum = 0.0;
    size_t within_n = 0, cross_n = 0;
    std::vector<std::string> keys;
    for (const auto& [key, dist] : analysis.distributions) keys.push_back(key);
    for (size_t i = 0; i < keys.size(); ++i) {
        CHECK(analysis.correlation.at(keys[i]).at(keys[i]) == doctest::Approx(1.0));
        for (size_t k = i + 1; k < keys.size(); ++k) {
            double r = analysis.correlation.at(keys[i]).at(keys[k]);
            CHECK(analysis.correlation.at(keys[k]).at(keys[i]) == doctest::Approx(r));
            CHECK(r >= -1.0 - 1e-12);
            CHECK(r <= 1.0 + 1e-12);
            std::string fam_i = keys[i].substr(0, keys[i].find('#'));
            std::string fam_k = keys[k].substr(0, keys[k].find('#'));
            if (fam_i == fam_k) {
                within_sum += r;
                ++within_n;
            } else {
                cross_sum += r;
                ++cross_n;
            }
        }
    }
    CHECK(within_n == 3);
    CHECK(cross_n == 12);
    CHECK(analysis.within_family_mean == doctest::Approx(within_sum / within_n));
    CHECK(analysis.cross_family_mean == doctest::Approx(cross_sum / cross_n));

    Model plain = build_backbone(config.backbone, rng);
    CHECK_THROWS_AS(analyze_routing(plain, task, config), ContractError);
}

TEST_CASE("the full pipeline writes every artifact and reproduces metrics byte for byte") {
    fs::path base = fs::temp_directory_path() / "smoa_repro_test";
    fs::remove_all(base);
    ExperimentConfig config = mini_config(base / "run_a");

    ReproResult result = run_repro(config);

    CHECK(result.config_hash == config_digest(config));
    CHECK(result.split_sizes.at("train") == 4800);
    CHECK(result.split_sizes.at("hard") == result.hard_report.kept);
    CHECK(result.split_sizes.at("lls") == result.lls_report.kept);
    CHECK(result.split_sizes.at("overlap_train") == 320);
    CHECK(result.report.strategy == Strategy::two_stage);
    CHECK(result.report.backbone_digest_before == result.report.backbone_digest_after);
    CHECK(result.routing.distributions.size() == 6);
    CHECK(result.params.trainable < result.params.total);

    for (const char* rel :
         {"config.json", "metrics.json", "timing.json", "data/train.jsonl", "data/test.jsonl",
          "data/hard.jsonl", "data/lls.jsonl", "data/challenge_lexical.jsonl",
          "data/challenge_partial_input.jsonl", "data/challenge_overlap.jsonl",
          "data/overlap_train.jsonl", "data/manifest.json", "checkpoints/probe.ckpt",
          "checkpoints/phase1.ckpt", "checkpoints/phase2.ckpt", "checkpoints/final.ckpt",
          "routing/lexical_0.json", "routing/overlap_1.json"}) {
        CHECK_MESSAGE(fs::exists(base / "run_a" / rel), rel);
    }

    nlohmann::json metrics = nlohmann::json::parse(slurp(base / "run_a" / "metrics.json"));
    CHECK(metrics["config_hash"] == result.config_hash);
    CHECK(metrics["training"].contains("split_accuracy"));
    CHECK(metrics.dump().find("wall") == std::string::npos);
    nlohmann::json timing = nlohmann::json::parse(slurp(base / "run_a" / "timing.json"));
    CHECK(timing["total_seconds"].get<double>() > 0.0);

    // the saved final checkpoint scores identically to the live model
    Model reloaded = load_model((base / "run_a" / "checkpoints" / "final.ckpt").string());
    CHECK(reloaded.expert.n_adapters == 5);

    // same config + seed, different directory -> byte-identical metrics
    ExperimentConfig config_b = mini_config(base / "run_b");
    run_repro(config_b);
    CHECK(slurp(base / "run_a" / "metrics.json") == slurp(base / "run_b" / "metrics.json"));
    fs::remove_all(base);
}
