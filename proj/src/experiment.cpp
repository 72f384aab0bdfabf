#include "smoa/experiment.hpp"

#include "smoa/checkpoint.hpp"
#include "smoa/digest.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

namespace smoa {

namespace {

namespace fs = std::filesystem;

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot open '" + path + "' for writing");
    out << text;
    if (!out) throw InputError("failed while writing '" + path + "'");
}

void check_keys(const nlohmann::json& j, const std::string& where,
                const std::set<std::string>& allowed) {
    if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
    for (const auto& item : j.items()) {
        if (!allowed.count(item.key())) {
            throw ConfigError(where + ": unknown field '" + item.key() + "'");
        }
    }
}

nlohmann::json task_json(const TaskSpec& task) {
    nlohmann::json j;
    j["vocab_size"] = task.vocab_size;
    j["n_classes"] = task.n_classes;
    j["n_keys"] = task.n_keys;
    j["len_a_min"] = task.len_a_min;
    j["len_a_max"] = task.len_a_max;
    j["len_b_min"] = task.len_b_min;
    j["len_b_max"] = task.len_b_max;
    j["n_fillers"] = task.n_fillers;
    return j;
}

TaskSpec parse_task(const nlohmann::json& j) {
    check_keys(j, "task",
               {"vocab_size", "n_classes", "n_keys", "len_a_min", "len_a_max", "len_b_min",
                "len_b_max", "n_fillers"});
    TaskSpec task;
    task.vocab_size = j.value("vocab_size", task.vocab_size);
    task.n_classes = j.value("n_classes", task.n_classes);
    task.n_keys = j.value("n_keys", task.n_keys);
    task.len_a_min = j.value("len_a_min", task.len_a_min);
    task.len_a_max = j.value("len_a_max", task.len_a_max);
    task.len_b_min = j.value("len_b_min", task.len_b_min);
    task.len_b_max = j.value("len_b_max", task.len_b_max);
    task.n_fillers = j.value("n_fillers", task.n_fillers);
    return task;
}

nlohmann::json bias_json(const BiasSpec& bias) {
    nlohmann::json j;
    j["family"] = family_name(bias.family);
    j["strength"] = bias.strength;
    j["coverage"] = bias.coverage;
    j["designated_label"] = bias.designated_label;
    j["substitution"] = bias.substitution;
    return j;
}

BiasSpec parse_bias(const nlohmann::json& j, size_t index) {
    std::string where = "biases[" + std::to_string(index) + "]";
    check_keys(j, where, {"family", "strength", "coverage", "designated_label", "substitution"});
    BiasSpec bias;
    if (j.contains("family")) bias.family = family_from_name(j.at("family").get<std::string>());
    bias.strength = j.value("strength", bias.strength);
    bias.coverage = j.value("coverage", bias.coverage);
    bias.designated_label = j.value("designated_label", bias.designated_label);
    bias.substitution = j.value("substitution", bias.substitution);
    return bias;
}

nlohmann::json backbone_json(const BackboneConfig& config) {
    nlohmann::json j;
    j["vocab_size"] = config.vocab_size;
    j["max_len"] = config.max_len;
    j["n_segments"] = config.n_segments;
    j["d_model"] = config.d_model;
    j["n_layers"] = config.n_layers;
    j["n_heads"] = config.n_heads;
    j["d_ff"] = config.d_ff;
    j["n_classes"] = config.n_classes;
    j["ln_eps"] = config.ln_eps;
    return j;
}

BackboneConfig parse_backbone(const nlohmann::json& j) {
    check_keys(j, "backbone",
               {"vocab_size", "max_len", "n_segments", "d_model", "n_layers", "n_heads", "d_ff",
                "n_classes", "ln_eps"});
    BackboneConfig config;
    config.vocab_size = j.value("vocab_size", config.vocab_size);
    config.max_len = j.value("max_len", config.max_len);
    config.n_segments = j.value("n_segments", config.n_segments);
    config.d_model = j.value("d_model", config.d_model);
    config.n_layers = j.value("n_layers", config.n_layers);
    config.n_heads = j.value("n_heads", config.n_heads);
    config.d_ff = j.value("d_ff", config.d_ff);
    config.n_classes = j.value("n_classes", config.n_classes);
    config.ln_eps = j.value("ln_eps", config.ln_eps);
    return config;
}

nlohmann::json train_json(const TrainConfig& config) {
    nlohmann::json j;
    j["learning_rate"] = config.learning_rate;
    j["epochs"] = config.epochs;
    j["batch_size"] = config.batch_size;
    j["optimizer"] = {{"beta1", config.optimizer.beta1},
                      {"beta2", config.optimizer.beta2},
                      {"eps", config.optimizer.eps},
                      {"weight_decay", config.optimizer.weight_decay}};
    j["strategy"] = strategy_name(config.strategy);
    j["phase1_epochs"] = config.phase1_epochs;
    j["phase1_learning_rate"] = config.phase1_learning_rate;
    j["train_head_in_phase2"] = config.train_head_in_phase2;
    j["expert"] = {{"n_adapters", config.expert.n_adapters},
                   {"top_k", config.expert.top_k},
                   {"d_bottleneck", config.expert.d_bottleneck}};
    j["eval_batch_size"] = config.eval_batch_size;
    return j;
}

TrainConfig parse_train(const nlohmann::json& j) {
    check_keys(j, "train",
               {"learning_rate", "epochs", "batch_size", "optimizer", "strategy", "phase1_epochs",
                "phase1_learning_rate", "train_head_in_phase2", "expert", "eval_batch_size"});
    TrainConfig config;
    config.learning_rate = j.value("learning_rate", config.learning_rate);
    config.epochs = j.value("epochs", config.epochs);
    config.batch_size = j.value("batch_size", config.batch_size);
    if (j.contains("optimizer")) {
        const nlohmann::json& o = j.at("optimizer");
        check_keys(o, "train.optimizer", {"beta1", "beta2", "eps", "weight_decay"});
        config.optimizer.beta1 = o.value("beta1", config.optimizer.beta1);
        config.optimizer.beta2 = o.value("beta2", config.optimizer.beta2);
        config.optimizer.eps = o.value("eps", config.optimizer.eps);
        config.optimizer.weight_decay = o.value("weight_decay", config.optimizer.weight_decay);
    }
    if (j.contains("strategy")) {
        config.strategy = strategy_from_name(j.at("strategy").get<std::string>());
    }
    config.phase1_epochs = j.value("phase1_epochs", config.phase1_epochs);
    config.phase1_learning_rate = j.value("phase1_learning_rate", config.phase1_learning_rate);
    config.train_head_in_phase2 = j.value("train_head_in_phase2", config.train_head_in_phase2);
    if (j.contains("expert")) {
        const nlohmann::json& e = j.at("expert");
        check_keys(e, "train.expert", {"n_adapters", "top_k", "d_bottleneck"});
        config.expert.n_adapters = e.value("n_adapters", config.expert.n_adapters);
        config.expert.top_k = e.value("top_k", config.expert.top_k);
        config.expert.d_bottleneck = e.value("d_bottleneck", config.expert.d_bottleneck);
    }
    config.eval_batch_size = j.value("eval_batch_size", config.eval_batch_size);
    return config;
}

void validate_experiment(const ExperimentConfig& config) {
    if (config.backbone.n_classes != config.task.n_classes) {
        throw ConfigError("backbone predicts " + std::to_string(config.backbone.n_classes) +
                          " classes but the task defines " +
                          std::to_string(config.task.n_classes));
    }
    if (config.backbone.vocab_size < config.task.vocab_size) {
        throw ConfigError("backbone vocabulary (" + std::to_string(config.backbone.vocab_size) +
                          ") is smaller than the task vocabulary (" +
                          std::to_string(config.task.vocab_size) + ")");
    }
    // worst case: [CLS] a [SEP] b [SEP]; segment B is longest for a
    // high-overlap pair (all of A's fillers, one distractor, the key) and can
    // carry both token cues on top
    size_t longest_b = std::max(config.task.len_a_max + 1, config.task.len_b_max) + 2;
    size_t longest = 3 + config.task.len_a_max + longest_b;
    if (longest > config.backbone.max_len) {
        throw ConfigError("sequences can reach " + std::to_string(longest) +
                          " tokens but backbone max_len is " +
                          std::to_string(config.backbone.max_len));
    }
    if (config.probe_epochs == 0) {
        throw ConfigError("probe_epochs must be at least 1 (an untrained probe "
                          "mines meaningless hard examples)");
    }
    if (config.train_size == 0 || config.test_size == 0) {
        throw ConfigError("train_size and test_size must be positive");
    }
    if (!config.biases.empty() && config.challenge_size == 0) {
        throw ConfigError("challenge_size must be positive when bias families are configured");
    }
    if (config.routing_subset_size == 0) {
        throw ConfigError("routing_subset_size must be positive");
    }
}

std::vector<int> argmax_rows(const Tensor& logits) {
    const Shape& shape = logits.shape();
    size_t rows = shape[0], cols = shape[1];
    const std::vector<double>& v = logits.values();
    std::vector<int> out(rows, 0);
    for (size_t r = 0; r < rows; ++r) {
        size_t best = 0;
        for (size_t c = 1; c < cols; ++c) {
            if (v[r * cols + c] > v[r * cols + best]) best = c;
        }
        out[r] = static_cast<int>(best);
    }
    return out;
}

}  // namespace

ExperimentConfig default_experiment_config() {
    ExperimentConfig config;
    config.backbone.max_len = 16;
    BiasSpec lexical;
    lexical.family = BiasFamily::lexical;
    BiasSpec partial_input;
    partial_input.family = BiasFamily::partial_input;
    BiasSpec overlap;
    overlap.family = BiasFamily::overlap;
    for (BiasSpec* bias : {&lexical, &partial_input, &overlap}) {
        bias->strength = 0.95;
        bias->coverage = 0.65;
    }
    config.biases = {lexical, partial_input, overlap};
    return config;
}

nlohmann::json experiment_config_json(const ExperimentConfig& config) {
    nlohmann::json j;
    j["task"] = task_json(config.task);
    nlohmann::json biases = nlohmann::json::array();
    for (const BiasSpec& bias : config.biases) biases.push_back(bias_json(bias));
    j["biases"] = biases;
    j["backbone"] = backbone_json(config.backbone);
    j["train"] = train_json(config.train);
    j["train_size"] = config.train_size;
    j["test_size"] = config.test_size;
    j["challenge_size"] = config.challenge_size;
    j["overlap_train_size"] = config.overlap_train_size;
    j["probe_epochs"] = config.probe_epochs;
    j["probe_learning_rate"] = config.probe_learning_rate;
    j["routing_subset_size"] = config.routing_subset_size;
    j["seed"] = config.seed;
    j["out_dir"] = config.out_dir;
    return j;
}

ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
    try {
        check_keys(j, "config",
                   {"task", "biases", "backbone", "train", "train_size", "test_size",
                    "challenge_size", "overlap_train_size", "probe_epochs", "probe_learning_rate",
                    "routing_subset_size", "seed", "out_dir"});
        ExperimentConfig config;
        if (j.contains("task")) config.task = parse_task(j.at("task"));
        if (j.contains("biases")) {
            if (!j.at("biases").is_array()) throw ConfigError("biases: expected a JSON array");
            config.biases.clear();
            for (size_t i = 0; i < j.at("biases").size(); ++i) {
                config.biases.push_back(parse_bias(j.at("biases")[i], i));
            }
        }
        if (j.contains("backbone")) config.backbone = parse_backbone(j.at("backbone"));
        if (j.contains("train")) config.train = parse_train(j.at("train"));
        config.train_size = j.value("train_size", config.train_size);
        config.test_size = j.value("test_size", config.test_size);
        config.challenge_size = j.value("challenge_size", config.challenge_size);
        config.overlap_train_size = j.value("overlap_train_size", config.overlap_train_size);
        config.probe_epochs = j.value("probe_epochs", config.probe_epochs);
        config.probe_learning_rate = j.value("probe_learning_rate", config.probe_learning_rate);
        config.routing_subset_size = j.value("routing_subset_size", config.routing_subset_size);
        config.seed = j.value("seed", config.seed);
        config.out_dir = j.value("out_dir", config.out_dir);
        return config;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed config: ") + e.what());
    }
}

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open config file '" + path + "'");
    nlohmann::json j = nlohmann::json::parse(in, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded()) throw ParseError("config file '" + path + "' is not valid JSON");
    return parse_experiment_config(j);
}

std::string config_digest(const ExperimentConfig& config) {
    nlohmann::json j = experiment_config_json(config);
    j.erase("out_dir");
    return sha256_hex(j.dump());
}

void apply_override(nlohmann::json& config, const std::string& spec) {
    size_t eq = spec.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override must look like path=value, got '" + spec + "'");
    }
    std::string path = spec.substr(0, eq);
    std::string value = spec.substr(eq + 1);

    std::vector<std::string> parts;
    size_t start = 0;
    while (true) {
        size_t dot = path.find('.', start);
        if (dot == std::string::npos) {
            parts.push_back(path.substr(start));
            break;
        }
        parts.push_back(path.substr(start, dot - start));
        start = dot + 1;
    }

    nlohmann::json* node = &config;
    for (const std::string& part : parts) {
        if (part.empty()) throw ConfigError("empty path segment in override '" + spec + "'");
        if (node->is_array()) {
            size_t index = 0;
            size_t consumed = 0;
            try {
                index = std::stoul(part, &consumed);
            } catch (const std::exception&) {
                consumed = 0;
            }
            if (consumed != part.size()) {
                throw ConfigError("override path '" + path + "' indexes an array with '" + part +
                                  "'");
            }
            if (index >= node->size()) {
                throw ConfigError("override index " + part + " is out of range in '" + path + "'");
            }
            node = &(*node)[index];
        } else if (node->is_object()) {
            if (!node->contains(part)) {
                throw ConfigError("override path '" + path + "' does not name a config field");
            }
            node = &(*node)[part];
        } else {
            throw ConfigError("override path '" + path + "' descends into a scalar");
        }
    }
    if (node->is_object() || node->is_array()) {
        throw ConfigError("override target '" + path + "' is not a scalar field");
    }
    nlohmann::json parsed = nlohmann::json::parse(value, nullptr, /*allow_exceptions=*/false);
    if (!parsed.is_discarded() && (parsed.is_number() || parsed.is_boolean())) {
        *node = parsed;
    } else {
        *node = value;
    }
}

TaskSpec experiment_task(const ExperimentConfig& config) {
    validate_experiment(config);
    TaskSpec base = config.task;
    base.seed = derive_seed(config.seed, "task");
    base.table.clear();
    return make_task(base);
}

SplitSet gen_splits(const ExperimentConfig& config) {
    SplitSet splits;
    splits.task = experiment_task(config);
    splits.train = gen_dataset(splits.task, config.biases, config.train_size,
                               derive_seed(config.seed, "data:train"));
    splits.test = gen_dataset(splits.task, config.biases, config.test_size,
                              derive_seed(config.seed, "data:test"));
    for (const BiasSpec& bias : config.biases) {
        std::string name = family_name(bias.family);
        splits.challenges.emplace_back(
            name, gen_challenge(splits.task, bias, config.challenge_size,
                                derive_seed(config.seed, "data:challenge:" + name)));
        if (bias.family == BiasFamily::overlap && config.overlap_train_size > 0) {
            splits.overlap_train =
                gen_challenge(splits.task, bias, config.overlap_train_size,
                              derive_seed(config.seed, "data:overlap_train"));
        }
    }
    return splits;
}

Model train_probe(const Dataset& train_split, const ExperimentConfig& config) {
    if (train_split.empty()) throw InputError("cannot train a probe on an empty split");
    size_t batch_size = std::min(config.train.batch_size, train_split.size());
    if (batch_size == 0) throw ConfigError("probe training needs a positive batch size");

    Rng init(derive_seed(config.seed, "probe:init"));
    Model probe = build_backbone(config.backbone, init);
    AdamW optimizer(probe.params.trainable(), config.train.optimizer);
    Rng order(derive_seed(config.seed, "probe:stream"));

    std::vector<size_t> indices(train_split.size());
    std::iota(indices.begin(), indices.end(), size_t{0});
    size_t steps_per_epoch = train_split.size() / batch_size;
    size_t total_steps = config.probe_epochs * steps_per_epoch;
    size_t global_step = 0;
    for (size_t epoch = 0; epoch < config.probe_epochs; ++epoch) {
        order.shuffle(indices);
        for (size_t step = 0; step < steps_per_epoch; ++step) {
            std::vector<size_t> slice(indices.begin() + step * batch_size,
                                      indices.begin() + (step + 1) * batch_size);
            Batch batch = make_batch(train_split, slice);
            Tensor loss = cross_entropy(partial_input_forward(probe, batch), batch.labels);
            backward(loss);
            optimizer.step(linear_lr(global_step++, total_steps, config.probe_learning_rate));
            optimizer.zero_grad();
        }
    }
    return probe;
}

DebiasSplits mine_debias_splits(const Dataset& train_split, const Model& probe) {
    DebiasSplits mined;
    mined.hard = filter_hard(train_split, probe, 128, /*balance=*/true, &mined.hard_report);
    mined.lls = filter_unbiased(train_split, 3, 0.385, &mined.lls_report);
    return mined;
}

RoutingAnalysis analyze_routing(const Model& model, const TaskSpec& task,
                                const ExperimentConfig& config) {
    if (config.biases.empty()) {
        throw ConfigError("routing analysis needs at least one configured bias family");
    }
    RoutingAnalysis out;
    std::vector<std::string> keys;
    std::vector<std::string> families;
    for (const BiasSpec& bias : config.biases) {
        std::string family = family_name(bias.family);
        for (int i = 0; i < 2; ++i) {
            uint64_t seed =
                derive_seed(config.seed, "routing:" + family + ":" + std::to_string(i));
            Dataset subset = gen_challenge(task, bias, config.routing_subset_size, seed);
            std::string key = family + "#" + std::to_string(i);
            RoutingTrace trace =
                record_routing(model, subset, key, config.train.eval_batch_size);
            size_t last_layer = trace.records.size() - 1;
            out.distributions[key] = routing_distribution(trace, last_layer);
            out.traces.push_back(std::move(trace));
            keys.push_back(key);
            families.push_back(family);
        }
    }
    double within_sum = 0.0, cross_sum = 0.0;
    size_t within_n = 0, cross_n = 0;
    for (size_t i = 0; i < keys.size(); ++i) {
        out.correlation[keys[i]][keys[i]] = 1.0;
        for (size_t k = i + 1; k < keys.size(); ++k) {
            double r = pearson_corr(out.distributions[keys[i]], out.distributions[keys[k]]);
            out.correlation[keys[i]][keys[k]] = r;
            out.correlation[keys[k]][keys[i]] = r;
            if (families[i] == families[k]) {
                within_sum += r;
                ++within_n;
            } else {
                cross_sum += r;
                ++cross_n;
            }
        }
    }
    out.within_family_mean = within_n ? within_sum / within_n : 0.0;
    out.cross_family_mean = cross_n ? cross_sum / cross_n : 0.0;
    return out;
}

ReproResult run_repro(const ExperimentConfig& config) {
    auto run_start = std::chrono::steady_clock::now();
    ReproResult result;
    result.config_hash = config_digest(config);

    fs::path out_dir(config.out_dir);
    fs::create_directories(out_dir / "data");
    fs::create_directories(out_dir / "checkpoints");
    fs::create_directories(out_dir / "routing");

    {
        nlohmann::json echo = experiment_config_json(config);
        echo["config_hash"] = result.config_hash;
        write_text((out_dir / "config.json").string(), echo.dump(2) + "\n");
    }

    SplitSet splits = gen_splits(config);

    auto probe_start = std::chrono::steady_clock::now();
    Model probe = train_probe(splits.train, config);
    result.probe_seconds = seconds_since(probe_start);
    save_model(probe, (out_dir / "checkpoints" / "probe.ckpt").string());

    DebiasSplits mined = mine_debias_splits(splits.train, probe);
    result.hard_report = mined.hard_report;
    result.lls_report = mined.lls_report;

    auto probe_predict = [&probe](const Batch& batch) {
        NoGradGuard guard;
        return argmax_rows(partial_input_forward(probe, batch));
    };
    result.probe_accuracy["in_domain"] =
        evaluate(splits.test, probe_predict, config.train.eval_batch_size);
    for (const auto& [name, data] : splits.challenges) {
        result.probe_accuracy["challenge_" + name] =
            evaluate(data, probe_predict, config.train.eval_batch_size);
    }

    Rng model_rng(derive_seed(config.seed, "model"));
    Model model = build_backbone(config.backbone, model_rng);
    TrainConfig train_config = config.train;
    train_config.seed = derive_seed(config.seed, "train");
    train_config.checkpoint_dir = (out_dir / "checkpoints").string();

    std::vector<SplitRef> debias = {{"hard", &mined.hard}, {"lls", &mined.lls}};
    if (!splits.overlap_train.empty()) debias.push_back({"overlap_train", &splits.overlap_train});
    std::vector<SplitRef> eval_splits = {{"in_domain", &splits.test}};
    for (const auto& [name, data] : splits.challenges) {
        eval_splits.push_back({"challenge_" + name, &data});
    }
    result.report = train(model, splits.train, debias, eval_splits, train_config);
    // strategy-independent alias for the finished model (two-stage names its
    // last checkpoint phase2.ckpt)
    save_model(model, (out_dir / "checkpoints" / "final.ckpt").string());

    auto analysis_start = std::chrono::steady_clock::now();
    result.routing = analyze_routing(model, splits.task, config);
    result.params = param_report(model);
    result.analysis_seconds = seconds_since(analysis_start);

    for (const RoutingTrace& trace : result.routing.traces) {
        std::string stem = trace.subset;
        std::replace(stem.begin(), stem.end(), '#', '_');
        write_text((out_dir / "routing" / (stem + ".json")).string(),
                   trace_json(trace).dump(2) + "\n");
    }

    struct SplitFile {
        std::string name;
        const Dataset* data;
        uint64_t seed;  // generator seed; mined splits inherit the train seed
    };
    uint64_t train_seed = derive_seed(config.seed, "data:train");
    std::vector<SplitFile> files = {
        {"train", &splits.train, train_seed},
        {"test", &splits.test, derive_seed(config.seed, "data:test")},
        {"hard", &mined.hard, train_seed},
        {"lls", &mined.lls, train_seed}};
    for (const auto& [name, data] : splits.challenges) {
        files.push_back({"challenge_" + name, &data,
                         derive_seed(config.seed, "data:challenge:" + name)});
    }
    if (!splits.overlap_train.empty()) {
        files.push_back({"overlap_train", &splits.overlap_train,
                         derive_seed(config.seed, "data:overlap_train")});
    }

    nlohmann::json split_manifest;
    for (const SplitFile& file : files) {
        write_jsonl(*file.data, (out_dir / "data" / (file.name + ".jsonl")).string());
        split_manifest[file.name] = dataset_manifest(*file.data, splits.task, file.seed);
        result.split_sizes[file.name] = file.data->size();
    }
    nlohmann::json manifest;
    manifest["config_hash"] = result.config_hash;
    manifest["seed"] = config.seed;
    manifest["splits"] = split_manifest;
    write_text((out_dir / "data" / "manifest.json").string(), manifest.dump(2) + "\n");

    result.total_seconds = seconds_since(run_start);
    write_text((out_dir / "metrics.json").string(), repro_metrics_json(result).dump(2) + "\n");

    nlohmann::json timing;
    timing["probe_seconds"] = result.probe_seconds;
    timing["train_seconds"] = result.report.wall_seconds;
    timing["analysis_seconds"] = result.analysis_seconds;
    timing["total_seconds"] = result.total_seconds;
    write_text((out_dir / "timing.json").string(), timing.dump(2) + "\n");
    return result;
}

nlohmann::json repro_metrics_json(const ReproResult& result) {
    nlohmann::json j;
    j["config_hash"] = result.config_hash;
    j["training"] = report_json(result.report);
    j["probe_accuracy"] = result.probe_accuracy;
    j["split_sizes"] = result.split_sizes;
    j["filters"] = {{"hard",
                     {{"misclassified", result.hard_report.misclassified},
                      {"kept", result.hard_report.kept},
                      {"degenerate_model", result.hard_report.degenerate_model}}},
                    {"lls",
                     {{"flagged_tokens", result.lls_report.flagged_tokens},
                      {"removed", result.lls_report.removed},
                      {"kept", result.lls_report.kept}}}};
    j["routing"] = {{"distributions", result.routing.distributions},
                    {"correlation", result.routing.correlation},
                    {"within_family_mean", result.routing.within_family_mean},
                    {"cross_family_mean", result.routing.cross_family_mean}};
    j["parameters"] = param_report_json(result.params);
    return j;
}

}  // namespace smoa
