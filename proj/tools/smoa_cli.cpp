// Command-line front door: dataset synthesis, debias training, checkpoint
// evaluation, routing analysis, parameter reports, and the one-config
// end-to-end pipeline. Every command reads a single JSON experiment config;
// flags only override scalar fields, so runs stay reproducible through the
// config hash stamped into each artifact.
//
// Exit codes: 0 success, 2 configuration error, 3 runtime failure.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "smoa/checkpoint.hpp"
#include "smoa/experiment.hpp"

namespace fs = std::filesystem;
using namespace smoa;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out;
    uint64_t seed = 0;
    CLI::Option* seed_opt = nullptr;
    CLI::Option* out_opt = nullptr;
};

void attach_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("-c,--config", args.config_path, "experiment config JSON file")->required();
    cmd->add_option("--override", args.overrides,
                    "scalar config override as dotted.path=value (repeatable)");
    args.out_opt = cmd->add_option("--out", args.out, "output directory (overrides out_dir)");
    args.seed_opt = cmd->add_option("--seed", args.seed, "experiment seed (overrides seed)");
}

ExperimentConfig load_config(const CommonArgs& args) {
    std::ifstream in(args.config_path, std::ios::binary);
    if (!in) throw InputError("cannot open config file '" + args.config_path + "'");
    nlohmann::json j = nlohmann::json::parse(in, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded()) {
        throw ParseError("config file '" + args.config_path + "' is not valid JSON");
    }
    for (const std::string& spec : args.overrides) apply_override(j, spec);
    ExperimentConfig config = parse_experiment_config(j);
    if (args.seed_opt->count() > 0) config.seed = args.seed;
    if (args.out_opt->count() > 0) config.out_dir = args.out;
    return config;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot open '" + path + "' for writing");
    out << text;
    if (!out) throw InputError("failed while writing '" + path + "'");
}

void print_accuracies(const std::string& title, const std::map<std::string, double>& accuracy) {
    std::cout << title << "\n";
    for (const auto& [name, value] : accuracy) {
        std::cout << "  " << std::left << std::setw(26) << name << std::fixed
                  << std::setprecision(4) << value << "\n";
    }
    std::cout.unsetf(std::ios::fixed);
    std::cout << std::setprecision(6);
}

void cmd_gen_data(const ExperimentConfig& config) {
    SplitSet splits = gen_splits(config);
    fs::path data_dir = fs::path(config.out_dir) / "data";
    fs::create_directories(data_dir);

    uint64_t seed = config.seed;
    std::vector<std::pair<std::string, const Dataset*>> files = {{"train", &splits.train},
                                                                 {"test", &splits.test}};
    for (const auto& [name, data] : splits.challenges) {
        files.emplace_back("challenge_" + name, &data);
    }
    if (!splits.overlap_train.empty()) files.emplace_back("overlap_train", &splits.overlap_train);

    std::map<std::string, uint64_t> split_seeds = {
        {"train", derive_seed(seed, "data:train")}, {"test", derive_seed(seed, "data:test")}};
    for (const auto& [name, data] : splits.challenges) {
        split_seeds["challenge_" + name] = derive_seed(seed, "data:challenge:" + name);
    }
    split_seeds["overlap_train"] = derive_seed(seed, "data:overlap_train");

    nlohmann::json split_manifest;
    for (const auto& [name, data] : files) {
        std::string path = (data_dir / (name + ".jsonl")).string();
        write_jsonl(*data, path);
        split_manifest[name] = dataset_manifest(*data, splits.task, split_seeds.at(name));
        std::cout << "wrote " << data->size() << " examples to " << path << "\n";
    }
    nlohmann::json manifest;
    manifest["config_hash"] = config_digest(config);
    manifest["seed"] = seed;
    manifest["splits"] = split_manifest;
    write_text((data_dir / "manifest.json").string(), manifest.dump(2) + "\n");
    std::cout << "manifest: " << (data_dir / "manifest.json").string() << "\n";
}

void cmd_train(const ExperimentConfig& config) {
    SplitSet splits = gen_splits(config);
    std::cout << "training segment-B probe (" << config.probe_epochs << " epochs)\n";
    Model probe = train_probe(splits.train, config);
    DebiasSplits mined = mine_debias_splits(splits.train, probe);
    std::cout << "mined debiasing splits: hard=" << mined.hard.size()
              << " lls=" << mined.lls.size() << " overlap_train=" << splits.overlap_train.size()
              << "\n";

    Rng model_rng(derive_seed(config.seed, "model"));
    Model model = build_backbone(config.backbone, model_rng);
    TrainConfig train_config = config.train;
    train_config.seed = derive_seed(config.seed, "train");
    fs::path checkpoint_dir = fs::path(config.out_dir) / "checkpoints";
    train_config.checkpoint_dir = checkpoint_dir.string();

    std::vector<SplitRef> debias = {{"hard", &mined.hard}, {"lls", &mined.lls}};
    if (!splits.overlap_train.empty()) debias.push_back({"overlap_train", &splits.overlap_train});
    std::vector<SplitRef> eval_splits = {{"in_domain", &splits.test}};
    for (const auto& [name, data] : splits.challenges) {
        eval_splits.push_back({"challenge_" + name, &data});
    }

    std::cout << "training strategy: " << strategy_name(train_config.strategy) << "\n";
    RunReport report = train(model, splits.train, debias, eval_splits, train_config);
    save_model(model, (checkpoint_dir / "final.ckpt").string());
    save_model(probe, (checkpoint_dir / "probe.ckpt").string());

    write_text((fs::path(config.out_dir) / "report.json").string(),
               report_json(report).dump(2) + "\n");
    nlohmann::json timing;
    timing["train_seconds"] = report.wall_seconds;
    write_text((fs::path(config.out_dir) / "timing.json").string(), timing.dump(2) + "\n");

    if (!report.phase1_accuracy.empty()) {
        print_accuracies("accuracy after backbone phase:", report.phase1_accuracy);
    }
    print_accuracies("final accuracy:", report.split_accuracy);
    std::cout << "trainable parameters: " << report.trainable_params << " / "
              << report.total_params << "\n";
    std::cout << "checkpoints: " << checkpoint_dir.string() << "\n";
}

void cmd_eval(const ExperimentConfig& config, const std::string& checkpoint,
              std::vector<std::string> split_names) {
    Model model = load_model(checkpoint);
    SplitSet splits = gen_splits(config);

    std::vector<std::pair<std::string, const Dataset*>> named = {{"train", &splits.train},
                                                                 {"in_domain", &splits.test}};
    for (const auto& [name, data] : splits.challenges) {
        named.emplace_back("challenge_" + name, &data);
    }
    if (!splits.overlap_train.empty()) named.emplace_back("overlap_train", &splits.overlap_train);

    if (split_names.empty()) {
        for (const auto& [name, data] : named) {
            if (name != "train") split_names.push_back(name);
        }
    }
    nlohmann::json scores;
    std::map<std::string, double> printed;
    for (const std::string& name : split_names) {
        const Dataset* data = nullptr;
        for (const auto& [known, candidate] : named) {
            if (known == name) data = candidate;
        }
        if (!data) {
            std::string known;
            for (const auto& [k, d] : named) known += (known.empty() ? "" : ", ") + k;
            throw ConfigError("unknown split '" + name + "'; available: " + known);
        }
        double accuracy = evaluate(model, *data, config.train.eval_batch_size);
        scores[name] = accuracy;
        printed[name] = accuracy;
    }
    print_accuracies("accuracy of " + checkpoint + ":", printed);

    nlohmann::json out;
    out["checkpoint"] = checkpoint;
    out["config_hash"] = config_digest(config);
    out["accuracy"] = scores;
    fs::create_directories(config.out_dir);
    write_text((fs::path(config.out_dir) / "eval.json").string(), out.dump(2) + "\n");
}

void cmd_routing(const ExperimentConfig& config, const std::string& checkpoint) {
    Model model = load_model(checkpoint);
    TaskSpec task = experiment_task(config);
    RoutingAnalysis analysis = analyze_routing(model, task, config);

    fs::path dir = fs::path(config.out_dir) / "routing";
    fs::create_directories(dir);
    for (const RoutingTrace& trace : analysis.traces) {
        std::string stem = trace.subset;
        std::replace(stem.begin(), stem.end(), '#', '_');
        write_text((dir / (stem + ".json")).string(), trace_json(trace).dump(2) + "\n");
    }

    std::ostringstream dist_csv;
    dist_csv << std::setprecision(17) << "subset";
    for (size_t i = 0; i < model.expert.n_adapters; ++i) dist_csv << ",adapter_" << i;
    dist_csv << "\n";
    for (const auto& [key, dist] : analysis.distributions) {
        dist_csv << key;
        for (double v : dist) dist_csv << "," << v;
        dist_csv << "\n";
    }
    write_text((dir / "distributions.csv").string(), dist_csv.str());

    std::ostringstream corr_csv;
    corr_csv << std::setprecision(17) << "subset";
    for (const auto& [key, row] : analysis.correlation) corr_csv << "," << key;
    corr_csv << "\n";
    for (const auto& [key, row] : analysis.correlation) {
        corr_csv << key;
        for (const auto& [other, r] : row) corr_csv << "," << r;
        corr_csv << "\n";
    }
    write_text((dir / "correlation.csv").string(), corr_csv.str());

    std::cout << "routing subsets: " << analysis.distributions.size() << "\n";
    std::cout << "within-family mean correlation: " << analysis.within_family_mean << "\n";
    std::cout << "cross-family mean correlation:  " << analysis.cross_family_mean << "\n";
    std::cout << "artifacts: " << dir.string() << "\n";
}

void cmd_params(const ExperimentConfig& config, const std::string& checkpoint, bool timed,
                size_t reps) {
    Model model = [&] {
        if (!checkpoint.empty()) return load_model(checkpoint);
        Rng rng(derive_seed(config.seed, "model"));
        Model fresh = build_backbone(config.backbone, rng);
        size_t n_debias = 2;  // probe-hard + label-statistics splits
        for (const BiasSpec& bias : config.biases) {
            if (bias.family == BiasFamily::overlap && config.overlap_train_size > 0) n_debias = 3;
        }
        ExpertConfig expert = resolve_expert_config(config.train.expert, n_debias);
        Rng smoa_rng(derive_seed(derive_seed(config.seed, "train"), "smoa"));
        insert_smoa(fresh, expert, smoa_rng);
        if (config.train.strategy == Strategy::two_stage) {
            freeze_backbone(fresh, config.train.train_head_in_phase2);
        }
        return fresh;
    }();

    nlohmann::json j;
    if (timed) {
        TaskSpec task = experiment_task(config);
        size_t rows = std::max<size_t>(config.train.batch_size, 1);
        Dataset sample =
            gen_dataset(task, config.biases, rows, derive_seed(config.seed, "params:probe"));
        Batch batch = make_batch(sample, 0, sample.size());
        j = param_report_json(param_report_timed(model, batch, reps));
    } else {
        j = param_report_json(param_report(model));
    }
    std::cout << j.dump(2) << "\n";
    fs::create_directories(config.out_dir);
    write_text((fs::path(config.out_dir) / "params.json").string(), j.dump(2) + "\n");
}

void cmd_repro(const ExperimentConfig& config) {
    std::cout << "running the full pipeline into " << config.out_dir << "\n";
    ReproResult result = run_repro(config);
    std::cout << "config hash: " << result.config_hash << "\n";
    if (!result.report.phase1_accuracy.empty()) {
        print_accuracies("accuracy after backbone phase:", result.report.phase1_accuracy);
    }
    print_accuracies("final accuracy:", result.report.split_accuracy);
    std::cout << "routing correlation (within / cross family): "
              << result.routing.within_family_mean << " / " << result.routing.cross_family_mean
              << "\n";
    std::cout << "trainable parameters: " << result.params.trainable << " / "
              << result.params.total << "\n";
    std::cout << "total wall time: " << std::fixed << std::setprecision(1)
              << result.total_seconds << "s\n";
    std::cout << "metrics: " << (fs::path(config.out_dir) / "metrics.json").string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sparse adapter-mixture debiasing laboratory"};
    app.require_subcommand(1);

    CLI::App* gen_cmd = app.add_subcommand("gen-data", "synthesize dataset splits + manifest");
    CommonArgs gen_args;
    attach_common(gen_cmd, gen_args);

    CLI::App* train_cmd =
        app.add_subcommand("train", "run the configured training strategy end to end");
    CommonArgs train_args;
    attach_common(train_cmd, train_args);

    CLI::App* eval_cmd = app.add_subcommand("eval", "score a checkpoint on named splits");
    CommonArgs eval_args;
    attach_common(eval_cmd, eval_args);
    std::string eval_checkpoint;
    eval_cmd->add_option("--checkpoint", eval_checkpoint, "model checkpoint to score")
        ->required();
    std::vector<std::string> eval_split_names;
    eval_cmd
        ->add_option("--splits", eval_split_names,
                     "split names (train, in_domain, challenge_<family>, overlap_train); "
                     "default: in_domain + challenges")
        ->delimiter(',');

    CLI::App* routing_cmd = app.add_subcommand(
        "routing", "record adapter routing distributions and their correlation matrix");
    CommonArgs routing_args;
    attach_common(routing_cmd, routing_args);
    std::string routing_checkpoint;
    routing_cmd
        ->add_option("--checkpoint", routing_checkpoint,
                     "trained checkpoint with adapter mixtures")
        ->required();

    CLI::App* params_cmd =
        app.add_subcommand("params", "parameter counts by namespace and trainable ratio");
    CommonArgs params_args;
    attach_common(params_cmd, params_args);
    std::string params_checkpoint;
    params_cmd->add_option("--checkpoint", params_checkpoint,
                           "report on this checkpoint instead of a fresh build");
    bool params_timed = false;
    params_cmd->add_flag("--timed", params_timed,
                         "also measure mean forward time with and without mixtures");
    size_t params_reps = 100;
    params_cmd->add_option("--reps", params_reps, "timing repetitions (default 100)");

    CLI::App* repro_cmd = app.add_subcommand(
        "repro", "full pipeline: generate, probe, filter, train, analyze, report");
    CommonArgs repro_args;
    attach_common(repro_cmd, repro_args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
        app.exit(e);
        return 2;
    }

    try {
        if (gen_cmd->parsed()) {
            cmd_gen_data(load_config(gen_args));
        } else if (train_cmd->parsed()) {
            cmd_train(load_config(train_args));
        } else if (eval_cmd->parsed()) {
            cmd_eval(load_config(eval_args), eval_checkpoint, eval_split_names);
        } else if (routing_cmd->parsed()) {
            cmd_routing(load_config(routing_args), routing_checkpoint);
        } else if (params_cmd->parsed()) {
            cmd_params(load_config(params_args), params_checkpoint, params_timed, params_reps);
        } else if (repro_cmd->parsed()) {
            cmd_repro(load_config(repro_args));
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ParseError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
