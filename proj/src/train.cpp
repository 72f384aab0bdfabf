#include "smoa/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <numeric>

namespace smoa {

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig config)
    : params_(std::move(params)), cfg_(config) {
    if (params_.empty()) throw ContractError("optimizer needs at least one parameter");
    if (cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0) {
        throw ConfigError("optimizer betas must lie in [0, 1)");
    }
    if (cfg_.eps <= 0.0 || cfg_.weight_decay < 0.0) {
        throw ConfigError("optimizer eps must be positive and weight decay non-negative");
    }
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
        m_[i].assign(params_[i].size(), 0.0);
        v_[i].assign(params_[i].size(), 0.0);
    }
}

void AdamW::step(double lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        if (!p.requires_grad() || !p.has_grad()) continue;
        const auto& g = p.grad();
        auto& vals = p.values();
        auto& m = m_[i];
        auto& v = v_[i];
        for (size_t j = 0; j < vals.size(); ++j) {
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
            double mhat = m[j] / bc1;
            double vhat = v[j] / bc2;
            vals[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * vals[j]);
        }
    }
}

void AdamW::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

double linear_lr(size_t step, size_t total_steps, double base_lr) {
    if (total_steps == 0) throw ConfigError("schedule needs at least one step");
    if (step > total_steps) {
        static std::atomic<bool> warned{false};
        if (!warned.exchange(true)) {
            std::cerr << "warning: learning-rate schedule exhausted (step " << step << " of "
                      << total_steps << "); continuing at 0\n";
        }
        return 0.0;
    }
    double frac = static_cast<double>(step) / static_cast<double>(total_steps);
    return base_lr * (1.0 - frac);
}

size_t freeze_backbone(Model& model, bool train_head) {
    if (model.expert.n_adapters == 0) {
        throw ContractError(
            "freeze_backbone called before adapter mixtures were inserted; a frozen model "
            "without them has no trainable path");
    }
    size_t touched = model.params.set_trainable("backbone.", false);
    if (!train_head) touched += model.params.set_trainable("head.", false);
    return touched;
}

ExpertConfig resolve_expert_config(ExpertConfig requested, size_t n_debias_splits) {
    if (requested.n_adapters != 0) return requested;
    return default_expert_config(std::max<size_t>(n_debias_splits, 1),
                                 requested.d_bottleneck ? requested.d_bottleneck : 16);
}

Tensor multi_bias_loss(const Model& model, const std::vector<Batch>& batches,
                       std::vector<double>* terms) {
    if (batches.empty()) throw ContractError("joint loss needs at least one dataset batch");
    if (terms) terms->clear();
    Tensor total;
    for (const auto& batch : batches) {
        Tensor term = cross_entropy(forward(model, batch), batch.labels);
        if (terms) terms->push_back(term.item());
        total = total.defined() ? add(total, term) : term;
    }
    return total;
}

std::string strategy_name(Strategy s) {
    return s == Strategy::two_stage ? "two_stage" : "one_stage";
}

Strategy strategy_from_name(const std::string& name) {
    if (name == "two_stage") return Strategy::two_stage;
    if (name == "one_stage") return Strategy::one_stage;
    throw ConfigError("unknown strategy: " + name);
}

std::vector<int> predict_labels(const Model& model, const Batch& batch) {
    NoGradGuard guard;
    Tensor logits = forward(model, batch);
    size_t C = logits.shape()[1];
    std::vector<int> out(batch.rows);
    for (size_t r = 0; r < batch.rows; ++r) {
        size_t best = 0;
        for (size_t c = 1; c < C; ++c) {
            if (logits.values()[r * C + c] > logits.values()[r * C + best]) best = c;
        }
        out[r] = static_cast<int>(best);
    }
    return out;
}

double evaluate(const Dataset& data,
                const std::function<std::vector<int>(const Batch&)>& predict,
                size_t batch_size) {
    if (data.empty()) throw InputError("evaluate on an empty dataset");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    size_t correct = 0;
    for (size_t from = 0; from < data.size(); from += batch_size) {
        size_t count = std::min(batch_size, data.size() - from);
        Batch batch = make_batch(data, from, count);
        std::vector<int> pred = predict(batch);
        if (pred.size() != count) throw ContractError("predictor returned a wrong-sized batch");
        for (size_t r = 0; r < count; ++r) correct += pred[r] == batch.labels[r];
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

double evaluate(const Model& model, const Dataset& data, size_t batch_size) {
    return evaluate(
        data, [&](const Batch& b) { return predict_labels(model, b); }, batch_size);
}

namespace {

// endless shuffled batches over one dataset; tails are dropped and the
// order is reshuffled on wrap-around
class BatchStream {
  public:
    BatchStream(const std::string& name, const Dataset& data, size_t batch_size, uint64_t seed)
        : data_(&data), batch_size_(batch_size), rng_(seed) {
        if (data.size() < batch_size) {
            throw ConfigError("dataset '" + name + "' is smaller than one batch (" +
                              std::to_string(data.size()) + " < " +
                              std::to_string(batch_size) + ")");
        }
        order_.resize(data.size());
        std::iota(order_.begin(), order_.end(), size_t{0});
        rng_.shuffle(order_);
    }

    Batch next() {
        if (cursor_ + batch_size_ > order_.size()) {
            rng_.shuffle(order_);
            cursor_ = 0;
        }
        std::vector<size_t> idx(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + batch_size_));
        cursor_ += batch_size_;
        return make_batch(*data_, idx);
    }

  private:
    const Dataset* data_;
    size_t batch_size_;
    Rng rng_;
    std::vector<size_t> order_;
    size_t cursor_ = 0;
};

std::map<std::string, double> eval_all(const Model& model, const std::vector<SplitRef>& splits,
                                       size_t batch_size) {
    std::map<std::string, double> out;
    for (const auto& split : splits) {
        if (!split.data) throw ContractError("evaluation split '" + split.name + "' is null");
        out[split.name] = evaluate(model, *split.data, batch_size);
    }
    return out;
}

void maybe_checkpoint(const Model& model, const std::string& dir, const std::string& file) {
    if (dir.empty()) return;
    std::filesystem::create_directories(dir);
    save_model(model, (std::filesystem::path(dir) / file).string());
}

}  // namespace

RunReport train(Model& model, const Dataset& basic, const std::vector<SplitRef>& debias,
                const std::vector<SplitRef>& eval_splits, const TrainConfig& config) {
    if (basic.empty()) throw InputError("basic training split is empty");
    if (config.batch_size == 0) throw ConfigError("batch size must be positive");
    if (config.strategy == Strategy::two_stage && debias.empty()) {
        throw ConfigError("two-stage training needs at least one debiasing split");
    }
    for (const auto& split : debias) {
        if (!split.data || split.data->empty()) {
            throw InputError("debiasing split '" + split.name + "' is empty");
        }
    }

    auto t0 = std::chrono::steady_clock::now();
    RunReport report;
    report.strategy = config.strategy;

    // ---- phase 1: fit the backbone on the biased basic split ------------
    if (config.strategy == Strategy::two_stage && config.phase1_epochs > 0) {
        BatchStream stream("basic", basic, config.batch_size,
                           derive_seed(config.seed, "phase1"));
        size_t steps_per_epoch = basic.size() / config.batch_size;
        size_t total = steps_per_epoch * config.phase1_epochs;
        AdamW opt(model.params.trainable(), config.optimizer);
        size_t gstep = 0;
        for (size_t epoch = 0; epoch < config.phase1_epochs; ++epoch) {
            double sum = 0.0;
            for (size_t s = 0; s < steps_per_epoch; ++s) {
                Batch batch = stream.next();
                Tensor loss = cross_entropy(forward(model, batch), batch.labels);
                sum += loss.item();
                backward(loss);
                opt.step(linear_lr(gstep++, total, config.phase1_learning_rate));
                opt.zero_grad();
            }
            report.phase1_losses.push_back(sum / static_cast<double>(steps_per_epoch));
        }
    }
    if (config.strategy == Strategy::two_stage) {
        report.phase1_accuracy = eval_all(model, eval_splits, config.eval_batch_size);
        maybe_checkpoint(model, config.checkpoint_dir, "phase1.ckpt");
    }

    // ---- insert mixtures and pick the trainable set ----------------------
    ExpertConfig expert = resolve_expert_config(config.expert, debias.size());
    Rng smoa_rng(derive_seed(config.seed, "smoa"));
    insert_smoa(model, expert, smoa_rng);

    report.head_trained = config.train_head_in_phase2;
    if (config.strategy == Strategy::two_stage) {
        freeze_backbone(model, config.train_head_in_phase2);
    }

    report.total_params = model.params.total_count();
    report.trainable_params = model.params.trainable_count();
    report.trainable_ratio =
        static_cast<double>(report.trainable_params) / static_cast<double>(report.total_params);
    report.backbone_digest_before = params_digest(model.params, "backbone.");

    // ---- adapter phase: joint loss over the debiasing splits ------------
    std::vector<std::pair<std::string, BatchStream>> streams;
    if (config.strategy == Strategy::one_stage) {
        streams.emplace_back("train", BatchStream("train", basic, config.batch_size,
                                                  derive_seed(config.seed, "joint:train")));
    }
    for (const auto& split : debias) {
        streams.emplace_back(split.name,
                             BatchStream(split.name, *split.data, config.batch_size,
                                         derive_seed(config.seed, "joint:" + split.name)));
    }

    size_t longest = config.strategy == Strategy::one_stage ? basic.size() : 0;
    for (const auto& split : debias) longest = std::max(longest, split.data->size());
    size_t steps_per_epoch = longest / config.batch_size;
    size_t total = steps_per_epoch * config.epochs;

    if (config.epochs > 0) {
        AdamW opt(model.params.trainable(), config.optimizer);
        size_t gstep = 0;
        std::vector<Batch> batches;
        std::vector<double> terms;
        for (size_t epoch = 0; epoch < config.epochs; ++epoch) {
            std::map<std::string, double> sums;
            for (size_t s = 0; s < steps_per_epoch; ++s) {
                batches.clear();
                for (auto& [name, stream] : streams) batches.push_back(stream.next());
                Tensor loss = multi_bias_loss(model, batches, &terms);
                for (size_t i = 0; i < streams.size(); ++i) {
                    sums[streams[i].first] += terms[i];
                }
                backward(loss);
                opt.step(linear_lr(gstep++, total, config.learning_rate));
                opt.zero_grad();
            }
            std::map<std::string, double> means;
            for (const auto& [name, sum] : sums) {
                means[name] = sum / static_cast<double>(steps_per_epoch);
            }
            report.epoch_losses.push_back(std::move(means));
        }
    }

    report.backbone_digest_after = params_digest(model.params, "backbone.");
    report.split_accuracy = eval_all(model, eval_splits, config.eval_batch_size);
    maybe_checkpoint(model, config.checkpoint_dir,
                     config.strategy == Strategy::two_stage ? "phase2.ckpt" : "final.ckpt");

    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

nlohmann::json report_json(const RunReport& report, bool include_timing) {
    nlohmann::json j;
    j["strategy"] = strategy_name(report.strategy);
    j["phase1_losses"] = report.phase1_losses;
    j["epoch_losses"] = report.epoch_losses;
    j["phase1_accuracy"] = report.phase1_accuracy;
    j["split_accuracy"] = report.split_accuracy;
    j["total_params"] = report.total_params;
    j["trainable_params"] = report.trainable_params;
    j["trainable_ratio"] = report.trainable_ratio;
    j["backbone_digest_before"] = report.backbone_digest_before;
    j["backbone_digest_after"] = report.backbone_digest_after;
    j["head_trained"] = report.head_trained;
    if (include_timing) j["wall_seconds"] = report.wall_seconds;
    return j;
}

}  // namespace smoa
