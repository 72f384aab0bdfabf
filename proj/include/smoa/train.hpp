#pragma once

// Debiasing training loop: a backbone is first fitted to the biased basic
// split, then frozen while sparse adapter mixtures absorb one or more
// debiasing splits under a joint multi-dataset objective. A one-stage
// variant trains everything together for comparison.

#include "smoa/checkpoint.hpp"
#include "smoa/data.hpp"
#include "smoa/moa.hpp"

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

namespace smoa {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// Decoupled weight decay Adam. Tensors share storage with the model, so
// stepping the optimizer updates the model in place. Tensors whose
// requires_grad was cleared after registration, or which received no
// gradient, are left untouched (their moments do not advance either).
class AdamW {
  public:
    explicit AdamW(std::vector<Tensor> params, AdamWConfig config = {});
    void step(double lr);
    void zero_grad();
    size_t steps() const { return t_; }

  private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    AdamWConfig cfg_;
    size_t t_ = 0;
};

// base_lr * (1 - step/total_steps); steps past the schedule end clamp to 0
// with a one-time warning on stderr.
double linear_lr(size_t step, size_t total_steps, double base_lr);

// Marks backbone (and, unless train_head, head) parameters non-trainable.
// Requires adapter mixtures to be present — a frozen model without them
// has nothing left to learn with.
size_t freeze_backbone(Model& model, bool train_head = false);

// A requested config with n_adapters == 0 resolves to the 2m-1 adapters /
// top-min(2, n) default for m debiasing splits; a nonzero bottleneck width
// is honored, otherwise it defaults to 16.
ExpertConfig resolve_expert_config(ExpertConfig requested, size_t n_debias_splits);

// Sum of per-dataset cross-entropies, one forward per batch. Per-term
// values are reported through `terms` when given.
Tensor multi_bias_loss(const Model& model, const std::vector<Batch>& batches,
                       std::vector<double>* terms = nullptr);

enum class Strategy { two_stage, one_stage };

std::string strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);

struct TrainConfig {
    double learning_rate = 3e-4;
    size_t epochs = 5;  // adapter phase (or the single joint phase)
    size_t batch_size = 64;
    AdamWConfig optimizer;
    Strategy strategy = Strategy::two_stage;
    size_t phase1_epochs = 2;  // backbone fit before freezing (two-stage only)
    double phase1_learning_rate = 3e-4;
    bool train_head_in_phase2 = false;
    // n_adapters == 0 picks the 2m-1 / top-min(2, n) default for the m
    // debiasing splits that are passed in
    ExpertConfig expert;
    size_t eval_batch_size = 128;
    uint64_t seed = 1;
    std::string checkpoint_dir;  // empty: no checkpoints written
};

struct SplitRef {
    std::string name;
    const Dataset* data = nullptr;
};

struct RunReport {
    Strategy strategy = Strategy::two_stage;
    std::vector<double> phase1_losses;  // mean loss per backbone epoch
    // mean loss per adapter epoch, per debiasing split name
    std::vector<std::map<std::string, double>> epoch_losses;
    std::map<std::string, double> phase1_accuracy;  // eval splits after phase 1
    std::map<std::string, double> split_accuracy;   // eval splits at the end
    size_t total_params = 0;
    size_t trainable_params = 0;  // during the adapter phase
    double trainable_ratio = 0.0;
    std::string backbone_digest_before;  // around the adapter phase
    std::string backbone_digest_after;
    bool head_trained = false;
    double wall_seconds = 0.0;
};

// Runs the full strategy on `model` (a freshly built backbone): two-stage
// fits the backbone on `basic`, inserts mixtures, freezes, then trains on
// the debiasing splits; one-stage inserts mixtures up front and trains
// everything on basic + debiasing splits jointly.
RunReport train(Model& model, const Dataset& basic, const std::vector<SplitRef>& debias,
                const std::vector<SplitRef>& eval_splits, const TrainConfig& config);

// Argmax predictions, lowest index winning ties.
std::vector<int> predict_labels(const Model& model, const Batch& batch);

double evaluate(const Model& model, const Dataset& data, size_t batch_size = 128);
// Same scoring under an arbitrary predictor (for stubbed tests).
double evaluate(const Dataset& data,
                const std::function<std::vector<int>(const Batch&)>& predict,
                size_t batch_size = 128);

// Timing is excluded by default so metric files stay byte-identical
// across repeated runs.
nlohmann::json report_json(const RunReport& report, bool include_timing = false);

}  // namespace smoa
