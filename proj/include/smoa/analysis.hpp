#pragma once

// Routing and parameter diagnostics: which adapters a dataset's tokens are
// routed to, how similar routing is across datasets, and where the model's
// parameters live.

#include "smoa/data.hpp"
#include "smoa/train.hpp"

#include <map>
#include <string>
#include <vector>

#include "json.hpp"

namespace smoa {

// Aggregated gate decisions of one mixture layer over one dataset. Only
// real (non-pad) tokens are counted.
struct RoutingRecord {
    size_t mixture_layer = 0;         // 2*block + (0 attention | 1 feed-forward)
    std::vector<size_t> counts;       // tokens routed to each adapter
    std::vector<double> weight_mass;  // summed gate weight per adapter
    size_t tokens = 0;                // real tokens observed
};

struct RoutingTrace {
    std::string subset;
    size_t n_adapters = 0;
    std::vector<RoutingRecord> records;  // one per mixture layer, in order
};

// Runs the model over the dataset and aggregates every mixture layer's
// gate decisions. Requires mixtures to be present.
RoutingTrace record_routing(const Model& model, const Dataset& data, const std::string& subset,
                            size_t batch_size = 128);

// Per-adapter routing distribution of one mixture layer, normalized to sum
// to 1. Uniform counting by default; `weighted` weighs tokens by their
// gate weight instead.
std::vector<double> routing_distribution(const RoutingTrace& trace, size_t mixture_layer,
                                         bool weighted = false);

// Element-wise sum of two traces over the same model (for pooling subset
// halves).
RoutingTrace merge_traces(const RoutingTrace& a, const RoutingTrace& b);

nlohmann::json trace_json(const RoutingTrace& trace);

// Sample Pearson correlation. Degenerate inputs (fewer than two points,
// zero variance) are an error rather than a silent NaN.
double pearson_corr(const std::vector<double>& x, const std::vector<double>& y);

struct ParamReport {
    size_t total = 0;
    size_t trainable = 0;
    double trainable_ratio = 0.0;
    std::map<std::string, size_t> by_namespace;  // first dotted path component
};

ParamReport param_report(const Model& model);

struct TimedParamReport : ParamReport {
    double forward_ms_with_mixtures = 0.0;
    double forward_ms_without = 0.0;
    size_t reps = 0;
};

// Adds wall-clock forward timing averaged over `reps` batches, with the
// mixture layers active and bypassed. The model is restored afterwards;
// requires mixtures to be present.
TimedParamReport param_report_timed(Model& model, const Batch& probe, size_t reps = 100);

nlohmann::json param_report_json(const ParamReport& report);
nlohmann::json param_report_json(const TimedParamReport& report);

}  // namespace smoa
