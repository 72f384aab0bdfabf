#include "smoa/analysis.hpp"

#include <chrono>
#include <cmath>

namespace smoa {

namespace {

// accumulates gate decisions for every mixture layer, skipping pad rows
class RoutingAccumulator : public GateObserver {
  public:
    RoutingAccumulator(RoutingTrace& trace, size_t n_layers, size_t n_adapters)
        : trace_(trace) {
        trace_.records.resize(n_layers);
        for (size_t l = 0; l < n_layers; ++l) {
            trace_.records[l].mixture_layer = l;
            trace_.records[l].counts.assign(n_adapters, 0);
            trace_.records[l].weight_mass.assign(n_adapters, 0.0);
        }
    }

    void set_batch(const Batch* batch) { batch_ = batch; }

    void on_gate(size_t mixture_layer, const GateOutput& gate) override {
        RoutingRecord& rec = trace_.records.at(mixture_layer);
        size_t n = rec.counts.size();
        const auto& w = gate.weights.values();
        for (size_t i = 0; i < n; ++i) {
            for (size_t row : gate.routed[i]) {
                if (!batch_->mask[row]) continue;
                rec.counts[i] += 1;
                rec.weight_mass[i] += w[row * n + i];
            }
        }
        for (size_t row = 0; row < batch_->mask.size(); ++row) rec.tokens += batch_->mask[row];
    }

  private:
    RoutingTrace& trace_;
    const Batch* batch_ = nullptr;
};

}  // namespace

RoutingTrace record_routing(const Model& model, const Dataset& data, const std::string& subset,
                            size_t batch_size) {
    if (model.expert.n_adapters == 0) {
        throw ContractError("routing analysis needs mixture layers in the model");
    }
    if (data.empty()) throw InputError("routing analysis on an empty dataset");
    if (batch_size == 0) throw ConfigError("batch size must be positive");

    RoutingTrace trace;
    trace.subset = subset;
    trace.n_adapters = model.expert.n_adapters;
    RoutingAccumulator acc(trace, 2 * model.config.n_layers, model.expert.n_adapters);

    NoGradGuard guard;
    for (size_t from = 0; from < data.size(); from += batch_size) {
        size_t count = std::min(batch_size, data.size() - from);
        Batch batch = make_batch(data, from, count);
        acc.set_batch(&batch);
        forward(model, batch, &acc);
    }
    return trace;
}

std::vector<double> routing_distribution(const RoutingTrace& trace, size_t mixture_layer,
                                         bool weighted) {
    if (mixture_layer >= trace.records.size()) {
        throw IndexError("mixture layer " + std::to_string(mixture_layer) + " out of range");
    }
    const RoutingRecord& rec = trace.records[mixture_layer];
    if (rec.tokens == 0) throw ContractError("routing record holds no tokens");
    std::vector<double> out(trace.n_adapters, 0.0);
    double total = 0.0;
    for (size_t i = 0; i < trace.n_adapters; ++i) {
        out[i] = weighted ? rec.weight_mass[i] : static_cast<double>(rec.counts[i]);
        total += out[i];
    }
    for (double& v : out) v /= total;
    return out;
}

RoutingTrace merge_traces(const RoutingTrace& a, const RoutingTrace& b) {
    if (a.n_adapters != b.n_adapters || a.records.size() != b.records.size()) {
        throw ContractError("traces come from different models");
    }
    RoutingTrace out = a;
    out.subset = a.subset + "+" + b.subset;
    for (size_t l = 0; l < out.records.size(); ++l) {
        RoutingRecord& rec = out.records[l];
        const RoutingRecord& add = b.records[l];
        for (size_t i = 0; i < rec.counts.size(); ++i) {
            rec.counts[i] += add.counts[i];
            rec.weight_mass[i] += add.weight_mass[i];
        }
        rec.tokens += add.tokens;
    }
    return out;
}

nlohmann::json trace_json(const RoutingTrace& trace) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& rec : trace.records) {
        layers.push_back({{"mixture_layer", rec.mixture_layer},
                          {"counts", rec.counts},
                          {"weight_mass", rec.weight_mass},
                          {"tokens", rec.tokens}});
    }
    return {{"subset", trace.subset}, {"n_adapters", trace.n_adapters}, {"layers", layers}};
}

double pearson_corr(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw InputError("correlation inputs differ in length");
    if (x.size() < 2) throw InputError("correlation needs at least two points");
    double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) {
        throw InputError("correlation is undefined for a constant input");
    }
    return sxy / std::sqrt(sxx * syy);
}

ParamReport param_report(const Model& model) {
    ParamReport report;
    report.total = model.params.total_count();
    report.trainable = model.params.trainable_count();
    report.trainable_ratio =
        report.total ? static_cast<double>(report.trainable) / static_cast<double>(report.total)
                     : 0.0;
    for (const auto& name : model.params.names()) {
        std::string ns = name.substr(0, name.find('.'));
        report.by_namespace[ns] += model.params.get(name).size();
    }
    return report;
}

TimedParamReport param_report_timed(Model& model, const Batch& probe, size_t reps) {
    if (model.expert.n_adapters == 0) {
        throw ContractError("timed report compares mixture layers on and off; insert them first");
    }
    if (reps == 0) throw ConfigError("timing needs at least one repetition");

    TimedParamReport report;
    static_cast<ParamReport&>(report) = param_report(model);
    report.reps = reps;

    NoGradGuard guard;
    auto time_forwards = [&]() {
        forward(model, probe);  // warm-up outside the clock
        auto t0 = std::chrono::steady_clock::now();
        for (size_t r = 0; r < reps; ++r) forward(model, probe);
        auto t1 = std::chrono::steady_clock::now();
        return std::chrono::duration<double, std::milli>(t1 - t0).count() /
               static_cast<double>(reps);
    };

    report.forward_ms_with_mixtures = time_forwards();
    size_t saved = model.expert.n_adapters;
    model.expert.n_adapters = 0;  // forward() bypasses mixture layers
    report.forward_ms_without = time_forwards();
    model.expert.n_adapters = saved;
    return report;
}

nlohmann::json param_report_json(const ParamReport& report) {
    return {{"total", report.total},
            {"trainable", report.trainable},
            {"trainable_ratio", report.trainable_ratio},
            {"by_namespace", report.by_namespace}};
}

nlohmann::json param_report_json(const TimedParamReport& report) {
    nlohmann::json j = param_report_json(static_cast<const ParamReport&>(report));
    j["forward_ms_with_mixtures"] = report.forward_ms_with_mixtures;
    j["forward_ms_without"] = report.forward_ms_without;
    j["timing_reps"] = report.reps;
    return j;
}

}  // namespace smoa
