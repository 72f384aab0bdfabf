#include "smoa/moa.hpp"

#include "smoa/encoder.hpp"
#include "smoa/error.hpp"

#include <cmath>
#include <limits>

namespace smoa {

ExpertConfig default_expert_config(size_t n_bias_families, size_t d_bottleneck) {
    if (n_bias_families < 1) throw ConfigError("need at least one bias family");
    if (d_bottleneck < 1) throw ConfigError("bottleneck width must be positive");
    ExpertConfig cfg;
    cfg.n_adapters = 2 * n_bias_families - 1;
    cfg.top_k = std::min<size_t>(2, cfg.n_adapters);
    cfg.d_bottleneck = d_bottleneck;
    return cfg;
}

GateOutput gate_forward(const Tensor& x, const Tensor& wg, size_t k) {
    if (x.ndim() != 2 || wg.ndim() != 2 || x.shape()[1] != wg.shape()[0]) {
        throw ShapeError("gate_forward shapes: " + shape_str(x.shape()) + " x " +
                         shape_str(wg.shape()));
    }
    size_t n = wg.shape()[1];
    if (k < 1 || k > n) {
        throw ContractError("gate top_k=" + std::to_string(k) + " out of range for n=" +
                            std::to_string(n));
    }
    Tensor scores = matmul(x, wg);
    Tensor masked = top_k_mask_rows(scores, k);
    GateOutput out;
    out.weights = softmax(masked, -1);
    out.routed.assign(n, {});
    size_t rows = x.shape()[0];
    const auto& mv = masked.values();
    for (size_t r = 0; r < rows; ++r) {
        for (size_t i = 0; i < n; ++i) {
            if (mv[r * n + i] != -std::numeric_limits<double>::infinity()) {
                out.routed[i].push_back(r);
            }
        }
    }
    return out;
}

Tensor sub_adapter_forward(const Tensor& x, const Tensor& wd, const Tensor& bd,
                           const Tensor& wu, const Tensor& bu) {
    return add_bias(matmul(gelu(add_bias(matmul(x, wd), bd)), wu), bu);
}

Tensor smoa_forward(const Tensor& x, const SMoALayerParams& params, size_t k,
                    GateOutput* capture) {
    if (params.adapters.empty()) throw ContractError("mixture layer with no adapters");
    GateOutput gate = gate_forward(x, params.gate, k);
    if (capture) *capture = gate;
    size_t rows = x.shape()[0];
    Tensor out = x;
    for (size_t i = 0; i < params.adapters.size(); ++i) {
        const auto& rows_i = gate.routed[i];
        if (rows_i.empty()) continue;  // adapter computes nothing this step
        const auto& a = params.adapters[i];
        Tensor sub = gather_rows(x, rows_i);
        Tensor mapped = sub_adapter_forward(sub, a.wd, a.bd, a.wu, a.bu);
        Tensor w = take_entries(gate.weights, rows_i, i);
        out = add(out, scatter_rows(mul_rows(mapped, w), rows_i, rows));
    }
    return out;
}

namespace {

std::string smoa_prefix(size_t layer, const std::string& site) {
    return "smoa.L" + std::to_string(layer) + "." + site + ".";
}

}  // namespace

void insert_smoa(Model& model, const ExpertConfig& config, Rng& rng) {
    if (model.expert.n_adapters != 0) {
        throw ContractError("model already carries mixture layers");
    }
    if (config.n_adapters < 1 || config.d_bottleneck < 1) {
        throw ConfigError("mixture config needs n_adapters >= 1 and d_bottleneck >= 1");
    }
    if (config.top_k < 1 || config.top_k > config.n_adapters) {
        throw ConfigError("mixture top_k must lie in [1, n_adapters]");
    }
    size_t d = model.config.d_model, db = config.d_bottleneck;
    for (size_t layer = 0; layer < model.config.n_layers; ++layer) {
        for (const char* site : {"attn", "ffn"}) {
            std::string prefix = smoa_prefix(layer, site);
            model.params.add(prefix + "gate",
                             Tensor::randn({d, config.n_adapters}, rng, 0.02, true));
            for (size_t j = 0; j < config.n_adapters; ++j) {
                std::string ap = prefix + "adapter" + std::to_string(j) + ".";
                model.params.add(ap + "wd", Tensor::randn({d, db}, rng, 0.02, true));
                model.params.add(ap + "bd", Tensor::zeros({db}, true));
                // zero up-projection keeps the freshly inserted mixture an
                // exact identity on the hidden states
                model.params.add(ap + "wu", Tensor::zeros({db, d}, true));
                model.params.add(ap + "bu", Tensor::zeros({d}, true));
            }
        }
    }
    model.expert = config;
}

SMoALayerParams smoa_layer_params(const Model& model, size_t layer, const std::string& site) {
    if (model.expert.n_adapters == 0) throw ContractError("model has no mixture layers");
    std::string prefix = smoa_prefix(layer, site);
    SMoALayerParams p;
    p.gate = model.params.get(prefix + "gate");
    for (size_t j = 0; j < model.expert.n_adapters; ++j) {
        std::string ap = prefix + "adapter" + std::to_string(j) + ".";
        p.adapters.push_back({model.params.get(ap + "wd"), model.params.get(ap + "bd"),
                              model.params.get(ap + "wu"), model.params.get(ap + "bu")});
    }
    return p;
}

size_t smoa_param_count(size_t d_model, size_t n_layers, size_t n_adapters, size_t d_bottleneck) {
    size_t per_adapter = 2 * d_model * d_bottleneck + d_bottleneck + d_model;
    size_t per_layer = n_adapters * per_adapter + d_model * n_adapters;
    return 2 * n_layers * per_layer;
}

}  // namespace smoa
