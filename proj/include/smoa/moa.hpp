#pragma once

// Sparse mixture of bottleneck adapters. Each mixture layer scores its
// input rows against a gate matrix, keeps the top-k scores per row,
// softmaxes over the survivors (non-selected entries contribute exactly
// zero weight), and adds the weighted adapter outputs back onto the input.
// Rows are physically routed: an adapter only computes on the rows that
// selected it.

#include "smoa/rng.hpp"
#include "smoa/tensor.hpp"

#include <cstddef>
#include <string>
#include <vector>

namespace smoa {

struct BackboneConfig;
struct Model;

struct ExpertConfig {
    size_t n_adapters = 0;  // 0 = no mixture layers present
    size_t top_k = 0;
    size_t d_bottleneck = 0;
};

// Mixture sizing rule: a task family with m bias variants gets 2m-1
// adapters, routed top-k with k = min(2, n).
ExpertConfig default_expert_config(size_t n_bias_families, size_t d_bottleneck);

struct GateOutput {
    Tensor weights;                           // [rows, n]; zero at unselected
    std::vector<std::vector<size_t>> routed;  // routed[i] = rows sent to adapter i
};

// weights = softmax over the per-row top-k gate scores x*wg; ties between
// equal scores resolve toward the lower adapter index.
GateOutput gate_forward(const Tensor& x, const Tensor& wg, size_t k);

// One bottleneck adapter: gelu(x*wd + bd)*wu + bu.
Tensor sub_adapter_forward(const Tensor& x, const Tensor& wd, const Tensor& bd,
                           const Tensor& wu, const Tensor& bu);

struct SMoALayerParams {
    Tensor gate;  // [d_model, n]
    struct Adapter {
        Tensor wd, bd, wu, bu;
    };
    std::vector<Adapter> adapters;
};

// y = x + sum_i gate_weight_i * adapter_i(x), computed sparsely per row.
// When capture is given it receives the gate decision for the layer.
Tensor smoa_forward(const Tensor& x, const SMoALayerParams& params, size_t k,
                    GateOutput* capture = nullptr);

// Receives each mixture layer's gate decision during a forward pass.
// Mixture layers are numbered 2*block (after attention) and 2*block + 1
// (after the feed-forward sublayer).
struct GateObserver {
    virtual ~GateObserver() = default;
    virtual void on_gate(size_t mixture_layer, const GateOutput& gate) = 0;
};

// Adds mixture layers after every attention and feed-forward sublayer of
// the model (2 per encoder block). Up-projections start at zero, so the
// freshly inserted mixture is an exact identity.
void insert_smoa(Model& model, const ExpertConfig& config, Rng& rng);

// Collects the mixture parameters of one sublayer from the model's store;
// site is "attn" or "ffn".
SMoALayerParams smoa_layer_params(const Model& model, size_t layer, const std::string& site);

// Closed-form count of mixture parameters added by insert_smoa.
size_t smoa_param_count(size_t d_model, size_t n_layers, size_t n_adapters, size_t d_bottleneck);

}  // namespace smoa
