#pragma once

// Transformer encoder for sentence-pair classification: embeddings
// (token + position + segment), post-norm self-attention blocks, CLS pooling
// and a linear head. Optionally augmented in place with sparse adapter
// mixtures (see moa.hpp) after each attention and feed-forward sublayer.

#include "smoa/error.hpp"
#include "smoa/moa.hpp"
#include "smoa/rng.hpp"
#include "smoa/tensor.hpp"

#include <string>
#include <unordered_map>
#include <vector>

namespace smoa {

// Fixed special token ids shared by the tokenizer and the encoder.
constexpr int kPadId = 0;
constexpr int kClsId = 1;
constexpr int kSepId = 2;
constexpr int kMaskId = 3;

struct BackboneConfig {
    size_t vocab_size = 200;
    size_t max_len = 32;
    size_t n_segments = 2;
    size_t d_model = 64;
    size_t n_layers = 2;
    size_t n_heads = 4;
    size_t d_ff = 128;
    size_t n_classes = 3;
    double ln_eps = 1e-5;
};

// Named parameter registry. Iteration order is insertion order, which fixes
// both checkpoint layout and optimizer state alignment.
class ParamStore {
  public:
    Tensor& add(const std::string& name, Tensor t);
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    bool has(const std::string& name) const;
    const std::vector<std::string>& names() const { return order_; }

    size_t total_count() const;
    size_t trainable_count() const;
    std::vector<Tensor> trainable() const;

    // requires_grad toggled for every parameter whose name starts with
    // prefix; returns how many tensors were touched
    size_t set_trainable(const std::string& prefix, bool trainable);

  private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, Tensor> map_;
};

// One batch of already-tokenized sentence pairs, padded to a common length.
struct Batch {
    size_t rows = 0;
    size_t len = 0;
    std::vector<int> tokens;    // rows*len, 0 = padding
    std::vector<int> segments;  // rows*len, 0/1 (0 at padding)
    std::vector<uint8_t> mask;  // rows*len, 1 = real token
    std::vector<int> labels;    // rows
};

struct Model {
    BackboneConfig config;
    ExpertConfig expert;  // n_adapters == 0 until adapters are inserted
    ParamStore params;
};

Model build_backbone(const BackboneConfig& config, Rng& rng);

// Full forward pass to classification logits [rows, n_classes].
// Full forward pass. `observer`, when given, receives every mixture
// layer's gate decision; gate rows follow the flattened [rows*len] token
// order of the batch.
Tensor forward(const Model& model, const Batch& batch, GateObserver* observer = nullptr);

// Second-segment-only forward: each row is compacted to
// [CLS] [SEP] <segment-1 tokens> before the regular pass, so the model
// predicts from one side of the pair alone.
Tensor partial_input_forward(const Model& model, const Batch& batch);

// The compaction used by partial_input_forward, exposed for dataset
// diagnostics.
Batch strip_first_segment(const Batch& batch);

}  // namespace smoa
