#include "smoa/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace smoa {

Tensor& ParamStore::add(const std::string& name, Tensor t) {
    if (map_.count(name)) throw ContractError("duplicate parameter name: " + name);
    order_.push_back(name);
    return map_.emplace(name, std::move(t)).first->second;
}

Tensor& ParamStore::get(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
}

bool ParamStore::has(const std::string& name) const { return map_.count(name) != 0; }

size_t ParamStore::total_count() const {
    size_t n = 0;
    for (const auto& name : order_) n += map_.at(name).size();
    return n;
}

size_t ParamStore::trainable_count() const {
    size_t n = 0;
    for (const auto& name : order_) {
        const Tensor& t = map_.at(name);
        if (t.requires_grad()) n += t.size();
    }
    return n;
}

std::vector<Tensor> ParamStore::trainable() const {
    std::vector<Tensor> out;
    for (const auto& name : order_) {
        const Tensor& t = map_.at(name);
        if (t.requires_grad()) out.push_back(t);
    }
    return out;
}

size_t ParamStore::set_trainable(const std::string& prefix, bool trainable) {
    size_t touched = 0;
    for (const auto& name : order_) {
        if (name.rfind(prefix, 0) == 0) {
            map_.at(name).set_requires_grad(trainable);
            ++touched;
        }
    }
    return touched;
}

namespace {

std::string layer_prefix(size_t i) { return "backbone.L" + std::to_string(i) + "."; }

void check_batch(const Model& model, const Batch& b) {
    const auto& cfg = model.config;
    if (b.rows == 0 || b.len == 0) throw InputError("empty batch");
    if (b.len > cfg.max_len) {
        throw InputError("batch length " + std::to_string(b.len) + " exceeds max_len " +
                         std::to_string(cfg.max_len));
    }
    size_t n = b.rows * b.len;
    if (b.tokens.size() != n || b.segments.size() != n || b.mask.size() != n) {
        throw InputError("batch field sizes disagree with rows*len");
    }
    for (size_t r = 0; r < b.rows; ++r) {
        if (!b.mask[r * b.len]) throw InputError("every row must start with a real token");
    }
    for (size_t i = 0; i < n; ++i) {
        if (b.segments[i] < 0 || static_cast<size_t>(b.segments[i]) >= cfg.n_segments) {
            throw InputError("segment id out of range");
        }
    }
}

}  // namespace

Model build_backbone(const BackboneConfig& cfg, Rng& rng) {
    if (cfg.d_model % cfg.n_heads != 0) {
        throw ConfigError("d_model " + std::to_string(cfg.d_model) + " not divisible by " +
                          std::to_string(cfg.n_heads) + " heads");
    }
    if (cfg.vocab_size < 3 || cfg.max_len < 3 || cfg.n_classes < 2) {
        throw ConfigError("backbone config too small to host sentence pairs");
    }
    Model m;
    m.config = cfg;
    auto& P = m.params;
    const double s = 0.02;
    P.add("backbone.embed.token", Tensor::randn({cfg.vocab_size, cfg.d_model}, rng, s, true));
    P.add("backbone.embed.pos", Tensor::randn({cfg.max_len, cfg.d_model}, rng, s, true));
    P.add("backbone.embed.seg", Tensor::randn({cfg.n_segments, cfg.d_model}, rng, s, true));
    for (size_t i = 0; i < cfg.n_layers; ++i) {
        std::string L = layer_prefix(i);
        for (const char* w : {"wq", "wk", "wv", "wo"}) {
            P.add(L + "attn." + w, Tensor::randn({cfg.d_model, cfg.d_model}, rng, s, true));
        }
        for (const char* b : {"bq", "bk", "bv", "bo"}) {
            P.add(L + "attn." + b, Tensor::zeros({cfg.d_model}, true));
        }
        P.add(L + "attn.ln.gain", Tensor::full({cfg.d_model}, 1.0)).set_requires_grad(true);
        P.add(L + "attn.ln.bias", Tensor::zeros({cfg.d_model}, true));
        P.add(L + "ffn.w1", Tensor::randn({cfg.d_model, cfg.d_ff}, rng, s, true));
        P.add(L + "ffn.b1", Tensor::zeros({cfg.d_ff}, true));
        P.add(L + "ffn.w2", Tensor::randn({cfg.d_ff, cfg.d_model}, rng, s, true));
        P.add(L + "ffn.b2", Tensor::zeros({cfg.d_model}, true));
        P.add(L + "ffn.ln.gain", Tensor::full({cfg.d_model}, 1.0)).set_requires_grad(true);
        P.add(L + "ffn.ln.bias", Tensor::zeros({cfg.d_model}, true));
    }
    P.add("head.w", Tensor::randn({cfg.d_model, cfg.n_classes}, rng, s, true));
    P.add("head.b", Tensor::zeros({cfg.n_classes}, true));
    return m;
}

Tensor forward(const Model& model, const Batch& b, GateObserver* observer) {
    check_batch(model, b);
    const auto& cfg = model.config;
    const auto& P = model.params;
    size_t B = b.rows, L = b.len, d = cfg.d_model, H = cfg.n_heads, dh = d / H;

    std::vector<int> pos_ids(B * L);
    for (size_t i = 0; i < B * L; ++i) pos_ids[i] = static_cast<int>(i % L);

    Tensor h = add(add(embedding_lookup(P.get("backbone.embed.token"), b.tokens),
                       embedding_lookup(P.get("backbone.embed.pos"), pos_ids)),
                   embedding_lookup(P.get("backbone.embed.seg"), b.segments));

    const bool mixed = model.expert.n_adapters > 0;
    for (size_t i = 0; i < cfg.n_layers; ++i) {
        std::string Lp = layer_prefix(i);
        // self-attention sublayer
        Tensor q = add_bias(matmul(h, P.get(Lp + "attn.wq")), P.get(Lp + "attn.bq"));
        Tensor k = add_bias(matmul(h, P.get(Lp + "attn.wk")), P.get(Lp + "attn.bk"));
        Tensor v = add_bias(matmul(h, P.get(Lp + "attn.wv")), P.get(Lp + "attn.bv"));
        auto split = [&](const Tensor& t) {
            return reshape(permute(reshape(t, {B, L, H, dh}), {0, 2, 1, 3}), {B * H, L, dh});
        };
        Tensor scores = scale(bmm(split(q), permute(split(k), {0, 2, 1})),
                              1.0 / std::sqrt(static_cast<double>(dh)));
        Tensor weights = softmax(attention_mask_fill(reshape(scores, {B, H, L, L}), b.mask), -1);
        Tensor ctx = bmm(reshape(weights, {B * H, L, L}), split(v));
        ctx = reshape(permute(reshape(ctx, {B, H, L, dh}), {0, 2, 1, 3}), {B * L, d});
        Tensor attn_out = add_bias(matmul(ctx, P.get(Lp + "attn.wo")), P.get(Lp + "attn.bo"));
        if (mixed) {
            GateOutput gate;
            attn_out = smoa_forward(attn_out, smoa_layer_params(model, i, "attn"),
                                    model.expert.top_k, observer ? &gate : nullptr);
            if (observer) observer->on_gate(2 * i, gate);
        }
        h = layer_norm(add(h, attn_out), P.get(Lp + "attn.ln.gain"), P.get(Lp + "attn.ln.bias"),
                       cfg.ln_eps);
        // feed-forward sublayer
        Tensor ffn_out = add_bias(
            matmul(gelu(add_bias(matmul(h, P.get(Lp + "ffn.w1")), P.get(Lp + "ffn.b1"))),
                   P.get(Lp + "ffn.w2")),
            P.get(Lp + "ffn.b2"));
        if (mixed) {
            GateOutput gate;
            ffn_out = smoa_forward(ffn_out, smoa_layer_params(model, i, "ffn"),
                                   model.expert.top_k, observer ? &gate : nullptr);
            if (observer) observer->on_gate(2 * i + 1, gate);
        }
        h = layer_norm(add(h, ffn_out), P.get(Lp + "ffn.ln.gain"), P.get(Lp + "ffn.ln.bias"),
                       cfg.ln_eps);
    }

    std::vector<size_t> cls_rows(B);
    for (size_t r = 0; r < B; ++r) cls_rows[r] = r * L;
    Tensor cls = gather_rows(h, cls_rows);
    return add_bias(matmul(cls, P.get("head.w")), P.get("head.b"));
}

Batch strip_first_segment(const Batch& b) {
    if (b.rows == 0 || b.len == 0) throw InputError("empty batch");
    std::vector<std::vector<int>> kept(b.rows);
    size_t longest = 0;
    for (size_t r = 0; r < b.rows; ++r) {
        auto& row = kept[r];
        row.push_back(kClsId);
        row.push_back(kSepId);
        for (size_t j = 0; j < b.len; ++j) {
            size_t at = r * b.len + j;
            if (b.mask[at] && b.segments[at] == 1) row.push_back(b.tokens[at]);
        }
        longest = std::max(longest, row.size());
    }
    Batch out;
    out.rows = b.rows;
    out.len = longest;
    out.tokens.assign(b.rows * longest, 0);
    out.segments.assign(b.rows * longest, 0);
    out.mask.assign(b.rows * longest, 0);
    out.labels = b.labels;
    for (size_t r = 0; r < b.rows; ++r) {
        for (size_t j = 0; j < kept[r].size(); ++j) {
            out.tokens[r * longest + j] = kept[r][j];
            out.segments[r * longest + j] = j < 2 ? 0 : 1;
            out.mask[r * longest + j] = 1;
        }
    }
    return out;
}

Tensor partial_input_forward(const Model& model, const Batch& batch) {
    return forward(model, strip_first_segment(batch));
}

}  // namespace smoa
