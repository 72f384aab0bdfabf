#include "smoa/checkpoint.hpp"

#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "smoa/data.hpp"
#include "smoa/moa.hpp"

using namespace smoa;

namespace {

Model tiny_model(uint64_t seed, bool with_mixtures) {
    BackboneConfig cfg;
    cfg.vocab_size = 40;
    cfg.max_len = 16;
    cfg.d_model = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    cfg.n_classes = 3;
    Rng rng(seed);
    Model m = build_backbone(cfg, rng);
    if (with_mixtures) {
        ExpertConfig expert;
        expert.n_adapters = 3;
        expert.top_k = 2;
        expert.d_bottleneck = 4;
        insert_smoa(m, expert, rng);
    }
    return m;
}

Batch tiny_batch() {
    Dataset data;
    Example e0;
    e0.a = {10, 11, 12};
    e0.b = {13, 14};
    e0.label = 1;
    Example e1;
    e1.a = {15, 16};
    e1.b = {17, 18, 19};
    e1.label = 2;
    data.examples = {e0, e1};
    return make_batch(data, {0, 1});
}

}  // namespace

TEST_CASE("checkpoints round-trip bitwise") {
    Model m = tiny_model(5, true);
    m.params.set_trainable("encoder.", false);

    const std::string path = "/tmp/smoa_ckpt_test.bin";
    save_model(m, path);
    Model back = load_model(path);

    CHECK(back.config.d_model == m.config.d_model);
    CHECK(back.config.vocab_size == m.config.vocab_size);
    CHECK(back.config.ln_eps == m.config.ln_eps);
    CHECK(back.expert.n_adapters == m.expert.n_adapters);
    CHECK(back.expert.top_k == m.expert.top_k);
    CHECK(back.expert.d_bottleneck == m.expert.d_bottleneck);

    REQUIRE(back.params.names() == m.params.names());
    for (const auto& name : m.params.names()) {
        const Tensor &a = m.params.get(name), &b = back.params.get(name);
        CHECK(a.shape() == b.shape());
        CHECK(a.requires_grad() == b.requires_grad());
        CHECK(a.values() == b.values());  // bitwise
    }

    // the reloaded model computes the same function
    NoGradGuard guard;
    Batch batch = tiny_batch();
    Tensor ya = forward(m, batch);
    Tensor yb = forward(back, batch);
    CHECK(ya.values() == yb.values());
    std::remove(path.c_str());
}

TEST_CASE("parameter digests identify stores and prefixes") {
    Model a = tiny_model(5, false);
    Model b = tiny_model(5, false);
    Model c = tiny_model(6, false);

    CHECK(params_digest(a.params) == params_digest(b.params));
    CHECK(params_digest(a.params) != params_digest(c.params));
    CHECK(params_digest(a.params, "encoder.") != params_digest(a.params));
    CHECK(params_digest(a.params, "encoder.") == params_digest(b.params, "encoder."));
    CHECK(params_digest(a.params).size() == 64);

    // a digest follows the values, not the identity of the store
    const std::string path = "/tmp/smoa_ckpt_digest.bin";
    save_model(a, path);
    Model back = load_model(path);
    CHECK(params_digest(back.params) == params_digest(a.params));

    // flipping one value anywhere changes it
    back.params.get("head.b").values()[0] += 1e-12;
    CHECK(params_digest(back.params) != params_digest(a.params));
    std::remove(path.c_str());
}

TEST_CASE("corrupt checkpoints are rejected") {
    const std::string path = "/tmp/smoa_ckpt_bad.bin";
    Model m = tiny_model(5, false);
    save_model(m, path);

    // truncate the payload
    {
        std::ifstream in(path, std::ios::binary);
        std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(all.data(), static_cast<std::streamsize>(all.size() / 2));
    }
    CHECK_THROWS_AS(load_model(path), ParseError);

    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << "definitely not a checkpoint";
    }
    CHECK_THROWS_AS(load_model(path), ParseError);

    CHECK_THROWS_AS(load_model("/tmp/no_such_checkpoint.bin"), InputError);
    std::remove(path.c_str());
}
