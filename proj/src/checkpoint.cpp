#include "smoa/checkpoint.hpp"

#include "smoa/digest.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace smoa {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload layout assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'S', 'M', 'O', 'A', 'C', 'K', 'P', '1'};

nlohmann::json backbone_json(const BackboneConfig& c) {
    return {{"vocab_size", c.vocab_size}, {"max_len", c.max_len},
            {"n_segments", c.n_segments}, {"d_model", c.d_model},
            {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
            {"d_ff", c.d_ff},             {"n_classes", c.n_classes},
            {"ln_eps", c.ln_eps}};
}

BackboneConfig backbone_from_json(const nlohmann::json& j) {
    BackboneConfig c;
    c.vocab_size = j.at("vocab_size").get<size_t>();
    c.max_len = j.at("max_len").get<size_t>();
    c.n_segments = j.at("n_segments").get<size_t>();
    c.d_model = j.at("d_model").get<size_t>();
    c.n_layers = j.at("n_layers").get<size_t>();
    c.n_heads = j.at("n_heads").get<size_t>();
    c.d_ff = j.at("d_ff").get<size_t>();
    c.n_classes = j.at("n_classes").get<size_t>();
    c.ln_eps = j.at("ln_eps").get<double>();
    return c;
}

}  // namespace

void save_model(const Model& model, const std::string& path) {
    nlohmann::json header;
    header["config"] = backbone_json(model.config);
    header["expert"] = {{"n_adapters", model.expert.n_adapters},
                        {"top_k", model.expert.top_k},
                        {"d_bottleneck", model.expert.d_bottleneck}};
    nlohmann::json manifest = nlohmann::json::array();
    for (const auto& name : model.params.names()) {
        const Tensor& t = model.params.get(name);
        manifest.push_back(
            {{"name", name}, {"shape", t.shape()}, {"trainable", t.requires_grad()}});
    }
    header["params"] = std::move(manifest);
    std::string head = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open checkpoint for writing: " + path);
    f.write(kMagic, sizeof(kMagic));
    uint64_t head_len = head.size();
    f.write(reinterpret_cast<const char*>(&head_len), sizeof(head_len));
    f.write(head.data(), static_cast<std::streamsize>(head.size()));
    for (const auto& name : model.params.names()) {
        const auto& v = model.params.get(name).values();
        f.write(reinterpret_cast<const char*>(v.data()),
                static_cast<std::streamsize>(v.size() * sizeof(double)));
    }
    if (!f) throw InputError("checkpoint write failed: " + path);
}

Model load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open checkpoint: " + path);
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw ParseError("not a model checkpoint: " + path);
    }
    uint64_t head_len = 0;
    f.read(reinterpret_cast<char*>(&head_len), sizeof(head_len));
    if (!f || head_len == 0 || head_len > (1ull << 30)) {
        throw ParseError("corrupt checkpoint header length: " + path);
    }
    std::string head(head_len, '\0');
    f.read(head.data(), static_cast<std::streamsize>(head_len));
    if (!f) throw ParseError("truncated checkpoint header: " + path);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(head);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("corrupt checkpoint header: ") + e.what());
    }

    Model model;
    try {
        model.config = backbone_from_json(header.at("config"));
        const auto& ej = header.at("expert");
        model.expert.n_adapters = ej.at("n_adapters").get<size_t>();
        model.expert.top_k = ej.at("top_k").get<size_t>();
        model.expert.d_bottleneck = ej.at("d_bottleneck").get<size_t>();
        for (const auto& entry : header.at("params")) {
            std::string name = entry.at("name").get<std::string>();
            Shape shape = entry.at("shape").get<Shape>();
            bool trainable = entry.at("trainable").get<bool>();
            std::vector<double> values(numel(shape));
            f.read(reinterpret_cast<char*>(values.data()),
                   static_cast<std::streamsize>(values.size() * sizeof(double)));
            if (!f) throw ParseError("truncated checkpoint payload at " + name);
            model.params.add(name, Tensor::from(shape, std::move(values), trainable));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed checkpoint manifest: ") + e.what());
    }
    return model;
}

std::string params_digest(const ParamStore& params, const std::string& prefix) {
    std::string buf;
    for (const auto& name : params.names()) {
        if (name.rfind(prefix, 0) != 0) continue;
        const Tensor& t = params.get(name);
        buf.append(name);
        buf.push_back('\0');
        for (size_t e : t.shape()) {
            uint64_t v = e;
            buf.append(reinterpret_cast<const char*>(&v), sizeof(v));
        }
        buf.push_back('\0');
        buf.append(reinterpret_cast<const char*>(t.values().data()),
                   t.values().size() * sizeof(double));
    }
    return sha256_hex(buf.data(), buf.size());
}

}  // namespace smoa
