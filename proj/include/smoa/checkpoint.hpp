#pragma once

// Binary model checkpoints: a JSON header (configs + named tensor manifest
// with shapes and trainability) followed by raw little-endian float64
// payload in registry order.

#include "smoa/encoder.hpp"

#include <string>

namespace smoa {

void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);

// Hex SHA-256 over (name, shape, raw values) of every parameter whose name
// starts with prefix, in registry order. Empty prefix covers the whole
// store.
std::string params_digest(const ParamStore& params, const std::string& prefix = "");

}  // namespace smoa
