#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace smoa {

// SHA-256 of a byte buffer, lowercase hex.
std::string sha256_hex(const void* data, size_t len);

inline std::string sha256_hex(const std::string& s) {
    return sha256_hex(s.data(), s.size());
}

// Digest over the raw little-endian bytes of a double sequence.
std::string sha256_hex(const std::vector<double>& values);

}  // namespace smoa
