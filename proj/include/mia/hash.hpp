#pragma once

#include <cstdint>
#include <string>

namespace mia {

// SHA-256 of a byte string / file, hex-encoded. Used for run manifests.
std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& s);
std::string sha256_file_hex(const std::string& path);  // throws if unreadable

}  // namespace mia
