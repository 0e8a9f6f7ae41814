#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace vulnlens::util {

/// Lowercase hex SHA-256 digest of `data`.
std::string sha256_hex(std::string_view data);

/// First 8 bytes of the SHA-256 digest as an integer; used to derive
/// per-request seeds that are stable across platforms.
std::uint64_t sha256_u64(std::string_view data);

}  // namespace vulnlens::util
