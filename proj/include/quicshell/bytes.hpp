// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace quicshell {

using Bytes = std::vector<uint8_t>;
using ByteView = std::span<const uint8_t>;

inline Bytes to_bytes(std::string_view s) {
  return Bytes(s.begin(), s.end());
}

inline std::string to_string(ByteView b) {
  return std::string(reinterpret_cast<const char*>(b.data()), b.size());
}

inline ByteView as_view(std::string_view s) {
  return ByteView(reinterpret_cast<const uint8_t*>(s.data()), s.size());
}

void append(Bytes& out, ByteView data);
void append(Bytes& out, std::string_view data);

std::string hex_encode(ByteView data);
std::optional<Bytes> hex_decode(std::string_view hex);

std::string base64_encode(ByteView data);
std::optional<Bytes> base64_decode(std::string_view text);

// Unpadded URL-safe alphabet, as used by compact JWTs.
std::string base64url_encode(ByteView data);
std::optional<Bytes> base64url_decode(std::string_view text);

Bytes random_bytes(size_t n);
uint64_t random_u64();

// Comparison that does not leak the mismatch position.
bool constant_time_equal(ByteView a, ByteView b);

}  // namespace quicshell
