// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "quicshell/bytes.hpp"
#include "quicshell/wire.hpp"

namespace quicshell::testutil {

// Deterministic RNG so failures reproduce.
inline std::mt19937_64& rng() {
  static std::mt19937_64 gen(0x5a5a5a5a17ULL);
  return gen;
}

inline uint64_t random_varint_value() {
  // Spread across all four encoded widths.
  static std::uniform_int_distribution<int> width(0, 3);
  static std::uniform_int_distribution<uint64_t> raw;
  uint64_t bits[] = {6, 14, 30, 62};
  uint64_t mask = (uint64_t{1} << bits[width(rng())]) - 1;
  return raw(rng()) & mask;
}

inline Bytes random_payload(size_t max_len) {
  std::uniform_int_distribution<size_t> len_dist(0, max_len);
  size_t n = len_dist(rng());
  Bytes out(n);
  std::uniform_int_distribution<int> byte(0, 255);
  for (auto& b : out) b = static_cast<uint8_t>(byte(rng()));
  return out;
}

inline std::string random_text(size_t max_len) {
  static const char alphabet[] =
      "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 -_./";
  std::uniform_int_distribution<size_t> len_dist(0, max_len);
  std::uniform_int_distribution<size_t> pick(0, sizeof(alphabet) - 2);
  std::string out(len_dist(rng()), '\0');
  for (auto& c : out) c = alphabet[pick(rng())];
  return out;
}

inline wire::Message random_message() {
  std::uniform_int_distribution<int> which(0, 6);
  switch (which(rng())) {
    case 0:
      return wire::PtyRequest{random_text(16), random_varint_value(), random_varint_value()};
    case 1:
      return wire::ShellRequest{};
    case 2:
      return wire::ExecRequest{random_text(64)};
    case 3:
      return wire::WindowChange{random_varint_value(), random_varint_value()};
    case 4: {
      std::uniform_int_distribution<uint64_t> kind(0, 2);
      return wire::Data{static_cast<wire::DataKind>(kind(rng())), random_payload(512)};
    }
    case 5:
      return wire::ExitStatus{random_varint_value()};
    default:
      return wire::ExitSignal{random_text(8), (rng()() & 1) != 0, random_text(32)};
  }
}

inline wire::ChannelPreamble random_preamble() {
  std::uniform_int_distribution<int> which(0, 2);
  std::uniform_int_distribution<int> port(1, 65535);
  switch (which(rng())) {
    case 0:
      return {wire::ChannelType::Session, "", 0, 0};
    case 1:
      return {wire::ChannelType::DirectTcp, "host-" + random_text(12) + "x",
              static_cast<uint16_t>(port(rng())), 0};
    default:
      return {wire::ChannelType::DirectUdp, "host-" + random_text(12) + "x",
              static_cast<uint16_t>(port(rng())), random_varint_value()};
  }
}

inline wire::UdpFrame random_udp_frame() {
  return {random_varint_value(), random_payload(1200)};
}

}  // namespace quicshell::testutil
