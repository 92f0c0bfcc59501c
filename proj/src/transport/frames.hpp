// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "quicshell/bytes.hpp"

namespace quicshell::transport {

// Transport frame type codes.
inline constexpr uint64_t kFramePadding = 0x00;
inline constexpr uint64_t kFramePing = 0x01;
inline constexpr uint64_t kFrameAck = 0x02;
inline constexpr uint64_t kFrameResetStream = 0x04;
inline constexpr uint64_t kFrameCrypto = 0x06;
inline constexpr uint64_t kFrameSettings = 0x07;
inline constexpr uint64_t kFrameStream = 0x08;     // +0x01 = FIN
inline constexpr uint64_t kFrameStreamFin = 0x09;
inline constexpr uint64_t kFrameMaxStreamData = 0x11;
inline constexpr uint64_t kFrameClose = 0x1c;
inline constexpr uint64_t kFrameDatagram = 0x30;

// Settings identifiers.
inline constexpr uint64_t kSettingEnableConnect = 0x01;
inline constexpr uint64_t kSettingMaxDatagramFrameSize = 0x02;
inline constexpr uint64_t kSettingInitialMaxStreamData = 0x03;

struct PingFrame {};

struct AckRange {
  uint64_t largest = 0;
  uint64_t count = 1;  // packets in [largest-count+1, largest]
};

struct AckFrame {
  uint64_t delay_us = 0;
  std::vector<AckRange> ranges;  // descending by largest

  uint64_t largest() const { return ranges.empty() ? 0 : ranges.front().largest; }
};

struct ResetStreamFrame {
  uint64_t stream_id = 0;
  uint64_t error_code = 0;
};

struct CryptoFrame {
  uint64_t offset = 0;
  Bytes data;
};

struct SettingsFrame {
  std::map<uint64_t, uint64_t> values;
};

struct StreamFrame {
  uint64_t stream_id = 0;
  uint64_t offset = 0;
  Bytes data;
  bool fin = false;
};

struct MaxStreamDataFrame {
  uint64_t stream_id = 0;
  uint64_t max_offset = 0;
};

struct CloseFrame {
  uint64_t error_code = 0;
  std::string reason;
};

struct DatagramFrame {
  Bytes payload;
};

using Frame = std::variant<PingFrame, AckFrame, ResetStreamFrame, CryptoFrame, SettingsFrame,
                           StreamFrame, MaxStreamDataFrame, CloseFrame, DatagramFrame>;

bool is_ack_eliciting(const Frame& f);
bool is_retransmittable(const Frame& f);
size_t frame_encoded_size(const Frame& f);

void encode_frame(Bytes& out, const Frame& f);

// Parses a full packet payload; nullopt on any malformed frame.
std::optional<std::vector<Frame>> parse_frames(ByteView payload);

}  // namespace quicshell::transport
