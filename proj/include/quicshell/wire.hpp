// SPDX-License-Identifier: Apache-2.0
//
// Wire format v1.
//
// Channel streams carry a preamble followed by a sequence of frames:
//   frame = total_length:varint ++ type_code:varint ++ fields
// Varints use the QUIC variable-length scheme (2-bit length prefix,
// 1/2/4/8-byte forms, big-endian). Strings are UTF-8 and varint-length
// prefixed; booleans are a single 0/1 byte. UDP tunnel datagrams are
//   datagram_id:varint ++ payload
// with the datagram boundary delimiting the payload.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>

#include "quicshell/bytes.hpp"

namespace quicshell::wire {

inline constexpr uint64_t kVarIntMax = (uint64_t{1} << 62) - 1;

// Largest Data payload a single message may carry; senders fragment above.
inline constexpr size_t kMaxDataPayload = size_t{1} << 24;

// Message type codes.
inline constexpr uint64_t kTypePtyRequest = 0x01;
inline constexpr uint64_t kTypeShellRequest = 0x02;
inline constexpr uint64_t kTypeExecRequest = 0x03;
inline constexpr uint64_t kTypeWindowChange = 0x04;
inline constexpr uint64_t kTypeData = 0x10;
inline constexpr uint64_t kTypeExitStatus = 0x20;
inline constexpr uint64_t kTypeExitSignal = 0x21;

enum class DataKind : uint64_t { Stdin = 0, Stdout = 1, Stderr = 2 };

struct PtyRequest {
  std::string term;
  uint64_t cols = 0;
  uint64_t rows = 0;
  bool operator==(const PtyRequest&) const = default;
};

struct ShellRequest {
  bool operator==(const ShellRequest&) const = default;
};

struct ExecRequest {
  std::string command;
  bool operator==(const ExecRequest&) const = default;
};

struct WindowChange {
  uint64_t cols = 0;
  uint64_t rows = 0;
  bool operator==(const WindowChange&) const = default;
};

struct Data {
  DataKind kind = DataKind::Stdin;
  Bytes payload;
  bool operator==(const Data&) const = default;
};

struct ExitStatus {
  uint64_t code = 0;
  bool operator==(const ExitStatus&) const = default;
};

struct ExitSignal {
  std::string signal_name;
  bool core_dumped = false;
  std::string error_message;
  bool operator==(const ExitSignal&) const = default;
};

using Message = std::variant<PtyRequest, ShellRequest, ExecRequest, WindowChange, Data,
                             ExitStatus, ExitSignal>;

uint64_t message_type_code(const Message& m);
const char* message_type_name(const Message& m);

enum class ChannelType { Session, DirectTcp, DirectUdp };

const char* channel_type_string(ChannelType t);
std::optional<ChannelType> channel_type_from_string(std::string_view s);

struct ChannelPreamble {
  ChannelType type = ChannelType::Session;
  // direct-tcp / direct-udp only.
  std::string target_host;
  uint16_t target_port = 0;
  // direct-udp only.
  uint64_t datagram_id = 0;
  bool operator==(const ChannelPreamble&) const = default;
};

struct UdpFrame {
  uint64_t datagram_id = 0;
  Bytes payload;
  bool operator==(const UdpFrame&) const = default;
};

// Decode outcome. NeedMore means the input is a valid prefix and the caller
// should retry with more bytes; Malformed means it can never become valid.
// UnknownType is only produced by frame/message decoding and carries the
// offending code so the caller can skip the frame.
enum class DecodeStatus { Ok, NeedMore, Malformed, UnknownType };

template <typename T>
struct Decoded {
  DecodeStatus status = DecodeStatus::Malformed;
  T value{};
  size_t consumed = 0;
  uint64_t unknown_code = 0;
  std::string detail;

  bool ok() const { return status == DecodeStatus::Ok; }
  explicit operator bool() const { return ok(); }
};

// --- varint ---------------------------------------------------------------

// Throws std::invalid_argument for v > kVarIntMax.
void encode_varint(Bytes& out, uint64_t v);
Bytes encode_varint(uint64_t v);
size_t varint_size(uint64_t v);

// Accepts non-minimal encodings (QUIC convention).
Decoded<uint64_t> decode_varint(ByteView in);

// --- length-prefixed strings / bytes ---------------------------------------

void encode_string(Bytes& out, std::string_view s);
void encode_bytes(Bytes& out, ByteView b);
Decoded<std::string> decode_string(ByteView in);
Decoded<Bytes> decode_bytes(ByteView in);

// --- channel messages -------------------------------------------------------

// type_code ++ fields (no outer length; see frame helpers below).
// Throws std::invalid_argument when invariants are violated (Data payload
// above kMaxDataPayload, Data kind outside {0,1,2}).
Bytes encode_message(const Message& m);
Decoded<Message> decode_message(ByteView in);

// frame = total_length:varint ++ encode_message(m)
Bytes encode_frame(const Message& m);

// Decodes one frame from the head of `in`. UnknownType is returned with
// `consumed` covering the whole frame so the caller can skip it.
Decoded<Message> decode_frame(ByteView in);

// --- channel preambles ------------------------------------------------------

Bytes encode_preamble(const ChannelPreamble& p);
Decoded<ChannelPreamble> decode_preamble(ByteView in);

// --- UDP tunnel frames -------------------------------------------------------

Bytes encode_udp_frame(const UdpFrame& f);
Decoded<UdpFrame> decode_udp_frame(ByteView in);

}  // namespace quicshell::wire
