// SPDX-License-Identifier: Apache-2.0
#include "quicshell/wire.hpp"

#include <fmt/format.h>

#include <stdexcept>

namespace quicshell::wire {

namespace {

template <typename T>
Decoded<T> fail(DecodeStatus status, std::string detail) {
  Decoded<T> d;
  d.status = status;
  d.detail = std::move(detail);
  return d;
}

template <typename T>
Decoded<T> need_more() {
  return fail<T>(DecodeStatus::NeedMore, "truncated input");
}

// Cursor over an input view; each helper either advances or records failure.
struct Reader {
  explicit Reader(ByteView input) : in(input) {}

  ByteView in;
  size_t pos = 0;
  DecodeStatus status = DecodeStatus::Ok;
  std::string detail;

  bool ok() const { return status == DecodeStatus::Ok; }

  uint64_t varint() {
    if (!ok()) return 0;
    auto d = decode_varint(in.subspan(pos));
    if (!d) {
      status = d.status;
      detail = d.detail;
      return 0;
    }
    pos += d.consumed;
    return d.value;
  }

  Bytes bytes() {
    uint64_t len = varint();
    if (!ok()) return {};
    if (len > in.size() - pos) {
      status = DecodeStatus::NeedMore;
      detail = "truncated input";
      return {};
    }
    Bytes out(in.begin() + pos, in.begin() + pos + len);
    pos += len;
    return out;
  }

  std::string string() {
    Bytes b = bytes();
    return std::string(b.begin(), b.end());
  }

  bool boolean() {
    if (!ok()) return false;
    if (pos >= in.size()) {
      status = DecodeStatus::NeedMore;
      detail = "truncated input";
      return false;
    }
    uint8_t b = in[pos];
    if (b > 1) {
      status = DecodeStatus::Malformed;
      detail = fmt::format("boolean byte 0x{:02x}", b);
      return false;
    }
    pos++;
    return b == 1;
  }

  template <typename T>
  Decoded<T> finish(T value) const {
    Decoded<T> d;
    d.status = status;
    d.detail = detail;
    if (ok()) {
      d.value = std::move(value);
      d.consumed = pos;
    }
    return d;
  }
};

}  // namespace

size_t varint_size(uint64_t v) {
  if (v < (uint64_t{1} << 6)) return 1;
  if (v < (uint64_t{1} << 14)) return 2;
  if (v < (uint64_t{1} << 30)) return 4;
  if (v <= kVarIntMax) return 8;
  throw std::invalid_argument("varint value out of range");
}

void encode_varint(Bytes& out, uint64_t v) {
  switch (varint_size(v)) {
    case 1:
      out.push_back(static_cast<uint8_t>(v));
      break;
    case 2:
      out.push_back(static_cast<uint8_t>(0x40 | (v >> 8)));
      out.push_back(static_cast<uint8_t>(v));
      break;
    case 4:
      out.push_back(static_cast<uint8_t>(0x80 | (v >> 24)));
      out.push_back(static_cast<uint8_t>(v >> 16));
      out.push_back(static_cast<uint8_t>(v >> 8));
      out.push_back(static_cast<uint8_t>(v));
      break;
    default:
      out.push_back(static_cast<uint8_t>(0xc0 | (v >> 56)));
      for (int shift = 48; shift >= 0; shift -= 8)
        out.push_back(static_cast<uint8_t>(v >> shift));
      break;
  }
}

Bytes encode_varint(uint64_t v) {
  Bytes out;
  encode_varint(out, v);
  return out;
}

Decoded<uint64_t> decode_varint(ByteView in) {
  if (in.empty()) return need_more<uint64_t>();
  size_t len = size_t{1} << (in[0] >> 6);
  if (in.size() < len) return need_more<uint64_t>();
  uint64_t v = in[0] & 0x3f;
  for (size_t i = 1; i < len; i++) v = v << 8 | in[i];
  Decoded<uint64_t> d;
  d.status = DecodeStatus::Ok;
  d.value = v;
  d.consumed = len;
  return d;
}

void encode_string(Bytes& out, std::string_view s) {
  encode_varint(out, s.size());
  append(out, s);
}

void encode_bytes(Bytes& out, ByteView b) {
  encode_varint(out, b.size());
  append(out, b);
}

Decoded<std::string> decode_string(ByteView in) {
  Reader r(in);
  std::string s = r.string();
  return r.finish(std::move(s));
}

Decoded<Bytes> decode_bytes(ByteView in) {
  Reader r(in);
  Bytes b = r.bytes();
  return r.finish(std::move(b));
}

uint64_t message_type_code(const Message& m) {
  return std::visit(
      [](const auto& v) -> uint64_t {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, PtyRequest>) return kTypePtyRequest;
        if constexpr (std::is_same_v<T, ShellRequest>) return kTypeShellRequest;
        if constexpr (std::is_same_v<T, ExecRequest>) return kTypeExecRequest;
        if constexpr (std::is_same_v<T, WindowChange>) return kTypeWindowChange;
        if constexpr (std::is_same_v<T, Data>) return kTypeData;
        if constexpr (std::is_same_v<T, ExitStatus>) return kTypeExitStatus;
        if constexpr (std::is_same_v<T, ExitSignal>) return kTypeExitSignal;
      },
      m);
}

const char* message_type_name(const Message& m) {
  switch (message_type_code(m)) {
    case kTypePtyRequest: return "pty-request";
    case kTypeShellRequest: return "shell";
    case kTypeExecRequest: return "exec";
    case kTypeWindowChange: return "window-change";
    case kTypeData: return "data";
    case kTypeExitStatus: return "exit-status";
    case kTypeExitSignal: return "exit-signal";
    default: return "unknown";
  }
}

Bytes encode_message(const Message& m) {
  Bytes out;
  encode_varint(out, message_type_code(m));
  std::visit(
      [&out](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, PtyRequest>) {
          encode_string(out, v.term);
          encode_varint(out, v.cols);
          encode_varint(out, v.rows);
        } else if constexpr (std::is_same_v<T, ExecRequest>) {
          encode_string(out, v.command);
        } else if constexpr (std::is_same_v<T, WindowChange>) {
          encode_varint(out, v.cols);
          encode_varint(out, v.rows);
        } else if constexpr (std::is_same_v<T, Data>) {
          uint64_t kind = static_cast<uint64_t>(v.kind);
          if (kind > 2) throw std::invalid_argument("data kind out of range");
          if (v.payload.size() > kMaxDataPayload)
            throw std::invalid_argument("data payload above fragmentation limit");
          encode_varint(out, kind);
          encode_bytes(out, v.payload);
        } else if constexpr (std::is_same_v<T, ExitStatus>) {
          encode_varint(out, v.code);
        } else if constexpr (std::is_same_v<T, ExitSignal>) {
          encode_string(out, v.signal_name);
          out.push_back(v.core_dumped ? 1 : 0);
          encode_string(out, v.error_message);
        }
      },
      m);
  return out;
}

Decoded<Message> decode_message(ByteView in) {
  Reader r(in);
  uint64_t code = r.varint();
  if (!r.ok()) return r.finish(Message{});
  switch (code) {
    case kTypePtyRequest: {
      PtyRequest v;
      v.term = r.string();
      v.cols = r.varint();
      v.rows = r.varint();
      return r.finish(Message{std::move(v)});
    }
    case kTypeShellRequest:
      return r.finish(Message{ShellRequest{}});
    case kTypeExecRequest: {
      ExecRequest v;
      v.command = r.string();
      return r.finish(Message{std::move(v)});
    }
    case kTypeWindowChange: {
      WindowChange v;
      v.cols = r.varint();
      v.rows = r.varint();
      return r.finish(Message{v});
    }
    case kTypeData: {
      uint64_t kind = r.varint();
      Bytes payload = r.bytes();
      if (!r.ok()) return r.finish(Message{});
      if (kind > 2)
        return fail<Message>(DecodeStatus::Malformed, fmt::format("data kind {}", kind));
      if (payload.size() > kMaxDataPayload)
        return fail<Message>(DecodeStatus::Malformed, "data payload above fragmentation limit");
      return r.finish(Message{Data{static_cast<DataKind>(kind), std::move(payload)}});
    }
    case kTypeExitStatus: {
      ExitStatus v;
      v.code = r.varint();
      return r.finish(Message{v});
    }
    case kTypeExitSignal: {
      ExitSignal v;
      v.signal_name = r.string();
      v.core_dumped = r.boolean();
      v.error_message = r.string();
      return r.finish(Message{std::move(v)});
    }
    default: {
      Decoded<Message> d;
      d.status = DecodeStatus::UnknownType;
      d.unknown_code = code;
      d.detail = fmt::format("unknown message type 0x{:x}", code);
      return d;
    }
  }
}

Bytes encode_frame(const Message& m) {
  Bytes body = encode_message(m);
  Bytes out;
  encode_varint(out, body.size());
  append(out, body);
  return out;
}

Decoded<Message> decode_frame(ByteView in) {
  Reader r(in);
  uint64_t total = r.varint();
  if (!r.ok()) return r.finish(Message{});
  if (total > in.size() - r.pos) return need_more<Message>();
  auto inner = decode_message(in.subspan(r.pos, total));
  Decoded<Message> d;
  d.status = inner.status;
  d.unknown_code = inner.unknown_code;
  d.detail = inner.detail;
  switch (inner.status) {
    case DecodeStatus::Ok:
      if (inner.consumed != total) {
        d.status = DecodeStatus::Malformed;
        d.detail = "frame length does not match message length";
        break;
      }
      d.value = std::move(inner.value);
      d.consumed = r.pos + total;
      break;
    case DecodeStatus::UnknownType:
      // Whole frame is skippable thanks to the outer length.
      d.consumed = r.pos + total;
      break;
    case DecodeStatus::NeedMore:
      // A truncated message inside a complete frame can never finish.
      d.status = DecodeStatus::Malformed;
      d.detail = "message truncated inside frame";
      break;
    default:
      break;
  }
  return d;
}

const char* channel_type_string(ChannelType t) {
  switch (t) {
    case ChannelType::Session: return "session";
    case ChannelType::DirectTcp: return "direct-tcp";
    case ChannelType::DirectUdp: return "direct-udp";
  }
  return "?";
}

std::optional<ChannelType> channel_type_from_string(std::string_view s) {
  if (s == "session") return ChannelType::Session;
  if (s == "direct-tcp") return ChannelType::DirectTcp;
  if (s == "direct-udp") return ChannelType::DirectUdp;
  return std::nullopt;
}

Bytes encode_preamble(const ChannelPreamble& p) {
  Bytes out;
  encode_string(out, channel_type_string(p.type));
  if (p.type == ChannelType::DirectTcp || p.type == ChannelType::DirectUdp) {
    if (p.target_host.empty()) throw std::invalid_argument("empty target host");
    if (p.target_port == 0) throw std::invalid_argument("target port out of range");
    encode_string(out, p.target_host);
    encode_varint(out, p.target_port);
    if (p.type == ChannelType::DirectUdp) encode_varint(out, p.datagram_id);
  }
  return out;
}

Decoded<ChannelPreamble> decode_preamble(ByteView in) {
  Reader r(in);
  std::string type_str = r.string();
  if (!r.ok()) return r.finish(ChannelPreamble{});
  auto type = channel_type_from_string(type_str);
  if (!type) {
    Decoded<ChannelPreamble> d;
    d.status = DecodeStatus::UnknownType;
    d.detail = fmt::format("unknown channel type \"{}\"", type_str);
    return d;
  }
  ChannelPreamble p;
  p.type = *type;
  if (p.type == ChannelType::DirectTcp || p.type == ChannelType::DirectUdp) {
    p.target_host = r.string();
    uint64_t port = r.varint();
    if (p.type == ChannelType::DirectUdp) p.datagram_id = r.varint();
    if (!r.ok()) return r.finish(ChannelPreamble{});
    if (port < 1 || port > 65535)
      return fail<ChannelPreamble>(DecodeStatus::Malformed, fmt::format("port {}", port));
    if (p.target_host.empty())
      return fail<ChannelPreamble>(DecodeStatus::Malformed, "empty target host");
    p.target_port = static_cast<uint16_t>(port);
  }
  return r.finish(std::move(p));
}

Bytes encode_udp_frame(const UdpFrame& f) {
  Bytes out;
  encode_varint(out, f.datagram_id);
  append(out, ByteView(f.payload));
  return out;
}

Decoded<UdpFrame> decode_udp_frame(ByteView in) {
  if (in.empty()) return fail<UdpFrame>(DecodeStatus::Malformed, "empty datagram");
  Reader r(in);
  UdpFrame f;
  f.datagram_id = r.varint();
  if (!r.ok()) return r.finish(UdpFrame{});
  f.payload.assign(in.begin() + r.pos, in.end());
  r.pos = in.size();
  return r.finish(std::move(f));
}

}  // namespace quicshell::wire
