// SPDX-License-Identifier: Apache-2.0
#include "transport/frames.hpp"

#include "quicshell/wire.hpp"

namespace quicshell::transport {

using wire::decode_varint;
using wire::encode_varint;
using wire::varint_size;

bool is_ack_eliciting(const Frame& f) {
  return !std::holds_alternative<AckFrame>(f);
}

bool is_retransmittable(const Frame& f) {
  // Lost ACKs regenerate, lost datagrams stay lost (unreliable by contract),
  // everything else is re-queued on loss.
  return !std::holds_alternative<AckFrame>(f) && !std::holds_alternative<DatagramFrame>(f) &&
         !std::holds_alternative<PingFrame>(f);
}

size_t frame_encoded_size(const Frame& f) {
  Bytes tmp;
  encode_frame(tmp, f);
  return tmp.size();
}

void encode_frame(Bytes& out, const Frame& f) {
  std::visit(
      [&out](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, PingFrame>) {
          encode_varint(out, kFramePing);
        } else if constexpr (std::is_same_v<T, AckFrame>) {
          encode_varint(out, kFrameAck);
          encode_varint(out, v.delay_us);
          encode_varint(out, v.ranges.size());
          for (const auto& r : v.ranges) {
            encode_varint(out, r.largest);
            encode_varint(out, r.count);
          }
        } else if constexpr (std::is_same_v<T, ResetStreamFrame>) {
          encode_varint(out, kFrameResetStream);
          encode_varint(out, v.stream_id);
          encode_varint(out, v.error_code);
        } else if constexpr (std::is_same_v<T, CryptoFrame>) {
          encode_varint(out, kFrameCrypto);
          encode_varint(out, v.offset);
          encode_varint(out, v.data.size());
          append(out, ByteView(v.data));
        } else if constexpr (std::is_same_v<T, SettingsFrame>) {
          encode_varint(out, kFrameSettings);
          encode_varint(out, v.values.size());
          for (const auto& [id, value] : v.values) {
            encode_varint(out, id);
            encode_varint(out, value);
          }
        } else if constexpr (std::is_same_v<T, StreamFrame>) {
          encode_varint(out, v.fin ? kFrameStreamFin : kFrameStream);
          encode_varint(out, v.stream_id);
          encode_varint(out, v.offset);
          encode_varint(out, v.data.size());
          append(out, ByteView(v.data));
        } else if constexpr (std::is_same_v<T, MaxStreamDataFrame>) {
          encode_varint(out, kFrameMaxStreamData);
          encode_varint(out, v.stream_id);
          encode_varint(out, v.max_offset);
        } else if constexpr (std::is_same_v<T, CloseFrame>) {
          encode_varint(out, kFrameClose);
          encode_varint(out, v.error_code);
          wire::encode_string(out, v.reason);
        } else if constexpr (std::is_same_v<T, DatagramFrame>) {
          encode_varint(out, kFrameDatagram);
          encode_varint(out, v.payload.size());
          append(out, ByteView(v.payload));
        }
      },
      f);
}

namespace {

struct FrameReader {
  ByteView in;
  size_t pos = 0;
  bool ok = true;

  uint64_t varint() {
    if (!ok) return 0;
    auto d = decode_varint(in.subspan(pos));
    if (!d) {
      ok = false;
      return 0;
    }
    pos += d.consumed;
    return d.value;
  }

  Bytes bytes(uint64_t len) {
    if (!ok) return {};
    if (len > in.size() - pos) {
      ok = false;
      return {};
    }
    Bytes out(in.begin() + pos, in.begin() + pos + len);
    pos += len;
    return out;
  }

  std::string string() {
    uint64_t len = varint();
    Bytes b = bytes(len);
    return std::string(b.begin(), b.end());
  }
};

}  // namespace

std::optional<std::vector<Frame>> parse_frames(ByteView payload) {
  std::vector<Frame> frames;
  FrameReader r{payload};
  while (r.ok && r.pos < payload.size()) {
    uint64_t type = r.varint();
    if (!r.ok) return std::nullopt;
    switch (type) {
      case kFramePadding:
        break;
      case kFramePing:
        frames.push_back(PingFrame{});
        break;
      case kFrameAck: {
        AckFrame f;
        f.delay_us = r.varint();
        uint64_t n = r.varint();
        if (!r.ok || n > 1024) return std::nullopt;
        for (uint64_t i = 0; i < n; i++) {
          AckRange range;
          range.largest = r.varint();
          range.count = r.varint();
          if (!r.ok || range.count == 0 || range.count > range.largest + 1) return std::nullopt;
          f.ranges.push_back(range);
        }
        frames.push_back(std::move(f));
        break;
      }
      case kFrameResetStream: {
        ResetStreamFrame f;
        f.stream_id = r.varint();
        f.error_code = r.varint();
        frames.push_back(f);
        break;
      }
      case kFrameCrypto: {
        CryptoFrame f;
        f.offset = r.varint();
        f.data = r.bytes(r.varint());
        frames.push_back(std::move(f));
        break;
      }
      case kFrameSettings: {
        SettingsFrame f;
        uint64_t n = r.varint();
        if (!r.ok || n > 64) return std::nullopt;
        for (uint64_t i = 0; i < n; i++) {
          uint64_t id = r.varint();
          uint64_t value = r.varint();
          f.values[id] = value;
        }
        frames.push_back(std::move(f));
        break;
      }
      case kFrameStream:
      case kFrameStreamFin: {
        StreamFrame f;
        f.fin = type == kFrameStreamFin;
        f.stream_id = r.varint();
        f.offset = r.varint();
        f.data = r.bytes(r.varint());
        frames.push_back(std::move(f));
        break;
      }
      case kFrameMaxStreamData: {
        MaxStreamDataFrame f;
        f.stream_id = r.varint();
        f.max_offset = r.varint();
        frames.push_back(f);
        break;
      }
      case kFrameClose: {
        CloseFrame f;
        f.error_code = r.varint();
        f.reason = r.string();
        frames.push_back(std::move(f));
        break;
      }
      case kFrameDatagram: {
        DatagramFrame f;
        f.payload = r.bytes(r.varint());
        frames.push_back(std::move(f));
        break;
      }
      default:
        return std::nullopt;  // unknown frame type: connection error
    }
    if (!r.ok) return std::nullopt;
  }
  if (!r.ok) return std::nullopt;
  return frames;
}

}  // namespace quicshell::transport
