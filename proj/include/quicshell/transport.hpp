// SPDX-License-Identifier: Apache-2.0
//
// Minimal QUIC-style secure datagram transport: UDP packets protected with
// keys exported from an embedded TLS 1.3 handshake, carrying independent
// bidirectional streams (ordered, reliable, flow-controlled per stream) and
// unreliable datagrams. One connection multiplexes many streams; loss on one
// stream never orders ahead of another.
#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "quicshell/bytes.hpp"

namespace quicshell::transport {

namespace detail {
class ConnectionImpl;
class StreamState;
class ListenerImpl;
}  // namespace detail

using Millis = std::chrono::milliseconds;

// Application-level error codes carried by RESET_STREAM / CLOSE.
namespace errc {
inline constexpr uint64_t kNone = 0;
inline constexpr uint64_t kProtocol = 1;
inline constexpr uint64_t kUnknownUser = 2;
inline constexpr uint64_t kSpawnFailed = 3;
inline constexpr uint64_t kChannelLimit = 4;
inline constexpr uint64_t kTargetRefused = 5;
inline constexpr uint64_t kTargetDns = 6;
inline constexpr uint64_t kTargetTimeout = 7;
inline constexpr uint64_t kUnsupportedType = 8;
inline constexpr uint64_t kShutdown = 9;
inline constexpr uint64_t kInternal = 10;
}  // namespace errc

const char* errc_name(uint64_t code);

struct TransportError : std::runtime_error {
  enum class Kind { Timeout, Closed, Reset, Tls, Config, Protocol };
  Kind kind;
  uint64_t code = 0;

  TransportError(Kind kind_, const std::string& msg, uint64_t code_ = 0)
      : std::runtime_error(msg), kind(kind_), code(code_) {}
};

// Negotiated per-connection options, exchanged right after the handshake.
struct Settings {
  bool enable_connect_protocol = true;
  uint64_t max_datagram_frame_size = 1280;        // 0 = datagrams disabled
  uint64_t initial_max_stream_data = 256 * 1024;  // our receive window per stream
};

struct ClientConfig {
  Settings settings;
  std::string server_name;  // SNI / certificate hostname
  std::optional<std::string> ca_file;
  std::optional<Bytes> pinned_cert_sha256;  // self-signed trust: exact match
  Millis handshake_timeout{10000};
  Millis idle_timeout{30000};
};

struct ServerTransportConfig {
  Settings settings;
  std::string cert_pem;
  std::string key_pem;
  Millis idle_timeout{30000};
};

// One bidirectional stream. Reads and writes may be driven from different
// threads; each direction is internally serialized.
class Stream {
 public:
  Stream() = default;

  uint64_t id() const;

  // Blocks on per-stream flow control; throws TransportError when the stream
  // or connection is gone.
  void write(ByteView data, bool fin = false);
  void close_write() { write({}, true); }

  // Blocks until data (returns the count), FIN (returns 0 after the last
  // byte), timeout (returns nullopt), peer reset or connection close
  // (throws). A timeout of nullopt blocks indefinitely.
  std::optional<size_t> read_some(std::span<uint8_t> out,
                                  std::optional<Millis> timeout = std::nullopt);

  // Abruptly terminates both directions with an error code.
  void reset(uint64_t error_code);

  explicit operator bool() const { return state_ != nullptr; }

 private:
  friend class Connection;
  Stream(std::shared_ptr<detail::ConnectionImpl> conn, std::shared_ptr<detail::StreamState> state)
      : conn_(std::move(conn)), state_(std::move(state)) {}

  std::shared_ptr<detail::ConnectionImpl> conn_;
  std::shared_ptr<detail::StreamState> state_;
};

// Causality chain bookkeeping derived from the packet event log: a sent
// packet's depth is 1 + the depth of the newest local packet the peer had
// acknowledged before it was sent. Depth N means the packet rides the N-th
// client->server flight, reaching the peer after (N - 1/2) network RTTs.
struct PacketEvent {
  enum class Dir { Sent, Received };
  Dir dir;
  int space;  // 0 handshake, 1 application
  uint64_t packet_number;
  size_t bytes;
  uint64_t chain_depth;
  bool ack_eliciting;
  bool carries_crypto;
  std::vector<uint64_t> first_data_streams;  // streams whose first byte this packet carries
  std::chrono::steady_clock::time_point at;
};

struct ConnectionStats {
  uint64_t packets_sent = 0;
  uint64_t packets_received = 0;
  uint64_t packets_retransmitted = 0;
  uint64_t datagram_frames_sent = 0;
  uint64_t datagram_frames_received = 0;
};

class Connection {
 public:
  Connection() = default;

  bool is_client() const;
  bool is_established() const;
  bool is_closed() const;

  Stream open_stream();
  // nullopt on timeout; throws on connection close.
  std::optional<Stream> accept_stream(std::optional<Millis> timeout = std::nullopt);

  // Unreliable datagram; throws Config when the peer did not negotiate
  // datagram support or the payload exceeds max_datagram_payload().
  void send_datagram(ByteView payload);
  size_t max_datagram_payload() const;
  // Handler runs on the receive thread; keep it short. Datagrams arriving
  // with no handler installed are dropped.
  void set_datagram_handler(std::function<void(Bytes)> handler);

  // Peer settings become available once its post-handshake SETTINGS frame
  // arrives; blocks up to `timeout`.
  std::optional<Settings> peer_settings(std::optional<Millis> timeout = std::nullopt) const;

  Bytes export_keying_material(std::string_view label, ByteView context, size_t length) const;
  std::optional<Bytes> peer_cert_sha256() const;

  void close(uint64_t error_code, std::string_view reason);
  // Blocks until the peer closes or `timeout` elapses; used by tests.
  bool wait_closed(std::optional<Millis> timeout = std::nullopt) const;

  std::vector<PacketEvent> event_log() const;
  std::optional<uint64_t> first_send_depth(uint64_t stream_id) const;
  uint64_t crypto_send_depth() const;
  ConnectionStats stats() const;

  explicit operator bool() const { return impl_ != nullptr; }

 private:
  friend class Listener;
  friend class detail::ListenerImpl;
  friend Connection connect(const std::string&, uint16_t, const ClientConfig&);
  explicit Connection(std::shared_ptr<detail::ConnectionImpl> impl) : impl_(std::move(impl)) {}

  std::shared_ptr<detail::ConnectionImpl> impl_;
  std::shared_ptr<void> anchor_;  // keeps the client socket/driver thread alive
};

// Dials `host:port`, runs the handshake, exchanges settings, verifies trust
// (CA or pinned fingerprint). Throws TransportError on failure.
Connection connect(const std::string& host, uint16_t port, const ClientConfig& config);

class Listener {
 public:
  // Binds a UDP socket; port 0 picks an ephemeral port.
  Listener(const std::string& bind_addr, uint16_t port, ServerTransportConfig config);
  ~Listener();
  Listener(const Listener&) = delete;
  Listener& operator=(const Listener&) = delete;

  uint16_t port() const;
  // Handshake-complete connections; nullopt on timeout, throws after close().
  std::optional<Connection> accept(std::optional<Millis> timeout = std::nullopt);
  void close();

 private:
  std::shared_ptr<detail::ListenerImpl> impl_;
};

}  // namespace quicshell::transport
