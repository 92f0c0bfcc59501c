// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <condition_variable>
#include <deque>
#include <map>
#include <mutex>
#include <set>
#include <thread>

#include "quicshell/transport.hpp"
#include "transport/frames.hpp"
#include "transport/tls.hpp"

namespace quicshell::transport::detail {

using SteadyTime = std::chrono::steady_clock::time_point;
using SteadyClock = std::chrono::steady_clock;

inline constexpr size_t kMaxUdpPayload = 1350;
inline constexpr size_t kConnIdLen = 8;
inline constexpr size_t kAeadTagLen = 16;
inline constexpr size_t kMaxFrameBytes = 1300;   // payload budget per packet
inline constexpr size_t kMaxStreamChunk = 1250;  // stream bytes per frame
inline constexpr uint64_t kPreSettingsWindow = 64 * 1024;
inline constexpr size_t kMaxInFlightBytes = 1024 * 1024;
inline constexpr size_t kMaxEventLog = 100000;
inline constexpr int kSpaceHandshake = 0;
inline constexpr int kSpaceApp = 1;
inline constexpr uint8_t kPacketHandshake = 0xd0;
inline constexpr uint8_t kPacketApp = 0xd1;
inline constexpr const char* kPacketKeyLabel = "EXPORTER-quicshell-pp";

// Tracks received packet numbers as merged descending ranges.
class RecvRanges {
 public:
  bool contains(uint64_t pn) const;
  void add(uint64_t pn);
  bool empty() const { return ranges_.empty(); }
  AckFrame to_ack() const;

 private:
  std::vector<AckRange> ranges_;  // descending by largest
};

struct SentPacketState {
  std::vector<Frame> retransmit;  // retransmittable frames only
  size_t bytes = 0;
  SteadyTime sent_at{};
  bool ack_eliciting = false;
  bool in_flight = false;
};

struct PnSpace {
  uint64_t next_pn = 0;
  std::map<uint64_t, SentPacketState> sent;
  RecvRanges received;
  bool ack_pending = false;
  uint64_t largest_acked = 0;
  bool any_acked = false;
};

class StreamState {
 public:
  explicit StreamState(uint64_t id) : id(id) {}

  uint64_t id;

  // Receive side: contiguous buffer plus out-of-order segments.
  Bytes in_order;
  size_t read_pos = 0;
  uint64_t recv_base = 0;  // offset of in_order[0] == consumed + buffered start
  std::map<uint64_t, Bytes> out_of_order;
  std::optional<uint64_t> fin_offset;
  uint64_t consumed = 0;
  uint64_t advertised_max = 0;
  uint64_t last_advertised = 0;
  std::optional<uint64_t> peer_reset_code;
  std::condition_variable read_cv;

  // Send side.
  uint64_t send_offset = 0;
  std::optional<uint64_t> peer_max_explicit;
  bool fin_sent = false;
  bool reset_sent = false;
  std::condition_variable write_cv;

};

class ConnectionImpl : public std::enable_shared_from_this<ConnectionImpl> {
 public:
  using SendFn = std::function<void(ByteView)>;

  ConnectionImpl(bool is_client, Bytes conn_id, SendFn send_fn, std::unique_ptr<TlsEngine> tls,
                 Settings local_settings, Millis idle_timeout);
  ~ConnectionImpl();

  // Driven by the owning endpoint (client thread or listener thread).
  void start();
  void handle_datagram(ByteView data);
  void tick(SteadyTime now);
  void fail(TransportError::Kind kind, const std::string& reason);

  bool wait_established(Millis timeout);
  void set_established_callback(std::function<void()> cb);
  const Bytes& conn_id() const { return conn_id_; }

  // Public API backing (see transport.hpp).
  bool is_client() const { return is_client_; }
  bool is_established() const;
  bool is_closed() const;
  std::shared_ptr<StreamState> open_stream();
  std::shared_ptr<StreamState> accept_stream(std::optional<Millis> timeout);
  void send_datagram(ByteView payload);
  size_t max_datagram_payload() const;
  void set_datagram_handler(std::function<void(Bytes)> handler);
  std::optional<Settings> peer_settings(std::optional<Millis> timeout) const;
  Bytes export_keying_material(std::string_view label, ByteView context, size_t length) const;
  std::optional<Bytes> peer_cert_sha256() const;
  void close(uint64_t error_code, std::string_view reason);
  bool wait_closed(std::optional<Millis> timeout) const;
  std::vector<PacketEvent> event_log() const;
  std::optional<uint64_t> first_send_depth(uint64_t stream_id) const;
  uint64_t crypto_send_depth() const;
  ConnectionStats stats() const;

  // Stream operations (serialized on the connection mutex).
  void stream_write(StreamState& st, ByteView data, bool fin);
  std::optional<size_t> stream_read_some(StreamState& st, std::span<uint8_t> out,
                                         std::optional<Millis> timeout);
  void stream_reset(StreamState& st, uint64_t error_code);

 private:
  struct Deferred {
    std::vector<Bytes> datagrams;
    bool established = false;
  };

  void process_packet(int space, uint64_t pn, ByteView payload, Deferred& deferred);
  void process_frame(int space, const Frame& frame, Deferred& deferred);
  void on_crypto(const CryptoFrame& f);
  void drive_tls(ByteView inbound);
  void on_handshake_complete();
  void on_ack(int space, const AckFrame& ack);
  void on_stream_frame(const StreamFrame& f);
  void declare_lost(int space, uint64_t pn, const char* why);

  // Packet emission; callers hold the mutex.
  void send_frames(int space, std::vector<Frame> frames);
  void flush_acks();
  void send_crypto_bytes(ByteView bytes);
  void maybe_extend_stream_window(StreamState& st);
  uint64_t effective_peer_max(const StreamState& st) const;
  void throw_if_dead(const StreamState* st = nullptr) const;
  void close_locked(uint64_t error_code, std::string_view reason, TransportError::Kind kind,
                    bool notify_peer);
  Millis pto_interval() const;
  void record_rtt(std::chrono::nanoseconds sample);

  bool decrypt_packet(ByteView header, uint64_t pn, ByteView ciphertext, Bytes& plaintext);
  Bytes encrypt_packet(ByteView header, uint64_t pn, ByteView plaintext);

  const bool is_client_;
  const Bytes conn_id_;
  const SendFn send_fn_;
  const Settings local_settings_;
  const Millis idle_timeout_;

  mutable std::mutex mutex_;
  std::unique_ptr<TlsEngine> tls_;

  PnSpace spaces_[2];
  Bytes crypto_rx_buffer_;  // contiguous handshake bytes not yet consumed
  uint64_t crypto_rx_offset_ = 0;
  std::map<uint64_t, Bytes> crypto_rx_ooo_;
  uint64_t crypto_tx_offset_ = 0;

  bool established_ = false;
  bool settings_sent_ = false;
  std::optional<Settings> peer_settings_;
  mutable std::condition_variable established_cv_;
  mutable std::condition_variable settings_cv_;

  // AEAD state (derived from the TLS exporter once the handshake is done).
  Bytes tx_key_, tx_iv_, rx_key_, rx_iv_;
  bool app_keys_ready_ = false;

  std::map<uint64_t, std::shared_ptr<StreamState>> streams_;
  std::set<uint64_t> retired_streams_;
  uint64_t next_stream_id_;
  std::deque<std::shared_ptr<StreamState>> accept_queue_;
  std::condition_variable accept_cv_;

  std::function<void(Bytes)> datagram_handler_;
  std::function<void()> established_cb_;

  size_t bytes_in_flight_ = 0;
  std::condition_variable send_cv_;

  // RTT estimation.
  std::chrono::nanoseconds srtt_{std::chrono::milliseconds(333)};
  std::chrono::nanoseconds rttvar_{std::chrono::milliseconds(166)};
  bool rtt_sampled_ = false;
  int pto_backoff_ = 0;

  SteadyTime last_recv_;
  SteadyTime last_send_;

  bool closed_ = false;
  bool close_frame_sent_ = false;
  TransportError::Kind close_kind_ = TransportError::Kind::Closed;
  uint64_t close_code_ = 0;
  std::string close_reason_;
  bool closed_by_peer_ = false;
  mutable std::condition_variable closed_cv_;

  // Causality chain accounting.
  uint64_t peer_progress_ = 0;
  std::map<std::pair<int, uint64_t>, uint64_t> sent_depth_;
  std::map<uint64_t, uint64_t> first_send_depth_;
  uint64_t crypto_send_depth_ = 0;
  std::vector<PacketEvent> events_;
  ConnectionStats stats_;

  Bytes peer_cert_der_;
};

}  // namespace quicshell::transport::detail
