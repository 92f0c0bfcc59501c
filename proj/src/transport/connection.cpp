// SPDX-License-Identifier: Apache-2.0
#include "transport/connection.hpp"

#include <openssl/evp.h>

#include <fmt/format.h>

#include <algorithm>
#include <cstring>

#include "quicshell/keys.hpp"
#include "quicshell/log.hpp"
#include "quicshell/wire.hpp"

namespace quicshell::transport::detail {

using wire::decode_varint;
using wire::encode_varint;

// --- RecvRanges -----------------------------------------------------------

bool RecvRanges::contains(uint64_t pn) const {
  for (const auto& r : ranges_)
    if (pn <= r.largest && pn + r.count > r.largest) return true;
  return false;
}

void RecvRanges::add(uint64_t pn) {
  // Insert keeping descending order, then merge neighbours.
  auto it = ranges_.begin();
  while (it != ranges_.end() && it->largest > pn) ++it;
  if (it != ranges_.end() && pn <= it->largest && pn + it->count > it->largest) return;  // dup
  ranges_.insert(it, AckRange{pn, 1});
  // Merge adjacent/overlapping ranges.
  for (size_t i = 0; i + 1 < ranges_.size();) {
    AckRange& hi = ranges_[i];
    AckRange& lo = ranges_[i + 1];
    uint64_t hi_smallest = hi.largest - hi.count + 1;
    if (lo.largest + 1 >= hi_smallest) {
      uint64_t lo_smallest = lo.largest - lo.count + 1;
      uint64_t new_smallest = std::min(lo_smallest, hi_smallest);
      hi.count = hi.largest - new_smallest + 1;
      ranges_.erase(ranges_.begin() + static_cast<long>(i) + 1);
    } else {
      i++;
    }
  }
  if (ranges_.size() > 64) ranges_.resize(64);  // forget oldest history
}

AckFrame RecvRanges::to_ack() const {
  AckFrame ack;
  ack.ranges.assign(ranges_.begin(),
                    ranges_.begin() + static_cast<long>(std::min<size_t>(ranges_.size(), 32)));
  return ack;
}

// --- construction -----------------------------------------------------------

ConnectionImpl::ConnectionImpl(bool is_client, Bytes conn_id, SendFn send_fn,
                               std::unique_ptr<TlsEngine> tls, Settings local_settings,
                               Millis idle_timeout)
    : is_client_(is_client),
      conn_id_(std::move(conn_id)),
      send_fn_(std::move(send_fn)),
      local_settings_(local_settings),
      idle_timeout_(idle_timeout),
      tls_(std::move(tls)),
      next_stream_id_(is_client ? 0 : 1) {
  last_recv_ = SteadyClock::now();
  last_send_ = last_recv_;
}

ConnectionImpl::~ConnectionImpl() = default;

void ConnectionImpl::start() {
  std::unique_lock lock(mutex_);
  if (is_client_) drive_tls({});
}

// --- crypto ------------------------------------------------------------------

Bytes ConnectionImpl::encrypt_packet(ByteView header, uint64_t pn, ByteView plaintext) {
  Bytes nonce = tx_iv_;
  for (int i = 0; i < 8; i++) nonce[nonce.size() - 1 - i] ^= static_cast<uint8_t>(pn >> (8 * i));
  Bytes out(plaintext.size() + kAeadTagLen);
  EVP_CIPHER_CTX* ctx = EVP_CIPHER_CTX_new();
  int len = 0;
  int ok = EVP_EncryptInit_ex(ctx, EVP_aes_128_gcm(), nullptr, tx_key_.data(), nonce.data()) &&
           EVP_EncryptUpdate(ctx, nullptr, &len, header.data(), static_cast<int>(header.size())) &&
           EVP_EncryptUpdate(ctx, out.data(), &len, plaintext.data(),
                             static_cast<int>(plaintext.size()));
  int total = len;
  ok = ok && EVP_EncryptFinal_ex(ctx, out.data() + total, &len);
  total += len;
  ok = ok && EVP_CIPHER_CTX_ctrl(ctx, EVP_CTRL_GCM_GET_TAG, kAeadTagLen,
                                 out.data() + plaintext.size());
  EVP_CIPHER_CTX_free(ctx);
  if (!ok) throw TransportError(TransportError::Kind::Tls, "packet encryption failed");
  return out;
}

bool ConnectionImpl::decrypt_packet(ByteView header, uint64_t pn, ByteView ciphertext,
                                    Bytes& plaintext) {
  if (ciphertext.size() < kAeadTagLen) return false;
  Bytes nonce = rx_iv_;
  for (int i = 0; i < 8; i++) nonce[nonce.size() - 1 - i] ^= static_cast<uint8_t>(pn >> (8 * i));
  size_t body_len = ciphertext.size() - kAeadTagLen;
  plaintext.resize(body_len);
  EVP_CIPHER_CTX* ctx = EVP_CIPHER_CTX_new();
  int len = 0;
  Bytes tag(ciphertext.begin() + static_cast<long>(body_len), ciphertext.end());
  int ok = EVP_DecryptInit_ex(ctx, EVP_aes_128_gcm(), nullptr, rx_key_.data(), nonce.data()) &&
           EVP_DecryptUpdate(ctx, nullptr, &len, header.data(), static_cast<int>(header.size())) &&
           EVP_DecryptUpdate(ctx, plaintext.data(), &len, ciphertext.data(),
                             static_cast<int>(body_len)) &&
           EVP_CIPHER_CTX_ctrl(ctx, EVP_CTRL_GCM_SET_TAG, kAeadTagLen, tag.data()) &&
           EVP_DecryptFinal_ex(ctx, plaintext.data() + len, &len) == 1;
  EVP_CIPHER_CTX_free(ctx);
  return ok == 1;
}

// --- TLS driving ----------------------------------------------------------------

void ConnectionImpl::drive_tls(ByteView inbound) {
  Bytes out;
  try {
    out = tls_->advance(inbound);
  } catch (const std::exception& e) {
    close_locked(errc::kProtocol, e.what(), TransportError::Kind::Tls, true);
    return;
  }
  if (!out.empty()) send_crypto_bytes(out);
  if (tls_->handshake_done() && !established_) on_handshake_complete();
}

void ConnectionImpl::send_crypto_bytes(ByteView bytes) {
  size_t pos = 0;
  while (pos < bytes.size()) {
    size_t chunk = std::min<size_t>(bytes.size() - pos, 1200);
    CryptoFrame f;
    f.offset = crypto_tx_offset_;
    f.data.assign(bytes.begin() + static_cast<long>(pos),
                  bytes.begin() + static_cast<long>(pos + chunk));
    crypto_tx_offset_ += chunk;
    pos += chunk;
    send_frames(kSpaceHandshake, {Frame{std::move(f)}});
  }
}

void ConnectionImpl::on_handshake_complete() {
  established_ = true;
  peer_cert_der_ = tls_->peer_cert_der();

  Bytes material = tls_->export_keying_material(kPacketKeyLabel, {}, 56);
  Bytes client_key(material.begin(), material.begin() + 16);
  Bytes client_iv(material.begin() + 16, material.begin() + 28);
  Bytes server_key(material.begin() + 28, material.begin() + 44);
  Bytes server_iv(material.begin() + 44, material.begin() + 56);
  if (is_client_) {
    tx_key_ = client_key;
    tx_iv_ = client_iv;
    rx_key_ = server_key;
    rx_iv_ = server_iv;
  } else {
    tx_key_ = server_key;
    tx_iv_ = server_iv;
    rx_key_ = client_key;
    rx_iv_ = client_iv;
  }
  app_keys_ready_ = true;

  SettingsFrame settings;
  settings.values[kSettingEnableConnect] = local_settings_.enable_connect_protocol ? 1 : 0;
  settings.values[kSettingMaxDatagramFrameSize] = local_settings_.max_datagram_frame_size;
  settings.values[kSettingInitialMaxStreamData] = local_settings_.initial_max_stream_data;
  send_frames(kSpaceApp, {Frame{std::move(settings)}});
  settings_sent_ = true;

  established_cv_.notify_all();
}

// --- packet emission --------------------------------------------------------------

void ConnectionImpl::send_frames(int space, std::vector<Frame> frames) {
  if (space == kSpaceApp && !app_keys_ready_)
    throw TransportError(TransportError::Kind::Protocol, "application keys not ready");

  // Opportunistically carry pending ACKs of the same space.
  if (spaces_[space].ack_pending && !spaces_[space].received.empty()) {
    frames.insert(frames.begin(), Frame{spaces_[space].received.to_ack()});
    spaces_[space].ack_pending = false;
  }

  // Greedy-pack frames into packets within the payload budget.
  size_t i = 0;
  while (i < frames.size()) {
    std::vector<Frame> packet_frames;
    size_t used = 0;
    while (i < frames.size()) {
      size_t sz = frame_encoded_size(frames[i]);
      if (!packet_frames.empty() && used + sz > kMaxFrameBytes) break;
      used += sz;
      packet_frames.push_back(std::move(frames[i]));
      i++;
    }

    PnSpace& pns = spaces_[space];
    uint64_t pn = pns.next_pn++;

    Bytes payload;
    payload.reserve(used);
    bool ack_eliciting = false;
    bool carries_crypto = false;
    std::vector<uint64_t> first_data_streams;
    std::vector<Frame> retransmit;
    for (auto& f : packet_frames) {
      encode_frame(payload, f);
      ack_eliciting |= is_ack_eliciting(f);
      if (std::holds_alternative<CryptoFrame>(f)) carries_crypto = true;
      if (const auto* sf = std::get_if<StreamFrame>(&f)) {
        if (!first_send_depth_.count(sf->stream_id) && sf->offset == 0 && !sf->data.empty())
          first_data_streams.push_back(sf->stream_id);
      }
      if (is_retransmittable(f)) retransmit.push_back(std::move(f));
    }

    Bytes header;
    header.push_back(space == kSpaceHandshake ? kPacketHandshake : kPacketApp);
    append(header, ByteView(conn_id_));
    encode_varint(header, pn);

    Bytes body;
    if (space == kSpaceApp) {
      body = encrypt_packet(header, pn, payload);  // header-so-far is the AAD
    } else {
      body = payload;
    }
    encode_varint(header, body.size());
    Bytes datagram = header;
    append(datagram, ByteView(body));

    uint64_t depth = peer_progress_ + 1;
    sent_depth_[{space, pn}] = depth;
    if (carries_crypto) crypto_send_depth_ = std::max(crypto_send_depth_, depth);
    for (uint64_t sid : first_data_streams) first_send_depth_.emplace(sid, depth);

    SentPacketState st;
    st.bytes = datagram.size();
    st.ack_eliciting = ack_eliciting;
    st.in_flight = !retransmit.empty();
    st.sent_at = SteadyClock::now();
    st.retransmit = std::move(retransmit);
    if (st.in_flight) bytes_in_flight_ += st.bytes;
    if (ack_eliciting || st.in_flight) pns.sent.emplace(pn, std::move(st));

    if (events_.size() < kMaxEventLog)
      events_.push_back(PacketEvent{PacketEvent::Dir::Sent, space, pn, datagram.size(), depth,
                                    ack_eliciting, carries_crypto, first_data_streams,
                                    SteadyClock::now()});
    stats_.packets_sent++;
    last_send_ = SteadyClock::now();
    send_fn_(datagram);
  }

  // Prune chain bookkeeping.
  if (sent_depth_.size() > 200000) {
    uint64_t floor_pn =
        spaces_[kSpaceApp].any_acked ? spaces_[kSpaceApp].largest_acked : 0;
    std::erase_if(sent_depth_, [&](const auto& kv) {
      return kv.first.first == kSpaceApp && kv.first.second + 1 < floor_pn;
    });
  }
}

void ConnectionImpl::flush_acks() {
  for (int space = 0; space < 2; space++) {
    if (!spaces_[space].ack_pending || spaces_[space].received.empty()) continue;
    if (space == kSpaceApp && !app_keys_ready_) continue;
    std::vector<Frame> frames{Frame{spaces_[space].received.to_ack()}};
    spaces_[space].ack_pending = false;
    send_frames(space, std::move(frames));
  }
}

// --- inbound path ---------------------------------------------------------------------

void ConnectionImpl::handle_datagram(ByteView data) {
  Deferred deferred;
  {
    std::unique_lock lock(mutex_);
    if (closed_) return;
    last_recv_ = SteadyClock::now();

    size_t pos = 0;
    while (pos < data.size()) {
      if (data.size() - pos < 1 + kConnIdLen) break;
      uint8_t type = data[pos];
      if (type != kPacketHandshake && type != kPacketApp) break;
      size_t header_start = pos;
      pos += 1 + kConnIdLen;
      auto pn_dec = decode_varint(data.subspan(pos));
      if (!pn_dec) break;
      pos += pn_dec.consumed;
      size_t aad_end = pos;  // AAD covers type..packet number
      auto len_dec = decode_varint(data.subspan(pos));
      if (!len_dec) break;
      pos += len_dec.consumed;
      if (len_dec.value > data.size() - pos) break;
      ByteView body = data.subspan(pos, len_dec.value);
      pos += len_dec.value;

      int space = type == kPacketHandshake ? kSpaceHandshake : kSpaceApp;
      uint64_t pn = pn_dec.value;
      ByteView aad = data.subspan(header_start, aad_end - header_start);

      if (space == kSpaceApp) {
        if (!app_keys_ready_) continue;  // reordered ahead of the handshake; peer retransmits
        Bytes plaintext;
        if (!decrypt_packet(aad, pn, body, plaintext)) {
          log::debug("dropping undecryptable packet pn={}", pn);
          continue;
        }
        process_packet(space, pn, plaintext, deferred);
      } else {
        process_packet(space, pn, body, deferred);
      }
      if (closed_) break;
    }

    if (!closed_) flush_acks();
  }

  std::function<void()> established_cb;
  std::function<void(Bytes)> handler;
  {
    std::unique_lock lock(mutex_);
    if (deferred.established) established_cb = established_cb_;
    if (!deferred.datagrams.empty()) handler = datagram_handler_;
  }
  if (established_cb) established_cb();
  if (handler)
    for (auto& d : deferred.datagrams) handler(std::move(d));
}

void ConnectionImpl::process_packet(int space, uint64_t pn, ByteView payload,
                                    Deferred& deferred) {
  PnSpace& pns = spaces_[space];
  bool established_before = established_;

  if (pns.received.contains(pn)) {
    // Duplicate: re-ack (our ACK may have been lost) but process nothing.
    pns.ack_pending = true;
    return;
  }

  auto frames = parse_frames(payload);
  if (!frames) {
    close_locked(errc::kProtocol, "malformed frame payload", TransportError::Kind::Protocol,
                 true);
    return;
  }

  pns.received.add(pn);
  if (events_.size() < kMaxEventLog)
    events_.push_back(PacketEvent{PacketEvent::Dir::Received, space, pn, payload.size(),
                                  peer_progress_, false, false, {}, SteadyClock::now()});
  stats_.packets_received++;

  bool ack_eliciting = false;
  for (const auto& f : *frames) ack_eliciting |= is_ack_eliciting(f);
  if (ack_eliciting) pns.ack_pending = true;

  for (const auto& f : *frames) {
    if (space == kSpaceHandshake &&
        !(std::holds_alternative<CryptoFrame>(f) || std::holds_alternative<AckFrame>(f) ||
          std::holds_alternative<CloseFrame>(f))) {
      close_locked(errc::kProtocol, "illegal frame in handshake packet",
                   TransportError::Kind::Protocol, true);
      return;
    }
    process_frame(space, f, deferred);
    if (closed_) return;
  }
  if (!established_before && established_) deferred.established = true;
}

void ConnectionImpl::process_frame(int space, const Frame& frame, Deferred& deferred) {
  std::visit(
      [&](const auto& f) {
        using T = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<T, PingFrame>) {
          // ack-eliciting by nature; nothing else to do
        } else if constexpr (std::is_same_v<T, AckFrame>) {
          on_ack(space, f);
        } else if constexpr (std::is_same_v<T, CryptoFrame>) {
          on_crypto(f);
        } else if constexpr (std::is_same_v<T, SettingsFrame>) {
          Settings s;
          auto get = [&](uint64_t id, uint64_t fallback) {
            auto it = f.values.find(id);
            return it == f.values.end() ? fallback : it->second;
          };
          s.enable_connect_protocol = get(kSettingEnableConnect, 0) != 0;
          s.max_datagram_frame_size = get(kSettingMaxDatagramFrameSize, 0);
          s.initial_max_stream_data = get(kSettingInitialMaxStreamData, kPreSettingsWindow);
          peer_settings_ = s;
          settings_cv_.notify_all();
          for (auto& [id, st] : streams_) st->write_cv.notify_all();
          send_cv_.notify_all();
        } else if constexpr (std::is_same_v<T, StreamFrame>) {
          on_stream_frame(f);
        } else if constexpr (std::is_same_v<T, MaxStreamDataFrame>) {
          auto it = streams_.find(f.stream_id);
          if (it != streams_.end()) {
            auto& st = *it->second;
            uint64_t cur = effective_peer_max(st);
            if (f.max_offset > cur) {
              st.peer_max_explicit = f.max_offset;
              st.write_cv.notify_all();
              send_cv_.notify_all();
            }
          }
        } else if constexpr (std::is_same_v<T, ResetStreamFrame>) {
          auto it = streams_.find(f.stream_id);
          if (it != streams_.end()) {
            it->second->peer_reset_code = f.error_code;
            it->second->read_cv.notify_all();
            it->second->write_cv.notify_all();
          } else if (!retired_streams_.count(f.stream_id)) {
            // Reset for a stream we never saw: remember it as retired.
            retired_streams_.insert(f.stream_id);
          }
        } else if constexpr (std::is_same_v<T, CloseFrame>) {
          closed_by_peer_ = true;
          close_locked(f.error_code, f.reason, TransportError::Kind::Closed, false);
        } else if constexpr (std::is_same_v<T, DatagramFrame>) {
          stats_.datagram_frames_received++;
          deferred.datagrams.push_back(f.payload);
        }
      },
      frame);
}

void ConnectionImpl::on_crypto(const CryptoFrame& f) {
  uint64_t end = f.offset + f.data.size();
  uint64_t contig = crypto_rx_offset_ + crypto_rx_buffer_.size();
  if (end <= contig) return;  // old news
  if (f.offset > contig) {
    crypto_rx_ooo_[f.offset] = f.data;
    return;
  }
  append(crypto_rx_buffer_, ByteView(f.data).subspan(contig - f.offset));
  // Drain any out-of-order pieces that became contiguous.
  bool progressed = true;
  while (progressed) {
    progressed = false;
    contig = crypto_rx_offset_ + crypto_rx_buffer_.size();
    for (auto it = crypto_rx_ooo_.begin(); it != crypto_rx_ooo_.end();) {
      uint64_t seg_end = it->first + it->second.size();
      if (seg_end <= contig) {
        it = crypto_rx_ooo_.erase(it);
      } else if (it->first <= contig) {
        append(crypto_rx_buffer_, ByteView(it->second).subspan(contig - it->first));
        it = crypto_rx_ooo_.erase(it);
        progressed = true;
        break;
      } else {
        ++it;
      }
    }
  }

  Bytes input = std::move(crypto_rx_buffer_);
  crypto_rx_buffer_.clear();
  crypto_rx_offset_ += input.size();
  drive_tls(input);
}

void ConnectionImpl::on_ack(int space, const AckFrame& ack) {
  PnSpace& pns = spaces_[space];
  uint64_t largest = ack.largest();

  // Causality chain: the peer has seen our packet `largest`.
  auto depth_it = sent_depth_.find({space, largest});
  if (depth_it != sent_depth_.end())
    peer_progress_ = std::max(peer_progress_, depth_it->second);

  bool progress = false;
  for (const auto& range : ack.ranges) {
    uint64_t lo = range.largest - range.count + 1;
    for (auto it = pns.sent.lower_bound(lo); it != pns.sent.end() && it->first <= range.largest;) {
      const SentPacketState& st = it->second;
      if (it->first == largest && st.ack_eliciting)
        record_rtt(SteadyClock::now() - st.sent_at);
      if (st.in_flight) bytes_in_flight_ -= std::min(bytes_in_flight_, st.bytes);
      it = pns.sent.erase(it);
      progress = true;
    }
  }
  if (largest > pns.largest_acked || !pns.any_acked) {
    pns.largest_acked = std::max(pns.largest_acked, largest);
    pns.any_acked = true;
  }
  if (progress) {
    pto_backoff_ = 0;
    send_cv_.notify_all();
    for (auto& [id, st] : streams_) st->write_cv.notify_all();
  }

  // Packet-threshold loss detection: anything 3 below the largest
  // acknowledged packet is declared lost.
  if (pns.any_acked && pns.largest_acked >= 3) {
    uint64_t cutoff = pns.largest_acked - 3;
    std::vector<uint64_t> lost;
    for (auto& [pn, st] : pns.sent)
      if (pn <= cutoff) lost.push_back(pn);
    for (uint64_t pn : lost) declare_lost(space, pn, "reorder threshold");
  }
}

void ConnectionImpl::declare_lost(int space, uint64_t pn, const char* why) {
  PnSpace& pns = spaces_[space];
  auto it = pns.sent.find(pn);
  if (it == pns.sent.end()) return;
  SentPacketState st = std::move(it->second);
  pns.sent.erase(it);
  if (st.in_flight) bytes_in_flight_ -= std::min(bytes_in_flight_, st.bytes);
  if (st.retransmit.empty()) return;

  log::debug("retransmitting packet space={} pn={} ({})", space, pn, why);
  stats_.packets_retransmitted++;

  std::vector<Frame> frames;
  for (auto& f : st.retransmit) {
    if (const auto* msd = std::get_if<MaxStreamDataFrame>(&f)) {
      // Regenerate with the current limit instead of replaying a stale one.
      auto sit = streams_.find(msd->stream_id);
      if (sit == streams_.end()) continue;
      frames.push_back(MaxStreamDataFrame{msd->stream_id, sit->second->advertised_max});
      continue;
    }
    if (const auto* sf = std::get_if<StreamFrame>(&f)) {
      auto sit = streams_.find(sf->stream_id);
      if (sit != streams_.end() && sit->second->peer_reset_code) continue;  // moot
    }
    frames.push_back(std::move(f));
  }
  if (!frames.empty()) send_frames(space, std::move(frames));
}

// --- streams ----------------------------------------------------------------------

void ConnectionImpl::on_stream_frame(const StreamFrame& f) {
  if (retired_streams_.count(f.stream_id)) return;

  auto it = streams_.find(f.stream_id);
  std::shared_ptr<StreamState> st;
  if (it != streams_.end()) {
    st = it->second;
  } else {
    bool peer_initiated = is_client_ ? (f.stream_id % 2 == 1) : (f.stream_id % 2 == 0);
    if (!peer_initiated) return;  // data for a local stream we never opened: stale
    if (streams_.size() > 1024) {
      close_locked(errc::kProtocol, "too many concurrent streams",
                   TransportError::Kind::Protocol, true);
      return;
    }
    st = std::make_shared<StreamState>(f.stream_id);
    st->advertised_max = local_settings_.initial_max_stream_data;
    st->last_advertised = st->advertised_max;
    streams_.emplace(f.stream_id, st);
    accept_queue_.push_back(st);
    accept_cv_.notify_one();
  }

  uint64_t end = f.offset + f.data.size();
  if (end > st->advertised_max) {
    close_locked(errc::kProtocol, "stream flow control violated",
                 TransportError::Kind::Protocol, true);
    return;
  }
  if (f.fin) {
    if (st->fin_offset && *st->fin_offset != end) {
      close_locked(errc::kProtocol, "inconsistent stream FIN offset",
                   TransportError::Kind::Protocol, true);
      return;
    }
    st->fin_offset = end;
  }

  uint64_t contig = st->recv_base + st->in_order.size();
  if (end > contig) {
    if (f.offset <= contig) {
      append(st->in_order, ByteView(f.data).subspan(contig - f.offset));
    } else {
      st->out_of_order[f.offset] = f.data;
    }
    // Drain out-of-order segments that became contiguous.
    bool progressed = true;
    while (progressed) {
      progressed = false;
      contig = st->recv_base + st->in_order.size();
      for (auto oit = st->out_of_order.begin(); oit != st->out_of_order.end();) {
        uint64_t seg_end = oit->first + oit->second.size();
        if (seg_end <= contig) {
          oit = st->out_of_order.erase(oit);
        } else if (oit->first <= contig) {
          append(st->in_order, ByteView(oit->second).subspan(contig - oit->first));
          oit = st->out_of_order.erase(oit);
          progressed = true;
          break;
        } else {
          ++oit;
        }
      }
    }
  }
  st->read_cv.notify_all();
}

uint64_t ConnectionImpl::effective_peer_max(const StreamState& st) const {
  uint64_t base = peer_settings_ ? peer_settings_->initial_max_stream_data : kPreSettingsWindow;
  return std::max(base, st.peer_max_explicit.value_or(0));
}

void ConnectionImpl::throw_if_dead(const StreamState* st) const {
  if (closed_) {
    throw TransportError(close_kind_,
                         fmt::format("connection closed ({}): {}", close_code_, close_reason_),
                         close_code_);
  }
  if (st && st->peer_reset_code)
    throw TransportError(TransportError::Kind::Reset,
                         fmt::format("stream reset by peer: {}", errc_name(*st->peer_reset_code)),
                         *st->peer_reset_code);
}

std::shared_ptr<StreamState> ConnectionImpl::open_stream() {
  std::unique_lock lock(mutex_);
  throw_if_dead();
  if (!established_)
    throw TransportError(TransportError::Kind::Protocol, "connection not established");
  uint64_t id = next_stream_id_;
  next_stream_id_ += 2;
  auto st = std::make_shared<StreamState>(id);
  st->advertised_max = local_settings_.initial_max_stream_data;
  st->last_advertised = st->advertised_max;
  streams_.emplace(id, st);
  return st;
}

std::shared_ptr<StreamState> ConnectionImpl::accept_stream(std::optional<Millis> timeout) {
  std::unique_lock lock(mutex_);
  auto ready = [&] { return closed_ || !accept_queue_.empty(); };
  if (timeout) {
    if (!accept_cv_.wait_for(lock, *timeout, ready)) return nullptr;
  } else {
    accept_cv_.wait(lock, ready);
  }
  if (!accept_queue_.empty()) {
    auto st = accept_queue_.front();
    accept_queue_.pop_front();
    return st;
  }
  throw_if_dead();
  return nullptr;
}

void ConnectionImpl::stream_write(StreamState& st, ByteView data, bool fin) {
  std::unique_lock lock(mutex_);
  size_t pos = 0;
  bool need_fin = fin;
  while (pos < data.size() || need_fin) {
    throw_if_dead(&st);
    if (st.fin_sent)
      throw TransportError(TransportError::Kind::Protocol, "write after FIN");
    if (st.reset_sent)
      throw TransportError(TransportError::Kind::Reset, "write after reset", errc::kNone);

    uint64_t window = effective_peer_max(st);
    uint64_t available = window > st.send_offset ? window - st.send_offset : 0;
    size_t remaining = data.size() - pos;
    size_t chunk = static_cast<size_t>(std::min<uint64_t>({available, remaining, kMaxStreamChunk}));

    if (remaining > 0 && (chunk == 0 || bytes_in_flight_ > kMaxInFlightBytes)) {
      st.write_cv.wait_for(lock, Millis(50));
      continue;
    }

    StreamFrame f;
    f.stream_id = st.id;
    f.offset = st.send_offset;
    f.data.assign(data.begin() + static_cast<long>(pos),
                  data.begin() + static_cast<long>(pos + chunk));
    f.fin = need_fin && pos + chunk == data.size();
    st.send_offset += chunk;
    pos += chunk;
    if (f.fin) {
      st.fin_sent = true;
      need_fin = false;
    }
    send_frames(kSpaceApp, {Frame{std::move(f)}});
  }
}

std::optional<size_t> ConnectionImpl::stream_read_some(StreamState& st, std::span<uint8_t> out,
                                                       std::optional<Millis> timeout) {
  std::unique_lock lock(mutex_);
  auto deadline = timeout ? std::optional(SteadyClock::now() + *timeout) : std::nullopt;
  for (;;) {
    size_t available = st.in_order.size() - st.read_pos;
    if (available > 0) {
      size_t n = std::min(available, out.size());
      std::memcpy(out.data(), st.in_order.data() + st.read_pos, n);
      st.read_pos += n;
      st.consumed += n;
      if (st.read_pos == st.in_order.size()) {
        st.recv_base += st.in_order.size();
        st.in_order.clear();
        st.read_pos = 0;
      }
      maybe_extend_stream_window(st);
      return n;
    }
    if (st.fin_offset && st.consumed >= *st.fin_offset) return size_t{0};  // clean end
    throw_if_dead(&st);
    if (deadline) {
      if (SteadyClock::now() >= *deadline) return std::nullopt;
      st.read_cv.wait_until(lock, *deadline);
    } else {
      st.read_cv.wait(lock);
    }
  }
}

void ConnectionImpl::maybe_extend_stream_window(StreamState& st) {
  uint64_t window = local_settings_.initial_max_stream_data;
  uint64_t target = st.consumed + window;
  if (target > st.advertised_max && target - st.last_advertised >= window / 2) {
    st.advertised_max = target;
    st.last_advertised = target;
    if (app_keys_ready_ && !closed_)
      send_frames(kSpaceApp, {Frame{MaxStreamDataFrame{st.id, target}}});
  }
}

void ConnectionImpl::stream_reset(StreamState& st, uint64_t error_code) {
  std::unique_lock lock(mutex_);
  if (closed_ || st.reset_sent) return;
  st.reset_sent = true;
  st.fin_sent = true;
  send_frames(kSpaceApp, {Frame{ResetStreamFrame{st.id, error_code}}});
  st.read_cv.notify_all();
  st.write_cv.notify_all();
}

// --- datagrams -----------------------------------------------------------------------

size_t ConnectionImpl::max_datagram_payload() const {
  uint64_t local = local_settings_.max_datagram_frame_size;
  uint64_t peer = peer_settings_ ? peer_settings_->max_datagram_frame_size : local;
  uint64_t cap = std::min<uint64_t>({local, peer, kMaxFrameBytes - 8});
  return static_cast<size_t>(cap);
}

void ConnectionImpl::send_datagram(ByteView payload) {
  std::unique_lock lock(mutex_);
  throw_if_dead();
  if (local_settings_.max_datagram_frame_size == 0 ||
      (peer_settings_ && peer_settings_->max_datagram_frame_size == 0))
    throw TransportError(TransportError::Kind::Config, "datagrams not negotiated");
  if (payload.size() > max_datagram_payload())
    throw TransportError(TransportError::Kind::Config,
                         fmt::format("datagram payload {} exceeds capacity {}", payload.size(),
                                     max_datagram_payload()));
  DatagramFrame f;
  f.payload.assign(payload.begin(), payload.end());
  stats_.datagram_frames_sent++;
  send_frames(kSpaceApp, {Frame{std::move(f)}});
}

void ConnectionImpl::set_datagram_handler(std::function<void(Bytes)> handler) {
  std::unique_lock lock(mutex_);
  datagram_handler_ = std::move(handler);
}

// --- lifecycle ------------------------------------------------------------------------

bool ConnectionImpl::is_established() const {
  std::unique_lock lock(mutex_);
  return established_ && !closed_;
}

bool ConnectionImpl::is_closed() const {
  std::unique_lock lock(mutex_);
  return closed_;
}

bool ConnectionImpl::wait_established(Millis timeout) {
  std::unique_lock lock(mutex_);
  established_cv_.wait_for(lock, timeout, [&] { return established_ || closed_; });
  if (closed_)
    throw TransportError(close_kind_, close_reason_.empty() ? "connection failed" : close_reason_,
                         close_code_);
  return established_;
}

void ConnectionImpl::set_established_callback(std::function<void()> cb) {
  std::unique_lock lock(mutex_);
  established_cb_ = std::move(cb);
  if (established_ && established_cb_) {
    auto copy = established_cb_;
    lock.unlock();
    copy();
  }
}

std::optional<Settings> ConnectionImpl::peer_settings(std::optional<Millis> timeout) const {
  std::unique_lock lock(mutex_);
  if (timeout)
    settings_cv_.wait_for(lock, *timeout, [&] { return peer_settings_.has_value() || closed_; });
  return peer_settings_;
}

Bytes ConnectionImpl::export_keying_material(std::string_view label, ByteView context,
                                             size_t length) const {
  std::unique_lock lock(mutex_);
  return tls_->export_keying_material(label, context, length);
}

std::optional<Bytes> ConnectionImpl::peer_cert_sha256() const {
  std::unique_lock lock(mutex_);
  if (peer_cert_der_.empty()) return std::nullopt;
  return keys::sha256(peer_cert_der_);
}

void ConnectionImpl::close(uint64_t error_code, std::string_view reason) {
  std::unique_lock lock(mutex_);
  close_locked(error_code, reason, TransportError::Kind::Closed, true);
}

void ConnectionImpl::close_locked(uint64_t error_code, std::string_view reason,
                                  TransportError::Kind kind, bool notify_peer) {
  if (closed_) return;
  closed_ = true;
  close_kind_ = kind;
  close_code_ = error_code;
  close_reason_ = std::string(reason);
  if (notify_peer && !close_frame_sent_) {
    close_frame_sent_ = true;
    int space = app_keys_ready_ ? kSpaceApp : kSpaceHandshake;
    try {
      send_frames(space, {Frame{CloseFrame{error_code, std::string(reason)}}});
    } catch (...) {
    }
  }
  established_cv_.notify_all();
  settings_cv_.notify_all();
  accept_cv_.notify_all();
  send_cv_.notify_all();
  closed_cv_.notify_all();
  for (auto& [id, st] : streams_) {
    st->read_cv.notify_all();
    st->write_cv.notify_all();
  }
}

void ConnectionImpl::fail(TransportError::Kind kind, const std::string& reason) {
  std::unique_lock lock(mutex_);
  close_locked(errc::kInternal, reason, kind, false);
}

bool ConnectionImpl::wait_closed(std::optional<Millis> timeout) const {
  std::unique_lock lock(mutex_);
  if (timeout) return closed_cv_.wait_for(lock, *timeout, [&] { return closed_; });
  closed_cv_.wait(lock, [&] { return closed_; });
  return true;
}

// --- timers --------------------------------------------------------------------------

Millis ConnectionImpl::pto_interval() const {
  auto pto = srtt_ + 4 * rttvar_ + std::chrono::milliseconds(10);
  auto ms = std::chrono::duration_cast<Millis>(pto);
  return std::max(ms, Millis(30));
}

void ConnectionImpl::record_rtt(std::chrono::nanoseconds sample) {
  if (!rtt_sampled_) {
    srtt_ = sample;
    rttvar_ = sample / 2;
    rtt_sampled_ = true;
    return;
  }
  auto diff = srtt_ > sample ? srtt_ - sample : sample - srtt_;
  rttvar_ = (3 * rttvar_ + diff) / 4;
  srtt_ = (7 * srtt_ + sample) / 8;
}

void ConnectionImpl::tick(SteadyTime now) {
  std::unique_lock lock(mutex_);
  if (closed_) return;

  // Probe timeout: declare stale in-flight packets lost and retransmit.
  Millis pto = pto_interval() * (1 << std::min(pto_backoff_, 6));
  bool probe_fired = false;
  for (int space = 0; space < 2; space++) {
    std::vector<uint64_t> stale;
    for (auto& [pn, st] : spaces_[space].sent) {
      if (st.in_flight && now - st.sent_at > pto) {
        stale.push_back(pn);
        probe_fired = true;
      } else if (!st.in_flight && now - st.sent_at > Millis(3000)) {
        stale.push_back(pn);
      }
    }
    for (uint64_t pn : stale) declare_lost(space, pn, "probe timeout");
  }
  if (probe_fired) pto_backoff_++;
  if (pto_backoff_ > 10) {
    close_locked(errc::kInternal, "transport timeout: too many retransmissions",
                 TransportError::Kind::Timeout, false);
    return;
  }

  // Idle timeout.
  if (now - last_recv_ > idle_timeout_) {
    close_locked(errc::kInternal, "idle timeout", TransportError::Kind::Timeout, true);
    return;
  }

  // Keepalive ping at a third of the idle timeout.
  if (established_ && app_keys_ready_) {
    Millis keepalive = std::min(Millis(idle_timeout_ / 3), Millis(10000));
    if (now - last_send_ > keepalive) send_frames(kSpaceApp, {Frame{PingFrame{}}});
  }

  flush_acks();
}

// --- diagnostics -----------------------------------------------------------------------

std::vector<PacketEvent> ConnectionImpl::event_log() const {
  std::unique_lock lock(mutex_);
  return events_;
}

std::optional<uint64_t> ConnectionImpl::first_send_depth(uint64_t stream_id) const {
  std::unique_lock lock(mutex_);
  auto it = first_send_depth_.find(stream_id);
  if (it == first_send_depth_.end()) return std::nullopt;
  return it->second;
}

uint64_t ConnectionImpl::crypto_send_depth() const {
  std::unique_lock lock(mutex_);
  return crypto_send_depth_;
}

ConnectionStats ConnectionImpl::stats() const {
  std::unique_lock lock(mutex_);
  return stats_;
}

}  // namespace quicshell::transport::detail
