// SPDX-License-Identifier: Apache-2.0
#include "quicshell/session.hpp"

#include <fmt/format.h>

#include <atomic>
#include <condition_variable>
#include <deque>
#include <mutex>
#include <thread>

#include "quicshell/jwt.hpp"
#include "quicshell/keys.hpp"
#include "quicshell/log.hpp"

namespace quicshell::session {

using transport::TransportError;
namespace errc = transport::errc;

// --- header blocks ----------------------------------------------------------------

std::optional<std::string> HeaderBlock::get(std::string_view name) const {
  for (const auto& [n, v] : fields)
    if (n == name) return v;
  return std::nullopt;
}

void HeaderBlock::add(std::string name, std::string value) {
  fields.emplace_back(std::move(name), std::move(value));
}

Bytes encode_header_block(const HeaderBlock& headers) {
  Bytes body;
  wire::encode_varint(body, headers.fields.size());
  for (const auto& [name, value] : headers.fields) {
    wire::encode_string(body, name);
    wire::encode_string(body, value);
  }
  Bytes out;
  wire::encode_varint(out, body.size());
  append(out, ByteView(body));
  return out;
}

wire::Decoded<HeaderBlock> decode_header_block(ByteView in) {
  auto fail = [](wire::DecodeStatus status, std::string detail) {
    wire::Decoded<HeaderBlock> d;
    d.status = status;
    d.detail = std::move(detail);
    return d;
  };
  auto block_len = wire::decode_varint(in);
  if (!block_len) return fail(block_len.status, "block length");
  if (block_len.value > 64 * 1024) return fail(wire::DecodeStatus::Malformed, "block too large");
  if (block_len.value > in.size() - block_len.consumed)
    return fail(wire::DecodeStatus::NeedMore, "partial block");
  ByteView body = in.subspan(block_len.consumed, block_len.value);

  size_t pos = 0;
  auto count = wire::decode_varint(body);
  if (!count || count.value > 256) return fail(wire::DecodeStatus::Malformed, "field count");
  pos += count.consumed;
  HeaderBlock headers;
  for (uint64_t i = 0; i < count.value; i++) {
    auto name = wire::decode_string(body.subspan(pos));
    if (!name) return fail(wire::DecodeStatus::Malformed, "field name");
    pos += name.consumed;
    auto value = wire::decode_string(body.subspan(pos));
    if (!value) return fail(wire::DecodeStatus::Malformed, "field value");
    pos += value.consumed;
    headers.add(std::move(name.value), std::move(value.value));
  }
  if (pos != body.size()) return fail(wire::DecodeStatus::Malformed, "trailing bytes in block");

  wire::Decoded<HeaderBlock> d;
  d.status = wire::DecodeStatus::Ok;
  d.value = std::move(headers);
  d.consumed = block_len.consumed + block_len.value;
  return d;
}

namespace {

std::string percent_encode(std::string_view s) {
  static const char hex[] = "0123456789ABCDEF";
  std::string out;
  for (unsigned char c : s) {
    bool unreserved = isalnum(c) || c == '-' || c == '.' || c == '_' || c == '~';
    if (unreserved) {
      out.push_back(static_cast<char>(c));
    } else {
      out.push_back('%');
      out.push_back(hex[c >> 4]);
      out.push_back(hex[c & 0xf]);
    }
  }
  return out;
}

std::string percent_decode(std::string_view s) {
  std::string out;
  for (size_t i = 0; i < s.size(); i++) {
    if (s[i] == '%' && i + 2 < s.size()) {
      auto val = hex_decode(s.substr(i + 1, 2));
      if (val && val->size() == 1) {
        out.push_back(static_cast<char>((*val)[0]));
        i += 2;
        continue;
      }
    }
    out.push_back(s[i]);
  }
  return out;
}

// "path?user=alice" -> {path, {user: alice}}
std::pair<std::string, std::map<std::string, std::string>> split_path(std::string_view raw) {
  size_t q = raw.find('?');
  std::string path(raw.substr(0, q == std::string_view::npos ? raw.size() : q));
  std::map<std::string, std::string> params;
  if (q != std::string_view::npos) {
    std::string_view query = raw.substr(q + 1);
    while (!query.empty()) {
      size_t amp = query.find('&');
      std::string_view item = query.substr(0, amp);
      size_t eq = item.find('=');
      if (eq != std::string_view::npos)
        params[percent_decode(item.substr(0, eq))] = percent_decode(item.substr(eq + 1));
      if (amp == std::string_view::npos) break;
      query.remove_prefix(amp + 1);
    }
  }
  return {std::move(path), std::move(params)};
}

std::vector<std::string> parse_authenticate_schemes(std::string_view header) {
  std::vector<std::string> schemes;
  size_t pos = 0;
  while (pos < header.size()) {
    size_t comma = header.find(',', pos);
    std::string_view challenge =
        header.substr(pos, comma == std::string_view::npos ? header.size() - pos : comma - pos);
    while (!challenge.empty() && challenge.front() == ' ') challenge.remove_prefix(1);
    size_t sp = challenge.find(' ');
    std::string scheme(challenge.substr(0, sp));
    if (!scheme.empty()) schemes.push_back(std::move(scheme));
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  return schemes;
}

// Reads one header block from the stream, accumulating until complete.
std::optional<HeaderBlock> read_header_block(transport::Stream& stream, Millis timeout) {
  Bytes acc;
  uint8_t buf[4096];
  auto deadline = std::chrono::steady_clock::now() + timeout;
  for (;;) {
    auto d = decode_header_block(acc);
    if (d.ok()) return d.value;
    if (d.status != wire::DecodeStatus::NeedMore) return std::nullopt;
    auto remaining = std::chrono::duration_cast<Millis>(deadline - std::chrono::steady_clock::now());
    if (remaining.count() <= 0) return std::nullopt;
    auto n = stream.read_some(std::span(buf, sizeof buf), remaining);
    if (!n) return std::nullopt;  // timeout
    if (*n == 0) return std::nullopt;  // peer finished without a block
    acc.insert(acc.end(), buf, buf + *n);
  }
}

}  // namespace

// --- channel implementation ----------------------------------------------------------

namespace detail {

class ChannelImpl : public std::enable_shared_from_this<ChannelImpl> {
 public:
  static constexpr size_t kQueueCapacity = 256;

  ChannelImpl(transport::Stream stream, wire::ChannelPreamble preamble, Bytes leftover = {})
      : stream_(std::move(stream)), preamble_(std::move(preamble)),
        leftover_(std::move(leftover)) {}

  void start_pump() {
    std::thread([self = shared_from_this()] { self->pump(); }).detach();
  }

  uint64_t id() const { return stream_.id(); }
  const wire::ChannelPreamble& preamble() const { return preamble_; }

  void send_message(const wire::Message& m) {
    try {
      if (const auto* data = std::get_if<wire::Data>(&m);
          data && data->payload.size() > wire::kMaxDataPayload) {
        // Fragment oversized payloads into multiple Data messages.
        size_t pos = 0;
        while (pos < data->payload.size()) {
          size_t chunk = std::min(data->payload.size() - pos, wire::kMaxDataPayload);
          wire::Data part{data->kind, Bytes(data->payload.begin() + static_cast<long>(pos),
                                            data->payload.begin() + static_cast<long>(pos + chunk))};
          stream_.write(wire::encode_frame(wire::Message{std::move(part)}));
          pos += chunk;
        }
        return;
      }
      stream_.write(wire::encode_frame(m));
    } catch (const TransportError& e) {
      throw ChannelError(fmt::format("channel send failed: {}", e.what()), e.code);
    }
  }

  std::optional<wire::Message> next_message(std::optional<Millis> timeout) {
    std::unique_lock lock(mutex_);
    auto ready = [&] { return !queue_.empty() || clean_closed_ || error_.has_value() || aborted_; };
    if (timeout) {
      if (!items_cv_.wait_for(lock, *timeout, ready))
        throw ChannelError("timed out waiting for channel message", errc::kTargetTimeout);
    } else {
      items_cv_.wait(lock, ready);
    }
    if (!queue_.empty()) {
      wire::Message m = std::move(queue_.front());
      queue_.pop_front();
      space_cv_.notify_one();
      return m;
    }
    if (clean_closed_) return std::nullopt;
    if (error_) throw ChannelError(error_->second, error_->first);
    throw ChannelError("channel aborted", errc::kShutdown);
  }

  void close() {
    try {
      stream_.close_write();
    } catch (const TransportError&) {
    }
  }

  void reset(uint64_t error_code) {
    try {
      stream_.reset(error_code);
    } catch (const TransportError&) {
    }
    abort();
  }

  void abort() {
    std::lock_guard lock(mutex_);
    aborted_ = true;
    items_cv_.notify_all();
    space_cv_.notify_all();
  }

  size_t queue_depth() const {
    std::lock_guard lock(mutex_);
    return queue_.size();
  }

  bool finished() const {
    std::lock_guard lock(mutex_);
    return clean_closed_ || error_.has_value() || aborted_;
  }

  bool broken() const {
    std::lock_guard lock(mutex_);
    return error_.has_value() || aborted_;
  }

 private:
  void pump() {
    Bytes acc = std::move(leftover_);
    size_t parse_pos = 0;
    uint8_t buf[16384];
    try {
      for (;;) {
        while (parse_pos < acc.size()) {
          auto d = wire::decode_frame(ByteView(acc).subspan(parse_pos));
          if (d.status == wire::DecodeStatus::NeedMore) break;
          if (d.status == wire::DecodeStatus::UnknownType) {
            log::warn("channel {}: skipping unknown message type 0x{:x}", stream_.id(),
                      d.unknown_code);
            parse_pos += d.consumed;
            continue;
          }
          if (!d.ok()) {
            stream_.reset(errc::kProtocol);
            push_error(errc::kProtocol, fmt::format("malformed channel frame: {}", d.detail));
            return;
          }
          parse_pos += d.consumed;
          if (!push_message(std::move(d.value))) return;  // aborted while blocked
        }
        if (parse_pos > 65536) {
          acc.erase(acc.begin(), acc.begin() + static_cast<long>(parse_pos));
          parse_pos = 0;
        }

        if (is_aborted()) return;
        auto n = stream_.read_some(std::span(buf, sizeof buf), Millis(500));
        if (!n) continue;  // poll for abort
        if (*n == 0) {
          push_clean_close();
          return;
        }
        acc.insert(acc.end(), buf, buf + *n);
      }
    } catch (const TransportError& e) {
      push_error(e.code, e.what());
    }
  }

  bool is_aborted() const {
    std::lock_guard lock(mutex_);
    return aborted_;
  }

  bool push_message(wire::Message m) {
    std::unique_lock lock(mutex_);
    space_cv_.wait(lock, [&] { return aborted_ || queue_.size() < kQueueCapacity; });
    if (aborted_) return false;
    queue_.push_back(std::move(m));
    items_cv_.notify_one();
    return true;
  }

  void push_clean_close() {
    std::lock_guard lock(mutex_);
    clean_closed_ = true;
    items_cv_.notify_all();
  }

  void push_error(uint64_t code, std::string msg) {
    std::lock_guard lock(mutex_);
    if (!clean_closed_ && !error_) error_ = {code, std::move(msg)};
    items_cv_.notify_all();
  }

  transport::Stream stream_;
  wire::ChannelPreamble preamble_;
  Bytes leftover_;

  mutable std::mutex mutex_;
  std::deque<wire::Message> queue_;
  std::condition_variable items_cv_;
  std::condition_variable space_cv_;
  bool clean_closed_ = false;
  std::optional<std::pair<uint64_t, std::string>> error_;
  bool aborted_ = false;
};

// --- conversation implementation ---------------------------------------------------

class ConversationImpl : public std::enable_shared_from_this<ConversationImpl> {
 public:
  ConversationImpl(transport::Connection conn, auth::ConversationId sid, std::string username,
                   bool is_client, size_t max_channels)
      : conn_(std::move(conn)),
        sid_(sid),
        username_(std::move(username)),
        is_client_(is_client),
        max_channels_(max_channels) {}

  void init() {
    std::weak_ptr<ConversationImpl> weak = weak_from_this();
    conn_.set_datagram_handler([weak](Bytes payload) {
      if (auto self = weak.lock()) self->route_datagram(payload);
    });
    if (!is_client_) {
      std::thread([self = shared_from_this()] { self->accept_pump(); }).detach();
    }
  }

  const auth::ConversationId& id() const { return sid_; }
  const std::string& username() const { return username_; }
  bool is_client() const { return is_client_; }
  transport::Connection& connection() { return conn_; }

  std::shared_ptr<ChannelImpl> open_channel(const wire::ChannelPreamble& preamble) {
    if (open_channel_count() >= max_channels_)
      throw ChannelError(fmt::format("channel limit reached ({})", max_channels_),
                         errc::kChannelLimit);
    transport::Stream stream = conn_.open_stream();
    stream.write(wire::encode_preamble(preamble));
    auto ch = std::make_shared<ChannelImpl>(std::move(stream), preamble);
    ch->start_pump();
    track(ch);
    return ch;
  }

  std::shared_ptr<ChannelImpl> accept_channel(std::optional<Millis> timeout) {
    std::unique_lock lock(mutex_);
    auto ready = [&] { return closed_ || !ready_channels_.empty(); };
    if (timeout) {
      if (!ready_cv_.wait_for(lock, *timeout, ready)) return nullptr;
    } else {
      ready_cv_.wait(lock, ready);
    }
    if (!ready_channels_.empty()) {
      auto ch = ready_channels_.front();
      ready_channels_.pop_front();
      return ch;
    }
    throw ChannelError("conversation closed", errc::kShutdown);
  }

  void register_udp_route(uint64_t datagram_id, std::function<void(Bytes)> handler) {
    std::lock_guard lock(mutex_);
    udp_routes_[datagram_id] = std::move(handler);
  }

  void unregister_udp_route(uint64_t datagram_id) {
    std::lock_guard lock(mutex_);
    udp_routes_.erase(datagram_id);
  }

  void send_udp_frame(uint64_t datagram_id, ByteView payload) {
    wire::UdpFrame frame;
    frame.datagram_id = datagram_id;
    frame.payload.assign(payload.begin(), payload.end());
    conn_.send_datagram(wire::encode_udp_frame(frame));
  }

  size_t max_udp_payload(uint64_t datagram_id) const {
    size_t cap = conn_.max_datagram_payload();
    size_t id_len = wire::varint_size(datagram_id);
    return cap > id_len ? cap - id_len : 0;
  }

  uint64_t udp_drops() const { return udp_drops_.load(); }

  void close() {
    {
      std::lock_guard lock(mutex_);
      if (closed_) return;
      closed_ = true;
      ready_cv_.notify_all();
    }
    abort_channels();
    conn_.close(errc::kNone, "conversation closed");
  }

  bool is_closed() const { return conn_.is_closed(); }

 private:
  void route_datagram(const Bytes& payload) {
    auto frame = wire::decode_udp_frame(payload);
    if (!frame) {
      udp_drops_.fetch_add(1, std::memory_order_relaxed);
      return;
    }
    std::function<void(Bytes)> handler;
    {
      std::lock_guard lock(mutex_);
      auto it = udp_routes_.find(frame.value.datagram_id);
      if (it != udp_routes_.end()) handler = it->second;
    }
    if (!handler) {
      // Datagrams may legitimately race channel setup; count and drop.
      udp_drops_.fetch_add(1, std::memory_order_relaxed);
      return;
    }
    handler(std::move(frame.value.payload));
  }

  void accept_pump() {
    for (;;) {
      std::optional<transport::Stream> stream;
      try {
        stream = conn_.accept_stream(Millis(500));
      } catch (const TransportError&) {
        break;  // connection gone
      }
      {
        std::lock_guard lock(mutex_);
        if (closed_) break;
      }
      if (!stream) continue;
      if (open_channel_count() >= max_channels_) {
        log::warn("conversation {}: rejecting channel on stream {} (limit {})",
                  username_, stream->id(), max_channels_);
        stream->reset(errc::kChannelLimit);
        continue;
      }
      std::thread([self = shared_from_this(), s = std::move(*stream)]() mutable {
        self->read_preamble(std::move(s));
      }).detach();
    }
  }

  void read_preamble(transport::Stream stream) {
    Bytes acc;
    uint8_t buf[1024];
    auto deadline = std::chrono::steady_clock::now() + Millis(10000);
    for (;;) {
      auto d = wire::decode_preamble(acc);
      if (d.ok()) {
        Bytes leftover(acc.begin() + static_cast<long>(d.consumed), acc.end());
        auto ch = std::make_shared<ChannelImpl>(std::move(stream), std::move(d.value),
                                                std::move(leftover));
        ch->start_pump();
        track(ch);
        std::lock_guard lock(mutex_);
        ready_channels_.push_back(std::move(ch));
        ready_cv_.notify_one();
        return;
      }
      if (d.status == wire::DecodeStatus::UnknownType) {
        log::warn("rejecting channel with {}", d.detail);
        stream.reset(errc::kUnsupportedType);
        return;
      }
      if (d.status != wire::DecodeStatus::NeedMore) {
        log::warn("malformed channel preamble: {}", d.detail);
        stream.reset(errc::kProtocol);
        return;
      }
      auto remaining =
          std::chrono::duration_cast<Millis>(deadline - std::chrono::steady_clock::now());
      if (remaining.count() <= 0) {
        stream.reset(errc::kTargetTimeout);
        return;
      }
      try {
        auto n = stream.read_some(std::span(buf, sizeof buf), remaining);
        if (!n || *n == 0) {
          stream.reset(errc::kProtocol);
          return;
        }
        acc.insert(acc.end(), buf, buf + *n);
      } catch (const TransportError&) {
        return;
      }
    }
  }

  size_t open_channel_count() {
    std::lock_guard lock(mutex_);
    size_t count = 0;
    for (auto it = channels_.begin(); it != channels_.end();) {
      auto ch = it->lock();
      if (!ch || ch->finished()) {
        it = channels_.erase(it);
      } else {
        count++;
        ++it;
      }
    }
    return count + ready_channels_.size();
  }

  void track(const std::shared_ptr<ChannelImpl>& ch) {
    std::lock_guard lock(mutex_);
    channels_.push_back(ch);
  }

  void abort_channels() {
    std::vector<std::shared_ptr<ChannelImpl>> live;
    {
      std::lock_guard lock(mutex_);
      for (auto& weak : channels_)
        if (auto ch = weak.lock()) live.push_back(std::move(ch));
      for (auto& ch : ready_channels_) live.push_back(ch);
      ready_channels_.clear();
    }
    for (auto& ch : live) ch->abort();
  }

  transport::Connection conn_;
  auth::ConversationId sid_;
  std::string username_;
  bool is_client_;
  size_t max_channels_;

  mutable std::mutex mutex_;
  std::vector<std::weak_ptr<ChannelImpl>> channels_;
  std::deque<std::shared_ptr<ChannelImpl>> ready_channels_;
  std::condition_variable ready_cv_;
  std::map<uint64_t, std::function<void(Bytes)>> udp_routes_;
  std::atomic<uint64_t> udp_drops_{0};
  bool closed_ = false;
};

}  // namespace detail

// --- Channel / Conversation wrappers ---------------------------------------------------

uint64_t Channel::id() const { return impl_->id(); }
const wire::ChannelPreamble& Channel::preamble() const { return impl_->preamble(); }
wire::ChannelType Channel::type() const { return impl_->preamble().type; }
void Channel::send_message(const wire::Message& message) { impl_->send_message(message); }
std::optional<wire::Message> Channel::next_message(std::optional<Millis> timeout) {
  return impl_->next_message(timeout);
}
void Channel::close() { impl_->close(); }
void Channel::reset(uint64_t error_code) { impl_->reset(error_code); }
size_t Channel::queue_depth() const { return impl_->queue_depth(); }
bool Channel::is_broken() const { return impl_->broken(); }

const auth::ConversationId& Conversation::id() const { return impl_->id(); }
const std::string& Conversation::username() const { return impl_->username(); }
bool Conversation::is_client() const { return impl_->is_client(); }

Channel Conversation::open_channel(const wire::ChannelPreamble& preamble) {
  return Channel(impl_->open_channel(preamble));
}

std::optional<Channel> Conversation::accept_channel(std::optional<Millis> timeout) {
  auto ch = impl_->accept_channel(timeout);
  if (!ch) return std::nullopt;
  return Channel(std::move(ch));
}

void Conversation::register_udp_route(uint64_t datagram_id, std::function<void(Bytes)> handler) {
  impl_->register_udp_route(datagram_id, std::move(handler));
}
void Conversation::unregister_udp_route(uint64_t datagram_id) {
  impl_->unregister_udp_route(datagram_id);
}
void Conversation::send_udp_frame(uint64_t datagram_id, ByteView payload) {
  impl_->send_udp_frame(datagram_id, payload);
}
size_t Conversation::max_udp_payload(uint64_t datagram_id) const {
  return impl_->max_udp_payload(datagram_id);
}
uint64_t Conversation::udp_drops() const { return impl_->udp_drops(); }
transport::Connection& Conversation::connection() { return impl_->connection(); }
const transport::Connection& Conversation::connection() const {
  return const_cast<detail::ConversationImpl&>(*impl_).connection();
}
void Conversation::close() { impl_->close(); }
bool Conversation::is_closed() const { return impl_->is_closed(); }

// --- client ------------------------------------------------------------------------------

Conversation open_conversation(const ClientOptions& options) {
  transport::ClientConfig tc;
  tc.settings = options.settings;
  tc.server_name = options.server_name.empty() ? options.host : options.server_name;
  tc.ca_file = options.ca_file;
  tc.pinned_cert_sha256 = options.pinned_cert_sha256;
  tc.handshake_timeout = options.handshake_timeout;
  tc.idle_timeout = options.idle_timeout;

  transport::Connection conn = transport::connect(options.host, options.port, tc);
  try {
    auth::TlsExporter exporter = [&conn](std::string_view label, ByteView context,
                                         size_t length) {
      return conn.export_keying_material(label, context, length);
    };
    auth::ConversationId sid = auth::derive_conversation_id(exporter);
    std::string authorization =
        auth::build_authorization_header(options.credential, sid, options.clock());

    transport::Stream stream0 = conn.open_stream();

    HeaderBlock request;
    request.add(":method", "CONNECT");
    request.add(":protocol", kConnectProtocol);
    request.add(":scheme", "https");
    request.add(":authority", fmt::format("{}:{}", options.host, options.port));
    request.add(":path", fmt::format("{}?user={}", options.path, percent_encode(options.username)));
    request.add("authorization", authorization);
    stream0.write(encode_header_block(request));

    auto response = read_header_block(stream0, options.request_timeout);
    if (!response)
      throw TransportError(TransportError::Kind::Timeout, "no response to CONNECT request");

    std::string status = response->get(":status").value_or("");
    if (status == "404") throw PathError(fmt::format("no endpoint at {}", options.path));
    if (status == "401") {
      auto schemes = parse_authenticate_schemes(response->get("www-authenticate").value_or(""));
      std::string names;
      for (const auto& s : schemes) names += (names.empty() ? "" : ", ") + s;
      throw AuthError(fmt::format("authentication rejected; server accepts: {}",
                                  names.empty() ? "(none advertised)" : names),
                      schemes);
    }
    if (status != "200")
      throw TransportError(TransportError::Kind::Protocol,
                           fmt::format("unexpected response status \"{}\"", status));

    auto peer = conn.peer_settings(Millis(2000));
    if (!peer || !peer->enable_connect_protocol)
      throw TransportError(TransportError::Kind::Config,
                           "server did not negotiate extended connect support");
    if (peer->max_datagram_frame_size == 0)
      throw TransportError(TransportError::Kind::Config,
                           "server did not negotiate datagram support");

    // The server echoes a digest of its exporter-derived session id; both
    // sides must have derived the same value.
    if (auto echo = response->get("x-session-hash")) {
      if (*echo != base64_encode(keys::sha256(sid.view())))
        throw TransportError(TransportError::Kind::Protocol,
                             "session id mismatch between endpoints");
    }

    auto impl = std::make_shared<detail::ConversationImpl>(
        std::move(conn), sid, options.username, true, options.max_channels);
    impl->init();
    return Conversation(std::move(impl));
  } catch (...) {
    conn.close(errc::kNone, "setup failed");
    throw;
  }
}

// --- server -------------------------------------------------------------------------------

void ServerConfig::validate() const {
  if (url_path.empty() || url_path.front() != '/')
    throw std::invalid_argument("url_path must begin with '/'");
  if (max_channels < 1) throw std::invalid_argument("max_channels must be at least 1");
  if (cert_pem.empty()) throw std::invalid_argument("certificate is required");
  if (key_pem.empty()) throw std::invalid_argument("private key is required");
  if (schemes.empty()) throw std::invalid_argument("at least one auth scheme must be enabled");
}

struct Server::Impl : std::enable_shared_from_this<Server::Impl> {
  explicit Impl(ServerConfig cfg) : config(std::move(cfg)) {}

  ServerConfig config;
  std::unique_ptr<transport::Listener> listener;
  oidc::ProviderKeyCache jwks_cache;
  Server::ChannelHandler session_handler;
  Server::ChannelHandler tcp_handler;
  Server::ChannelHandler udp_handler;

  std::atomic<bool> stopped{false};
  std::thread accept_thread;
  std::mutex mutex;
  std::vector<std::thread> workers;
  std::vector<std::weak_ptr<detail::ConversationImpl>> conversations;
  std::atomic<uint64_t> accepted{0};

  void accept_loop() {
    while (!stopped.load()) {
      std::optional<transport::Connection> conn;
      try {
        conn = listener->accept(Millis(200));
      } catch (const TransportError&) {
        break;
      }
      if (!conn) continue;
      std::lock_guard lock(mutex);
      workers.emplace_back([self = shared_from_this(), c = std::move(*conn)]() mutable {
        try {
          self->handle_connection(std::move(c));
        } catch (const std::exception& e) {
          log::warn("conversation handler ended with error: {}", e.what());
        }
      });
    }
  }

  void respond(transport::Stream& stream, HeaderBlock headers, bool fin) {
    headers.add("server", "quicshell");
    stream.write(encode_header_block(headers), fin);
  }

  void handle_connection(transport::Connection conn) {
    auto client_settings = conn.peer_settings(Millis(3000));
    if (!client_settings || !client_settings->enable_connect_protocol ||
        client_settings->max_datagram_frame_size == 0) {
      conn.close(errc::kProtocol, "extended connect and datagram support are required");
      return;
    }

    auto stream0 = conn.accept_stream(Millis(10000));
    if (!stream0) {
      conn.close(errc::kProtocol, "no request stream");
      return;
    }
    auto request = read_header_block(*stream0, Millis(10000));
    if (!request) {
      conn.close(errc::kProtocol, "malformed request header block");
      return;
    }

    std::string method = request->get(":method").value_or("");
    std::string protocol = request->get(":protocol").value_or("");
    auto [path, params] = split_path(request->get(":path").value_or(""));

    // The path gate comes first: a non-matching path looks exactly like an
    // absent resource and never reaches authorization.
    if (method != "CONNECT" || protocol != kConnectProtocol || path != config.url_path) {
      HeaderBlock h;
      h.add(":status", "404");
      respond(*stream0, std::move(h), true);
      return;
    }

    std::string username = params.count("user") ? params["user"] : "";
    auth::TlsExporter exporter = [&conn](std::string_view label, ByteView context,
                                         size_t length) {
      return conn.export_keying_material(label, context, length);
    };
    auth::ConversationId sid = auth::derive_conversation_id(exporter);

    auth::OidcVerifier oidc_verifier;
    oidc_verifier.expected_audience = config.oidc_audience;
    oidc_verifier.fetch_keys = [this](const std::string& issuer) {
      return jwks_cache.get(issuer);
    };

    auto decision =
        auth::authenticate(request->get("authorization"), username, config.store, sid,
                           config.clock(), config.schemes, &oidc_verifier);

    std::string scheme = "none";
    if (auto a = request->get("authorization")) {
      size_t sp = a->find(' ');
      scheme = a->substr(0, sp);
    }
    if (decision.accepted) {
      log::info("auth decision user={} scheme={} result=accepted", username, scheme);
    } else {
      log::info("auth decision user={} scheme={} result=rejected reason={}", username, scheme,
                auth::reject_reason_code(decision.reason));
      HeaderBlock h;
      h.add(":status", "401");
      std::string challenges;
      for (const auto& s : decision.advertised_schemes) {
        if (!challenges.empty()) challenges += ", ";
        challenges += s == "Basic" ? "Basic realm=\"quicshell\"" : s;
      }
      h.add("www-authenticate", challenges);
      respond(*stream0, std::move(h), true);
      return;
    }

    HeaderBlock ok;
    ok.add(":status", "200");
    ok.add("x-session-hash", base64_encode(keys::sha256(sid.view())));
    respond(*stream0, std::move(ok), false);

    auto conv = std::make_shared<detail::ConversationImpl>(conn, sid, decision.username, false,
                                                           config.max_channels);
    conv->init();
    accepted.fetch_add(1);
    {
      std::lock_guard lock(mutex);
      conversations.push_back(conv);
    }
    Conversation conversation(conv);

    std::vector<std::thread> channel_threads;
    while (!stopped.load() && !conv->is_closed()) {
      std::optional<Channel> ch;
      try {
        ch = conversation.accept_channel(Millis(250));
      } catch (const ChannelError&) {
        break;
      }
      if (!ch) continue;
      Server::ChannelHandler handler;
      switch (ch->type()) {
        case wire::ChannelType::Session: handler = session_handler; break;
        case wire::ChannelType::DirectTcp: handler = tcp_handler; break;
        case wire::ChannelType::DirectUdp: handler = udp_handler; break;
      }
      if (!handler) {
        log::warn("no handler for {} channel, rejecting",
                  wire::channel_type_string(ch->type()));
        ch->reset(errc::kUnsupportedType);
        continue;
      }
      channel_threads.emplace_back(
          [handler, &conversation, c = *ch]() mutable {
            try {
              handler(conversation, std::move(c));
            } catch (const std::exception& e) {
              log::warn("channel handler error: {}", e.what());
            }
          });
    }
    for (auto& t : channel_threads) t.join();
    conv->close();
  }

  void stop() {
    bool expected = false;
    if (!stopped.compare_exchange_strong(expected, true)) return;
    std::vector<std::shared_ptr<detail::ConversationImpl>> live;
    {
      std::lock_guard lock(mutex);
      for (auto& weak : conversations)
        if (auto c = weak.lock()) live.push_back(std::move(c));
    }
    for (auto& c : live) c->close();
    if (listener) listener->close();
    if (accept_thread.joinable()) accept_thread.join();
    std::vector<std::thread> to_join;
    {
      std::lock_guard lock(mutex);
      to_join.swap(workers);
    }
    for (auto& t : to_join) t.join();
  }
};

Server::Server(ServerConfig config) {
  config.validate();
  impl_ = std::make_shared<Impl>(std::move(config));
}

Server::~Server() {
  if (impl_) impl_->stop();
}

void Server::set_session_handler(ChannelHandler handler) {
  impl_->session_handler = std::move(handler);
}
void Server::set_tcp_handler(ChannelHandler handler) { impl_->tcp_handler = std::move(handler); }
void Server::set_udp_handler(ChannelHandler handler) { impl_->udp_handler = std::move(handler); }

void Server::start() {
  transport::ServerTransportConfig tc;
  tc.settings = impl_->config.settings;
  tc.cert_pem = impl_->config.cert_pem;
  tc.key_pem = impl_->config.key_pem;
  tc.idle_timeout = impl_->config.idle_timeout;
  impl_->listener = std::make_unique<transport::Listener>(impl_->config.listen_host,
                                                          impl_->config.listen_port, tc);
  impl_->accept_thread = std::thread([impl = impl_] { impl->accept_loop(); });
}

uint16_t Server::port() const { return impl_->listener->port(); }

void Server::stop() { impl_->stop(); }

uint64_t Server::conversations_accepted() const { return impl_->accepted.load(); }

}  // namespace quicshell::session
