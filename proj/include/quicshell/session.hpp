// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "quicshell/auth.hpp"
#include "quicshell/oidc.hpp"
#include "quicshell/transport.hpp"
#include "quicshell/wire.hpp"

namespace quicshell::session {

using transport::Millis;

inline constexpr const char* kConnectProtocol = "ssh3";

// --- header blocks -----------------------------------------------------------
//
// Request/response metadata on the CONNECT stream is a length-prefixed block
// of (name, value) pairs: block_len:varint ++ count:varint ++
// (name_len name value_len value)*.

struct HeaderBlock {
  std::vector<std::pair<std::string, std::string>> fields;

  std::optional<std::string> get(std::string_view name) const;
  void add(std::string name, std::string value);
};

Bytes encode_header_block(const HeaderBlock& headers);
wire::Decoded<HeaderBlock> decode_header_block(ByteView in);

// --- errors ---------------------------------------------------------------------

// 401: carries the schemes advertised by WWW-Authenticate.
struct AuthError : std::runtime_error {
  std::vector<std::string> advertised_schemes;
  AuthError(const std::string& msg, std::vector<std::string> schemes)
      : std::runtime_error(msg), advertised_schemes(std::move(schemes)) {}
};

// 404: indistinguishable from an absent server on that path.
struct PathError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ChannelError : std::runtime_error {
  uint64_t code;
  ChannelError(const std::string& msg, uint64_t code_) : std::runtime_error(msg), code(code_) {}
};

// --- channels -----------------------------------------------------------------------

namespace detail {
class ChannelImpl;
class ConversationImpl;
}  // namespace detail

// An ordered bidirectional message pipe on a dedicated transport stream.
// Inbound messages are decoded into a bounded queue (default 256); when the
// queue is full the pump stops reading and backpressure rides the stream's
// flow control.
class Channel {
 public:
  Channel() = default;

  uint64_t id() const;
  const wire::ChannelPreamble& preamble() const;
  wire::ChannelType type() const;

  // Fragments Data payloads above the per-message limit.
  void send_message(const wire::Message& message);

  // nullopt on clean close; throws ChannelError on reset or connection loss.
  std::optional<wire::Message> next_message(std::optional<Millis> timeout = std::nullopt);

  void close();                   // half-close: no more messages from us
  void reset(uint64_t error_code);

  size_t queue_depth() const;
  // True once the inbound side died (reset, abort, connection loss); a
  // clean close is not "broken".
  bool is_broken() const;
  explicit operator bool() const { return impl_ != nullptr; }

 private:
  friend class Conversation;
  friend class detail::ConversationImpl;
  explicit Channel(std::shared_ptr<detail::ChannelImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::ChannelImpl> impl_;
};

// --- conversations --------------------------------------------------------------------

class Conversation {
 public:
  Conversation() = default;

  const auth::ConversationId& id() const;
  const std::string& username() const;
  bool is_client() const;

  Channel open_channel(const wire::ChannelPreamble& preamble);
  std::optional<Channel> accept_channel(std::optional<Millis> timeout = std::nullopt);

  // UDP tunnel plumbing: registered routes receive the payloads of matching
  // datagram ids; frames with unknown ids are counted and dropped.
  void register_udp_route(uint64_t datagram_id, std::function<void(Bytes)> handler);
  void unregister_udp_route(uint64_t datagram_id);
  void send_udp_frame(uint64_t datagram_id, ByteView payload);
  size_t max_udp_payload(uint64_t datagram_id) const;
  uint64_t udp_drops() const;

  transport::Connection& connection();
  const transport::Connection& connection() const;

  void close();
  bool is_closed() const;

  explicit operator bool() const { return impl_ != nullptr; }

 private:
  friend class Server;
  friend Conversation open_conversation(const struct ClientOptions&);
  explicit Conversation(std::shared_ptr<detail::ConversationImpl> impl)
      : impl_(std::move(impl)) {}
  std::shared_ptr<detail::ConversationImpl> impl_;
};

// --- client side -----------------------------------------------------------------------

struct ClientOptions {
  std::string host;
  uint16_t port = 443;
  std::string path = "/";
  std::string username;
  auth::Credential credential = auth::PasswordCredential{};

  std::optional<std::string> ca_file;
  std::optional<Bytes> pinned_cert_sha256;
  std::string server_name;  // defaults to host

  transport::Settings settings;
  Millis handshake_timeout{10000};
  Millis request_timeout{10000};
  Millis idle_timeout{30000};
  size_t max_channels = 128;
  auth::Clock clock = auth::system_now;
};

// Establishes a conversation over Extended CONNECT. Throws AuthError on 401,
// PathError on 404, TransportError on transport failures.
Conversation open_conversation(const ClientOptions& options);

// --- server side -----------------------------------------------------------------------

struct ServerConfig {
  std::string listen_host = "0.0.0.0";
  uint16_t listen_port = 0;
  std::string cert_pem;
  std::string key_pem;
  std::string url_path = "/";
  auth::IdentityStore store;
  std::vector<std::string> schemes{"Basic", "Bearer"};
  size_t max_channels = 128;
  std::string oidc_audience;  // expected `aud` of OIDC ID tokens
  Millis idle_timeout{30000};
  transport::Settings settings;
  auth::Clock clock = auth::system_now;

  void validate() const;  // throws std::invalid_argument with a clear message
};

class Server {
 public:
  // Called with each channel once its preamble is read; runs on a dedicated
  // thread per channel.
  using ChannelHandler = std::function<void(Conversation&, Channel)>;

  explicit Server(ServerConfig config);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  void set_session_handler(ChannelHandler handler);
  void set_tcp_handler(ChannelHandler handler);
  void set_udp_handler(ChannelHandler handler);

  void start();
  uint16_t port() const;
  void stop();  // drains conversations; idempotent

  uint64_t conversations_accepted() const;

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
};

}  // namespace quicshell::session
