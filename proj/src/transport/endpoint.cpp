// SPDX-License-Identifier: Apache-2.0
#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/eventfd.h>
#include <sys/socket.h>
#include <unistd.h>

#include <fmt/format.h>

#include <atomic>
#include <cstring>
#include <thread>

#include "quicshell/log.hpp"
#include "quicshell/transport.hpp"
#include "transport/connection.hpp"

namespace quicshell::transport {

using detail::ConnectionImpl;

const char* errc_name(uint64_t code) {
  switch (code) {
    case errc::kNone: return "none";
    case errc::kProtocol: return "protocol-error";
    case errc::kUnknownUser: return "unknown-user";
    case errc::kSpawnFailed: return "spawn-failed";
    case errc::kChannelLimit: return "channel-limit";
    case errc::kTargetRefused: return "refused";
    case errc::kTargetDns: return "dns";
    case errc::kTargetTimeout: return "timeout";
    case errc::kUnsupportedType: return "unsupported-type";
    case errc::kShutdown: return "shutdown";
    case errc::kInternal: return "internal";
    default: return "unknown";
  }
}

namespace {

constexpr int kPollMillis = 5;

void set_buffers(int fd) {
  int size = 4 * 1024 * 1024;
  setsockopt(fd, SOL_SOCKET, SO_RCVBUF, &size, sizeof size);
  setsockopt(fd, SOL_SOCKET, SO_SNDBUF, &size, sizeof size);
}

struct Resolved {
  sockaddr_storage addr{};
  socklen_t len = 0;
  int family = AF_UNSPEC;
};

Resolved resolve_udp(const std::string& host, uint16_t port) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_DGRAM;
  addrinfo* res = nullptr;
  int rc = getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res);
  if (rc != 0)
    throw TransportError(TransportError::Kind::Config,
                         fmt::format("cannot resolve {}: {}", host, gai_strerror(rc)));
  Resolved out;
  std::memcpy(&out.addr, res->ai_addr, res->ai_addrlen);
  out.len = static_cast<socklen_t>(res->ai_addrlen);
  out.family = res->ai_family;
  freeaddrinfo(res);
  return out;
}

}  // namespace

namespace detail {

// Client-side socket + driver thread; owns the connection.
class ClientEndpoint {
 public:
  std::shared_ptr<ConnectionImpl> conn;
  int fd = -1;
  int wake_fd = -1;
  std::atomic<bool> stop{false};
  std::thread thread;

  void run() {
    pollfd fds[2] = {{fd, POLLIN, 0}, {wake_fd, POLLIN, 0}};
    std::vector<uint8_t> buf(65536);
    while (!stop.load(std::memory_order_relaxed)) {
      int rc = ::poll(fds, 2, kPollMillis);
      if (rc > 0 && (fds[0].revents & POLLIN)) {
        for (;;) {
          ssize_t n = ::recv(fd, buf.data(), buf.size(), MSG_DONTWAIT);
          if (n > 0) {
            conn->handle_datagram(ByteView(buf.data(), static_cast<size_t>(n)));
          } else {
            if (n < 0 && errno == ECONNREFUSED) {
              conn->fail(TransportError::Kind::Closed, "connection refused");
              return;
            }
            break;
          }
        }
      }
      conn->tick(SteadyClock::now());
      if (conn->is_closed()) {
        // Keep draining briefly so a final peer CLOSE is not missed; exit on stop.
      }
    }
  }

  ~ClientEndpoint() {
    stop.store(true);
    if (wake_fd >= 0) {
      uint64_t one = 1;
      [[maybe_unused]] ssize_t n = ::write(wake_fd, &one, sizeof one);
    }
    if (thread.joinable()) thread.join();
    if (fd >= 0) ::close(fd);
    if (wake_fd >= 0) ::close(wake_fd);
  }
};

struct ListenerSocket {
  int fd = -1;
  ~ListenerSocket() {
    if (fd >= 0) ::close(fd);
  }
};

class ListenerImpl : public std::enable_shared_from_this<ListenerImpl> {
 public:
  ListenerImpl(const std::string& bind_addr, uint16_t port, ServerTransportConfig config)
      : config_(std::move(config)) {
    socket_ = std::make_shared<ListenerSocket>();
    Resolved addr = resolve_udp(bind_addr, port);
    socket_->fd = ::socket(addr.family, SOCK_DGRAM, 0);
    if (socket_->fd < 0)
      throw TransportError(TransportError::Kind::Config, "cannot create UDP socket");
    set_buffers(socket_->fd);
    if (::bind(socket_->fd, reinterpret_cast<sockaddr*>(&addr.addr), addr.len) != 0)
      throw TransportError(TransportError::Kind::Config,
                           fmt::format("cannot bind {}:{}: {}", bind_addr, port, strerror(errno)));
    sockaddr_storage bound{};
    socklen_t blen = sizeof bound;
    getsockname(socket_->fd, reinterpret_cast<sockaddr*>(&bound), &blen);
    port_ = ntohs(bound.ss_family == AF_INET6
                      ? reinterpret_cast<sockaddr_in6*>(&bound)->sin6_port
                      : reinterpret_cast<sockaddr_in*>(&bound)->sin_port);
    wake_fd_ = eventfd(0, EFD_NONBLOCK);
  }

  ~ListenerImpl() { close(); }

  void start() {
    thread_ = std::thread([self = shared_from_this()] { self->run(); });
  }

  uint16_t port() const { return port_; }

  std::optional<Connection> accept(std::optional<Millis> timeout);

  void close() {
    bool expected = false;
    if (!stopped_.compare_exchange_strong(expected, true)) {
      if (thread_.joinable() && std::this_thread::get_id() != thread_.get_id()) thread_.join();
      return;
    }
    wake();
    if (thread_.joinable()) thread_.join();
    std::vector<std::shared_ptr<ConnectionImpl>> conns;
    {
      std::lock_guard lock(mutex_);
      for (auto& [id, c] : conns_) conns.push_back(c);
      conns_.clear();
      accept_cv_.notify_all();
    }
    for (auto& c : conns) c->close(errc::kShutdown, "server shutdown");
  }

 private:
  void wake() {
    uint64_t one = 1;
    [[maybe_unused]] ssize_t n = ::write(wake_fd_, &one, sizeof one);
  }

  void run() {
    pollfd fds[2] = {{socket_->fd, POLLIN, 0}, {wake_fd_, POLLIN, 0}};
    std::vector<uint8_t> buf(65536);
    sockaddr_storage from{};
    while (!stopped_.load(std::memory_order_relaxed)) {
      int rc = ::poll(fds, 2, kPollMillis);
      if (rc > 0 && (fds[0].revents & POLLIN)) {
        for (;;) {
          socklen_t from_len = sizeof from;
          ssize_t n = ::recvfrom(socket_->fd, buf.data(), buf.size(), MSG_DONTWAIT,
                                 reinterpret_cast<sockaddr*>(&from), &from_len);
          if (n <= 0) break;
          dispatch(ByteView(buf.data(), static_cast<size_t>(n)), from, from_len);
        }
      }
      auto now = SteadyClock::now();
      std::vector<std::shared_ptr<ConnectionImpl>> ticking;
      {
        std::lock_guard lock(mutex_);
        for (auto it = conns_.begin(); it != conns_.end();) {
          if (it->second->is_closed()) {
            it = conns_.erase(it);
          } else {
            ticking.push_back(it->second);
            ++it;
          }
        }
      }
      for (auto& c : ticking) c->tick(now);
    }
  }

  void dispatch(ByteView datagram, const sockaddr_storage& from, socklen_t from_len) {
    if (datagram.size() < 1 + detail::kConnIdLen) return;
    uint8_t type = datagram[0];
    if (type != detail::kPacketHandshake && type != detail::kPacketApp) return;
    std::string key(reinterpret_cast<const char*>(datagram.data()) + 1, detail::kConnIdLen);

    std::shared_ptr<ConnectionImpl> conn;
    {
      std::lock_guard lock(mutex_);
      auto it = conns_.find(key);
      if (it != conns_.end()) {
        conn = it->second;
      } else {
        if (type != detail::kPacketHandshake) return;  // stray packet for a dead connection
        if (conns_.size() >= 1024) return;
        conn = make_connection(key, from, from_len);
        conns_.emplace(key, conn);
      }
    }
    conn->handle_datagram(datagram);
  }

  std::shared_ptr<ConnectionImpl> make_connection(const std::string& key,
                                                  const sockaddr_storage& from,
                                                  socklen_t from_len) {
    auto tls = TlsEngine::make_server({config_.cert_pem, config_.key_pem});
    auto socket = socket_;
    sockaddr_storage peer = from;
    auto send_fn = [socket, peer, from_len](ByteView data) {
      ::sendto(socket->fd, data.data(), data.size(), MSG_DONTWAIT,
               reinterpret_cast<const sockaddr*>(&peer), from_len);
    };
    Bytes conn_id(key.begin(), key.end());
    auto conn = std::make_shared<ConnectionImpl>(false, std::move(conn_id), std::move(send_fn),
                                                 std::move(tls), config_.settings,
                                                 config_.idle_timeout);
    std::weak_ptr<ListenerImpl> self = weak_from_this();
    std::weak_ptr<ConnectionImpl> weak_conn = conn;
    conn->set_established_callback([self, weak_conn] {
      auto listener = self.lock();
      auto c = weak_conn.lock();
      if (!listener || !c) return;
      std::lock_guard lock(listener->mutex_);
      listener->accept_queue_.push_back(c);
      listener->accept_cv_.notify_one();
    });
    return conn;
  }

  ServerTransportConfig config_;
  std::shared_ptr<ListenerSocket> socket_;
  uint16_t port_ = 0;
  int wake_fd_ = -1;
  std::thread thread_;
  std::atomic<bool> stopped_{false};

  std::mutex mutex_;
  std::map<std::string, std::shared_ptr<ConnectionImpl>> conns_;
  std::deque<std::shared_ptr<ConnectionImpl>> accept_queue_;
  std::condition_variable accept_cv_;

  friend class quicshell::transport::Listener;
};

std::optional<Connection> ListenerImpl::accept(std::optional<Millis> timeout) {
  std::unique_lock lock(mutex_);
  auto ready = [&] { return stopped_.load() || !accept_queue_.empty(); };
  if (timeout) {
    if (!accept_cv_.wait_for(lock, *timeout, ready)) return std::nullopt;
  } else {
    accept_cv_.wait(lock, ready);
  }
  if (!accept_queue_.empty()) {
    auto conn = accept_queue_.front();
    accept_queue_.pop_front();
    return Connection(conn);
  }
  throw TransportError(TransportError::Kind::Closed, "listener closed");
}

}  // namespace detail

// --- Stream wrapper -----------------------------------------------------------

uint64_t Stream::id() const { return state_->id; }

void Stream::write(ByteView data, bool fin) { conn_->stream_write(*state_, data, fin); }

std::optional<size_t> Stream::read_some(std::span<uint8_t> out, std::optional<Millis> timeout) {
  return conn_->stream_read_some(*state_, out, timeout);
}

void Stream::reset(uint64_t error_code) { conn_->stream_reset(*state_, error_code); }

// --- Connection wrapper ---------------------------------------------------------

bool Connection::is_client() const { return impl_->is_client(); }
bool Connection::is_established() const { return impl_->is_established(); }
bool Connection::is_closed() const { return impl_->is_closed(); }

Stream Connection::open_stream() { return Stream(impl_, impl_->open_stream()); }

std::optional<Stream> Connection::accept_stream(std::optional<Millis> timeout) {
  auto st = impl_->accept_stream(timeout);
  if (!st) return std::nullopt;
  return Stream(impl_, std::move(st));
}

void Connection::send_datagram(ByteView payload) { impl_->send_datagram(payload); }
size_t Connection::max_datagram_payload() const { return impl_->max_datagram_payload(); }

void Connection::set_datagram_handler(std::function<void(Bytes)> handler) {
  impl_->set_datagram_handler(std::move(handler));
}

std::optional<Settings> Connection::peer_settings(std::optional<Millis> timeout) const {
  return impl_->peer_settings(timeout);
}

Bytes Connection::export_keying_material(std::string_view label, ByteView context,
                                         size_t length) const {
  return impl_->export_keying_material(label, context, length);
}

std::optional<Bytes> Connection::peer_cert_sha256() const { return impl_->peer_cert_sha256(); }

void Connection::close(uint64_t error_code, std::string_view reason) {
  impl_->close(error_code, reason);
}

bool Connection::wait_closed(std::optional<Millis> timeout) const {
  return impl_->wait_closed(timeout);
}

std::vector<PacketEvent> Connection::event_log() const { return impl_->event_log(); }

std::optional<uint64_t> Connection::first_send_depth(uint64_t stream_id) const {
  return impl_->first_send_depth(stream_id);
}

uint64_t Connection::crypto_send_depth() const { return impl_->crypto_send_depth(); }

ConnectionStats Connection::stats() const { return impl_->stats(); }

// --- client connect ---------------------------------------------------------------

Connection connect(const std::string& host, uint16_t port, const ClientConfig& config) {
  Resolved addr = resolve_udp(host, port);

  auto endpoint = std::make_shared<detail::ClientEndpoint>();
  endpoint->fd = ::socket(addr.family, SOCK_DGRAM, 0);
  if (endpoint->fd < 0)
    throw TransportError(TransportError::Kind::Config, "cannot create UDP socket");
  set_buffers(endpoint->fd);
  if (::connect(endpoint->fd, reinterpret_cast<sockaddr*>(&addr.addr), addr.len) != 0)
    throw TransportError(TransportError::Kind::Config,
                         fmt::format("cannot connect UDP socket: {}", strerror(errno)));
  endpoint->wake_fd = eventfd(0, EFD_NONBLOCK);

  TlsEngine::ClientParams tls_params;
  tls_params.server_name = config.server_name.empty() ? host : config.server_name;
  tls_params.ca_file = config.ca_file;
  tls_params.skip_verify = config.pinned_cert_sha256.has_value();
  auto tls = TlsEngine::make_client(tls_params);

  int fd = endpoint->fd;
  auto send_fn = [fd](ByteView data) { ::send(fd, data.data(), data.size(), MSG_DONTWAIT); };
  auto conn = std::make_shared<ConnectionImpl>(true, random_bytes(detail::kConnIdLen),
                                               std::move(send_fn), std::move(tls),
                                               config.settings, config.idle_timeout);
  endpoint->conn = conn;
  endpoint->thread = std::thread([ep = endpoint.get()] { ep->run(); });

  try {
    conn->start();
    if (!conn->wait_established(config.handshake_timeout))
      throw TransportError(TransportError::Kind::Timeout, "handshake timeout");

    if (config.pinned_cert_sha256) {
      auto fp = conn->peer_cert_sha256();
      if (!fp || !constant_time_equal(*fp, *config.pinned_cert_sha256)) {
        conn->close(errc::kProtocol, "certificate pin mismatch");
        throw TransportError(TransportError::Kind::Tls,
                             "server certificate does not match the pinned fingerprint");
      }
    }
  } catch (const TransportError&) {
    conn->close(errc::kInternal, "handshake abandoned");
    throw;
  }

  Connection result(conn);
  result.anchor_ = endpoint;
  return result;
}

// --- Listener -----------------------------------------------------------------------

Listener::Listener(const std::string& bind_addr, uint16_t port, ServerTransportConfig config) {
  impl_ = std::make_shared<detail::ListenerImpl>(bind_addr, port, std::move(config));
  impl_->start();
}

Listener::~Listener() {
  if (impl_) impl_->close();
}

uint16_t Listener::port() const { return impl_->port(); }

std::optional<Connection> Listener::accept(std::optional<Millis> timeout) {
  return impl_->accept(timeout);
}

void Listener::close() { impl_->close(); }

}  // namespace quicshell::transport
