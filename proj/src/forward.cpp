// SPDX-License-Identifier: Apache-2.0
#include "quicshell/forward.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <fmt/format.h>

#include <atomic>
#include <cstring>
#include <map>
#include <mutex>
#include <thread>
#include <vector>

#include "quicshell/log.hpp"

namespace quicshell::forward {

namespace errc = transport::errc;
using session::Channel;
using session::ChannelError;
using session::Conversation;
using transport::TransportError;

// --- spec parsing ---------------------------------------------------------------

std::optional<ForwardingSpec> ForwardingSpec::parse(std::string_view text) {
  ForwardingSpec spec;
  size_t slash1 = text.find('/');
  if (slash1 == std::string_view::npos) return std::nullopt;
  std::string_view proto = text.substr(0, slash1);
  if (proto == "tcp") spec.protocol = Protocol::Tcp;
  else if (proto == "udp") spec.protocol = Protocol::Udp;
  else return std::nullopt;

  size_t slash2 = text.find('/', slash1 + 1);
  if (slash2 == std::string_view::npos) return std::nullopt;
  std::string_view bind = text.substr(slash1 + 1, slash2 - slash1 - 1);
  std::string_view target = text.substr(slash2 + 1);

  auto split_hostport = [](std::string_view s, std::string& host, uint16_t& port) {
    size_t colon = s.rfind(':');
    if (colon == std::string_view::npos) return false;
    host = std::string(s.substr(0, colon));
    unsigned long p = 0;
    std::string port_str(s.substr(colon + 1));
    char* end = nullptr;
    p = strtoul(port_str.c_str(), &end, 10);
    if (!end || *end != '\0' || p < 1 || p > 65535) return false;
    port = static_cast<uint16_t>(p);
    return true;
  };

  if (!split_hostport(bind, spec.bind_host, spec.bind_port)) return std::nullopt;
  if (!split_hostport(target, spec.target_host, spec.target_port)) return std::nullopt;
  if (spec.bind_host.empty()) spec.bind_host = "127.0.0.1";
  if (spec.target_host.empty()) return std::nullopt;
  return spec;
}

std::string ForwardingSpec::to_string() const {
  return fmt::format("{}/{}:{}/{}:{}", protocol == Protocol::Tcp ? "tcp" : "udp", bind_host,
                     bind_port, target_host, target_port);
}

// --- socket helpers ----------------------------------------------------------------

namespace {

struct Fd {
  int fd = -1;
  Fd() = default;
  explicit Fd(int f) : fd(f) {}
  Fd(Fd&& o) noexcept : fd(o.fd) { o.fd = -1; }
  Fd& operator=(Fd&& o) noexcept {
    if (this != &o) {
      reset();
      fd = o.fd;
      o.fd = -1;
    }
    return *this;
  }
  ~Fd() { reset(); }
  void reset() {
    if (fd >= 0) {
      ::close(fd);
      fd = -1;
    }
  }
  explicit operator bool() const { return fd >= 0; }
};

struct ResolvedAddr {
  sockaddr_storage addr{};
  socklen_t len = 0;
  int family = AF_UNSPEC;
};

std::optional<ResolvedAddr> resolve(const std::string& host, uint16_t port, int socktype) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = socktype;
  addrinfo* res = nullptr;
  if (getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) != 0)
    return std::nullopt;
  ResolvedAddr out;
  std::memcpy(&out.addr, res->ai_addr, res->ai_addrlen);
  out.len = static_cast<socklen_t>(res->ai_addrlen);
  out.family = res->ai_family;
  freeaddrinfo(res);
  return out;
}

uint16_t bound_port(int fd) {
  sockaddr_storage addr{};
  socklen_t len = sizeof addr;
  getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  return ntohs(addr.ss_family == AF_INET6 ? reinterpret_cast<sockaddr_in6*>(&addr)->sin6_port
                                          : reinterpret_cast<sockaddr_in*>(&addr)->sin_port);
}

// Relays one TCP socket <-> one channel with half-close in both directions.
struct TcpRelay : std::enable_shared_from_this<TcpRelay> {
  Fd fd;
  Channel ch;
  std::atomic<bool> stopping{false};

  TcpRelay(Fd f, Channel c) : fd(std::move(f)), ch(std::move(c)) {
    int flag = 1;
    setsockopt(fd.fd, IPPROTO_TCP, TCP_NODELAY, &flag, sizeof flag);
  }

  void start() {
    std::thread([self = shared_from_this()] { self->uplink(); }).detach();
    std::thread([self = shared_from_this()] { self->downlink(); }).detach();
  }

  void abort() {
    stopping = true;
    ::shutdown(fd.fd, SHUT_RDWR);
    ch.reset(errc::kShutdown);
  }

  // socket -> channel
  void uplink() {
    Bytes buf(32 * 1024);
    for (;;) {
      ssize_t n = ::read(fd.fd, buf.data(), buf.size());
      if (n == 0) {
        ch.close();  // propagate EOF as a clean half-close
        return;
      }
      if (n < 0) {
        if (!stopping) ch.reset(errc::kShutdown);
        return;
      }
      try {
        ch.send_message(wire::Data{wire::DataKind::Stdout,
                                   Bytes(buf.begin(), buf.begin() + n)});
      } catch (const ChannelError&) {
        ::shutdown(fd.fd, SHUT_RD);
        return;
      }
    }
  }

  // channel -> socket
  void downlink() {
    try {
      while (auto m = ch.next_message()) {
        const auto* data = std::get_if<wire::Data>(&*m);
        if (!data) continue;  // forwarding channels carry only Data
        size_t off = 0;
        while (off < data->payload.size()) {
          ssize_t n = ::send(fd.fd, data->payload.data() + off, data->payload.size() - off,
                             MSG_NOSIGNAL);
          if (n <= 0) {
            ch.reset(errc::kShutdown);
            return;
          }
          off += static_cast<size_t>(n);
        }
      }
      ::shutdown(fd.fd, SHUT_WR);  // peer finished cleanly
    } catch (const ChannelError&) {
      ::shutdown(fd.fd, SHUT_RDWR);
    }
  }
};

}  // namespace

// --- client TCP forwarder -------------------------------------------------------------

struct TcpForwarder::Impl {
  Conversation conv;
  ForwardingSpec spec;
  Fd listen_fd;
  uint16_t port = 0;
  std::thread accept_thread;
  std::atomic<bool> stopped{false};
  std::atomic<uint64_t> connections{0};
  std::mutex mutex;
  std::vector<std::weak_ptr<TcpRelay>> relays;

  void accept_loop() {
    for (;;) {
      sockaddr_storage from{};
      socklen_t from_len = sizeof from;
      int fd = ::accept(listen_fd.fd, reinterpret_cast<sockaddr*>(&from), &from_len);
      if (fd < 0) {
        if (stopped) return;
        if (errno == EINTR) continue;
        return;
      }
      if (stopped) {
        ::close(fd);
        return;
      }
      connections.fetch_add(1);
      try {
        Channel ch = conv.open_channel(
            {wire::ChannelType::DirectTcp, spec.target_host, spec.target_port, 0});
        auto relay = std::make_shared<TcpRelay>(Fd(fd), std::move(ch));
        {
          std::lock_guard lock(mutex);
          relays.push_back(relay);
        }
        relay->start();
      } catch (const std::exception& e) {
        // Per-connection channel rejection closes only this TCP connection.
        log::warn("tcp forward: cannot open channel: {}", e.what());
        ::close(fd);
      }
    }
  }

  void stop() {
    bool expected = false;
    if (!stopped.compare_exchange_strong(expected, true)) return;
    ::shutdown(listen_fd.fd, SHUT_RDWR);
    if (accept_thread.joinable()) accept_thread.join();
    listen_fd.reset();
    std::lock_guard lock(mutex);
    for (auto& weak : relays)
      if (auto relay = weak.lock()) relay->abort();
  }
};

TcpForwarder::TcpForwarder(Conversation conv, ForwardingSpec spec)
    : impl_(std::make_shared<Impl>()) {
  impl_->conv = std::move(conv);
  impl_->spec = spec;

  auto addr = resolve(spec.bind_host, spec.bind_port, SOCK_STREAM);
  if (!addr) throw TransportError(TransportError::Kind::Config,
                                  fmt::format("cannot resolve bind address {}", spec.bind_host));
  impl_->listen_fd = Fd(::socket(addr->family, SOCK_STREAM, 0));
  if (!impl_->listen_fd)
    throw TransportError(TransportError::Kind::Config, "cannot create TCP socket");
  int flag = 1;
  setsockopt(impl_->listen_fd.fd, SOL_SOCKET, SO_REUSEADDR, &flag, sizeof flag);
  if (::bind(impl_->listen_fd.fd, reinterpret_cast<sockaddr*>(&addr->addr), addr->len) != 0 ||
      ::listen(impl_->listen_fd.fd, 64) != 0)
    throw TransportError(TransportError::Kind::Config,
                         fmt::format("cannot bind {}:{}: {}", spec.bind_host, spec.bind_port,
                                     strerror(errno)));
  impl_->port = bound_port(impl_->listen_fd.fd);
  impl_->accept_thread = std::thread([impl = impl_] { impl->accept_loop(); });
}

TcpForwarder::~TcpForwarder() {
  if (impl_) impl_->stop();
}
uint16_t TcpForwarder::port() const { return impl_->port; }
uint64_t TcpForwarder::connections_total() const { return impl_->connections.load(); }
void TcpForwarder::stop() { impl_->stop(); }

// --- server TCP handler -----------------------------------------------------------------

namespace {

// Connects with a timeout; distinguishes dns/refused/timeout failures.
std::pair<int, uint64_t> connect_target(const std::string& host, uint16_t port,
                                        Millis timeout) {
  auto addr = resolve(host, port, SOCK_STREAM);
  if (!addr) return {-1, errc::kTargetDns};
  int fd = ::socket(addr->family, SOCK_STREAM, 0);
  if (fd < 0) return {-1, errc::kInternal};
  fcntl(fd, F_SETFL, O_NONBLOCK);
  int rc = ::connect(fd, reinterpret_cast<sockaddr*>(&addr->addr), addr->len);
  if (rc != 0 && errno != EINPROGRESS) {
    ::close(fd);
    return {-1, errc::kTargetRefused};
  }
  if (rc != 0) {
    pollfd pfd{fd, POLLOUT, 0};
    int ready = ::poll(&pfd, 1, static_cast<int>(timeout.count()));
    if (ready <= 0) {
      ::close(fd);
      return {-1, errc::kTargetTimeout};
    }
    int err = 0;
    socklen_t len = sizeof err;
    getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
    if (err != 0) {
      ::close(fd);
      return {-1, err == ECONNREFUSED ? errc::kTargetRefused : errc::kTargetTimeout};
    }
  }
  fcntl(fd, F_SETFL, 0);  // back to blocking for the relay
  return {fd, errc::kNone};
}

}  // namespace

void serve_tcp_channel(Conversation&, Channel ch, Millis connect_timeout) {
  const auto& preamble = ch.preamble();
  auto [fd, reason] = connect_target(preamble.target_host, preamble.target_port,
                                     connect_timeout);
  if (fd < 0) {
    log::info("direct-tcp {}:{} failed: {}", preamble.target_host, preamble.target_port,
              transport::errc_name(reason));
    ch.reset(reason);
    return;
  }
  auto relay = std::make_shared<TcpRelay>(Fd(fd), std::move(ch));
  // Run the downlink on this handler thread; uplink on its own.
  std::thread([relay] { relay->uplink(); }).detach();
  relay->downlink();
}

session::Server::ChannelHandler make_tcp_handler(Millis connect_timeout) {
  return [connect_timeout](Conversation& conv, Channel ch) {
    serve_tcp_channel(conv, std::move(ch), connect_timeout);
  };
}

// --- client UDP forwarder ------------------------------------------------------------------

struct UdpForwarder::Impl {
  Conversation conv;
  ForwardingSpec spec;
  Millis idle_eviction{60000};
  Fd fd;
  uint16_t port = 0;
  std::thread recv_thread;
  std::atomic<bool> stopped{false};
  std::atomic<uint64_t> oversize{0};
  std::atomic<uint64_t> next_datagram_id{1};

  struct Peer {
    uint64_t datagram_id;
    Channel channel;
    std::chrono::steady_clock::time_point last_active;
  };
  mutable std::mutex mutex;
  std::map<std::string, Peer> peers;  // key: packed sockaddr

  void recv_loop() {
    Bytes buf(65536);
    auto last_sweep = std::chrono::steady_clock::now();
    while (!stopped) {
      pollfd pfd{fd.fd, POLLIN, 0};
      int ready = ::poll(&pfd, 1, 250);
      auto now = std::chrono::steady_clock::now();
      if (ready > 0) {
        for (;;) {
          sockaddr_storage from{};
          socklen_t from_len = sizeof from;
          ssize_t n = ::recvfrom(fd.fd, buf.data(), buf.size(), MSG_DONTWAIT,
                                 reinterpret_cast<sockaddr*>(&from), &from_len);
          if (n < 0) break;
          handle_local_datagram(ByteView(buf.data(), static_cast<size_t>(n)), from, from_len,
                                now);
        }
      }
      if (now - last_sweep > Millis(1000)) {
        evict_idle(now);
        last_sweep = now;
      }
    }
  }

  void handle_local_datagram(ByteView payload, const sockaddr_storage& from, socklen_t from_len,
                             std::chrono::steady_clock::time_point now) {
    std::string key(reinterpret_cast<const char*>(&from), from_len);
    uint64_t datagram_id;
    {
      std::lock_guard lock(mutex);
      auto it = peers.find(key);
      if (it == peers.end()) {
        uint64_t id = next_datagram_id.fetch_add(1);
        Channel ch;
        try {
          ch = conv.open_channel(
              {wire::ChannelType::DirectUdp, spec.target_host, spec.target_port, id});
        } catch (const std::exception& e) {
          log::warn("udp forward: cannot open channel: {}", e.what());
          return;
        }
        // Replies for this peer flow back through the registered route.
        sockaddr_storage peer_addr = from;
        int sock = fd.fd;
        conv.register_udp_route(id, [sock, peer_addr, from_len](Bytes reply) {
          ::sendto(sock, reply.data(), reply.size(), MSG_DONTWAIT,
                   reinterpret_cast<const sockaddr*>(&peer_addr), from_len);
        });
        it = peers.emplace(key, Peer{id, std::move(ch), now}).first;
      }
      it->second.last_active = now;
      datagram_id = it->second.datagram_id;
    }
    send_tunnelled(datagram_id, payload);
  }

  void send_tunnelled(uint64_t datagram_id, ByteView payload) {
    try {
      conv.send_udp_frame(datagram_id, payload);
    } catch (const TransportError& e) {
      if (e.kind == TransportError::Kind::Config) {
        // Larger than the tunnel datagram capacity: dropped, like UDP would.
        oversize.fetch_add(1);
        return;
      }
      log::warn("udp forward: {}", e.what());
    }
  }

  void evict_idle(std::chrono::steady_clock::time_point now) {
    std::vector<Peer> evicted;
    {
      std::lock_guard lock(mutex);
      for (auto it = peers.begin(); it != peers.end();) {
        if (now - it->second.last_active > idle_eviction) {
          evicted.push_back(std::move(it->second));
          it = peers.erase(it);
        } else {
          ++it;
        }
      }
    }
    for (auto& peer : evicted) {
      conv.unregister_udp_route(peer.datagram_id);
      peer.channel.close();
    }
  }

  void stop() {
    bool expected = false;
    if (!stopped.compare_exchange_strong(expected, true)) return;
    if (recv_thread.joinable()) recv_thread.join();
    std::lock_guard lock(mutex);
    for (auto& [key, peer] : peers) {
      conv.unregister_udp_route(peer.datagram_id);
      peer.channel.close();
    }
    peers.clear();
    fd.reset();
  }
};

UdpForwarder::UdpForwarder(Conversation conv, ForwardingSpec spec, Millis idle_eviction)
    : impl_(std::make_shared<Impl>()) {
  impl_->conv = std::move(conv);
  impl_->spec = spec;
  impl_->idle_eviction = idle_eviction;

  auto addr = resolve(spec.bind_host, spec.bind_port, SOCK_DGRAM);
  if (!addr) throw TransportError(TransportError::Kind::Config,
                                  fmt::format("cannot resolve bind address {}", spec.bind_host));
  impl_->fd = Fd(::socket(addr->family, SOCK_DGRAM, 0));
  if (!impl_->fd)
    throw TransportError(TransportError::Kind::Config, "cannot create UDP socket");
  int size = 4 * 1024 * 1024;
  setsockopt(impl_->fd.fd, SOL_SOCKET, SO_RCVBUF, &size, sizeof size);
  setsockopt(impl_->fd.fd, SOL_SOCKET, SO_SNDBUF, &size, sizeof size);
  if (::bind(impl_->fd.fd, reinterpret_cast<sockaddr*>(&addr->addr), addr->len) != 0)
    throw TransportError(TransportError::Kind::Config,
                         fmt::format("cannot bind {}:{}: {}", spec.bind_host, spec.bind_port,
                                     strerror(errno)));
  impl_->port = bound_port(impl_->fd.fd);
  impl_->recv_thread = std::thread([impl = impl_] { impl->recv_loop(); });
}

UdpForwarder::~UdpForwarder() {
  if (impl_) impl_->stop();
}
uint16_t UdpForwarder::port() const { return impl_->port; }
uint64_t UdpForwarder::oversize_drops() const { return impl_->oversize.load(); }
void UdpForwarder::stop() { impl_->stop(); }

size_t UdpForwarder::peer_count() const {
  std::lock_guard lock(impl_->mutex);
  return impl_->peers.size();
}

// --- server UDP handler -----------------------------------------------------------------------

void serve_udp_channel(Conversation& conv, Channel ch) {
  const auto& preamble = ch.preamble();
  uint64_t datagram_id = preamble.datagram_id;

  auto addr = resolve(preamble.target_host, preamble.target_port, SOCK_DGRAM);
  if (!addr) {
    ch.reset(errc::kTargetDns);
    return;
  }
  int raw_fd = ::socket(addr->family, SOCK_DGRAM, 0);
  if (raw_fd < 0) {
    ch.reset(errc::kInternal);
    return;
  }
  auto fd = std::make_shared<Fd>(raw_fd);
  int size = 4 * 1024 * 1024;
  setsockopt(fd->fd, SOL_SOCKET, SO_RCVBUF, &size, sizeof size);
  setsockopt(fd->fd, SOL_SOCKET, SO_SNDBUF, &size, sizeof size);
  if (::connect(fd->fd, reinterpret_cast<sockaddr*>(&addr->addr), addr->len) != 0) {
    ch.reset(errc::kTargetRefused);
    return;
  }

  // Tunnel -> target socket.
  conv.register_udp_route(datagram_id, [fd](Bytes payload) {
    ::send(fd->fd, payload.data(), payload.size(), MSG_DONTWAIT);
  });

  // Target socket -> tunnel; runs until the channel stream ends.
  std::atomic<bool> done{false};
  std::thread back_pump([&conv, &done, fd, datagram_id] {
    Bytes buf(65536);
    while (!done) {
      pollfd pfd{fd->fd, POLLIN, 0};
      if (::poll(&pfd, 1, 250) <= 0) continue;
      ssize_t n = ::recv(fd->fd, buf.data(), buf.size(), MSG_DONTWAIT);
      if (n < 0) continue;
      try {
        conv.send_udp_frame(datagram_id, ByteView(buf.data(), static_cast<size_t>(n)));
      } catch (const TransportError&) {
        // Oversize for the tunnel or conversation gone; both are drops.
      }
    }
  });

  try {
    while (ch.next_message()) {
      // The channel stream is only a lifetime anchor for the route.
    }
  } catch (const ChannelError&) {
  }
  done = true;
  back_pump.join();
  conv.unregister_udp_route(datagram_id);
}

session::Server::ChannelHandler make_udp_handler() {
  return [](Conversation& conv, Channel ch) { serve_udp_channel(conv, std::move(ch)); };
}

}  // namespace quicshell::forward
