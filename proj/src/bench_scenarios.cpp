// SPDX-License-Identifier: Apache-2.0
#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <fmt/format.h>

#include <atomic>
#include <cstring>
#include <thread>

#include "quicshell/bench.hpp"
#include "quicshell/exec.hpp"
#include "quicshell/keys.hpp"
#include "quicshell/log.hpp"

namespace quicshell::bench {

using Clock = std::chrono::steady_clock;
using session::Channel;
using session::Conversation;
using session::Millis;

// --- rig ---------------------------------------------------------------------

struct Rig::Impl {
  keys::SelfSignedCert cert = keys::generate_self_signed("localhost");
  std::string username = "bench";
  std::string password;
  std::unique_ptr<session::Server> server;
  std::unique_ptr<LatencyProxy> proxy;
  uint16_t dial_port = 0;
};

Rig::Rig() : Rig(Options{}) {}

Rig::Rig(Options options) : impl_(std::make_unique<Impl>()) {
  impl_->password = hex_encode(random_bytes(12));

  session::ServerConfig config;
  config.listen_host = "127.0.0.1";
  config.cert_pem = impl_->cert.cert_pem;
  config.key_pem = impl_->cert.key_pem;
  config.url_path = "/bench";
  config.max_channels = options.max_channels;
  config.idle_timeout = options.idle_timeout;
  auth::UserEntries entries;
  entries.passwords.push_back(auth::make_password_hash(impl_->password));
  config.store.add_user(impl_->username, std::move(entries));

  impl_->server = std::make_unique<session::Server>(std::move(config));
  impl_->server->set_session_handler(exec::make_session_handler());
  impl_->server->set_tcp_handler(forward::make_tcp_handler());
  impl_->server->set_udp_handler(forward::make_udp_handler());
  impl_->server->start();
  impl_->dial_port = impl_->server->port();

  if (options.rtt_ms > 0) {
    LatencyProxy::Options proxy_options;
    proxy_options.one_way_delay = Millis(options.rtt_ms / 2);
    proxy_options.target_port = impl_->server->port();
    impl_->proxy = std::make_unique<LatencyProxy>(proxy_options);
    impl_->dial_port = impl_->proxy->listen_port();
  }
}

Rig::~Rig() {
  if (impl_ && impl_->server) impl_->server->stop();
}

session::ClientOptions Rig::client_options() const {
  session::ClientOptions options;
  options.host = "127.0.0.1";
  options.port = impl_->dial_port;
  options.path = "/bench";
  options.username = impl_->username;
  options.credential = auth::PasswordCredential{impl_->username, impl_->password};
  options.pinned_cert_sha256 = keys::cert_fingerprint_from_pem(impl_->cert.cert_pem);
  options.server_name = "localhost";
  return options;
}

session::Conversation Rig::connect() const { return session::open_conversation(client_options()); }

session::Server& Rig::server() { return *impl_->server; }
uint16_t Rig::server_port() const { return impl_->server->port(); }

// --- session completion -----------------------------------------------------------

RunReport measure_session_completion(Rig& rig, const CompletionOptions& options) {
  if (options.n <= 0) throw std::invalid_argument("sample count must be positive");

  RunReport report;
  report.scenario = options.scenario_name;
  auto client_options = rig.client_options();

  for (int i = 0; i < options.n; i++) {
    auto t0 = Clock::now();
    Conversation conv = session::open_conversation(client_options);
    Channel ch = conv.open_channel({wire::ChannelType::Session, "", 0, 0});
    ch.send_message(wire::ExecRequest{options.command});

    bool exited = false;
    size_t output_bytes = 0;
    while (auto m = ch.next_message(Millis(30000))) {
      if (const auto* data = std::get_if<wire::Data>(&*m)) {
        output_bytes += data->payload.size();
      } else if (std::holds_alternative<wire::ExitStatus>(*m) ||
                 std::holds_alternative<wire::ExitSignal>(*m)) {
        exited = true;
      }
    }
    (void)output_bytes;
    auto depth = conv.connection().first_send_depth(ch.id());
    conv.close();
    auto elapsed = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    if (!exited)
      throw std::runtime_error(
          fmt::format("session {} ended without an exit message", i));

    report.samples.push_back(elapsed);
    report.round_trips.push_back(depth.value_or(0));
  }
  report.finalize();
  return report;
}

// --- echo latency ---------------------------------------------------------------------

RunReport measure_echo_latency(Rig& rig, const EchoLatencyOptions& options) {
  if (options.keystrokes <= 0) throw std::invalid_argument("sample count must be positive");

  RunReport report;
  report.scenario = options.scenario_name;

  Conversation conv = rig.connect();
  Channel ch = conv.open_channel({wire::ChannelType::Session, "", 0, 0});
  ch.send_message(wire::PtyRequest{"dumb", 80, 24});
  ch.send_message(wire::ExecRequest{"cat"});

  auto await_echo = [&](char expected) -> bool {
    auto deadline = Clock::now() + Millis(10000);
    while (Clock::now() < deadline) {
      auto remaining = std::chrono::duration_cast<Millis>(deadline - Clock::now());
      auto m = ch.next_message(remaining);
      if (!m) return false;
      if (const auto* data = std::get_if<wire::Data>(&*m)) {
        for (uint8_t b : data->payload)
          if (static_cast<char>(b) == expected) return true;
      }
      if (std::holds_alternative<wire::ExitStatus>(*m) ||
          std::holds_alternative<wire::ExitSignal>(*m))
        return false;
    }
    return false;
  };

  // Warm up: wait for cat to be live under the pty before timing.
  for (int warm = 0; warm < 3; warm++) {
    ch.send_message(wire::Data{wire::DataKind::Stdin, to_bytes("w")});
    if (!await_echo('w'))
      throw std::runtime_error("echo scenario: no echo from remote cat");
  }

  const char alphabet[] = "abcdefghijklmnopqrstuvwxyz0123456789";
  for (int i = 0; i < options.keystrokes; i++) {
    char key = alphabet[i % (sizeof(alphabet) - 1)];
    auto t0 = Clock::now();
    ch.send_message(wire::Data{wire::DataKind::Stdin, Bytes{static_cast<uint8_t>(key)}});
    if (!await_echo(key)) throw std::runtime_error("echo scenario: missing echo");
    report.samples.push_back(
        std::chrono::duration<double, std::milli>(Clock::now() - t0).count());
  }
  conv.close();
  report.finalize();
  return report;
}

// --- forwarding throughput ----------------------------------------------------------------

namespace {

struct PatternWriter {
  uint64_t offset = 0;
  void fill(Bytes& buf) {
    for (auto& b : buf) b = static_cast<uint8_t>((offset++ * 31) & 0xff);
  }
};

struct PatternChecker {
  uint64_t offset = 0;
  bool corrupt = false;
  void check(ByteView data) {
    for (uint8_t b : data) {
      if (b != static_cast<uint8_t>((offset++ * 31) & 0xff)) corrupt = true;
    }
  }
};

uint16_t tcp_sink_port(int fd) {
  sockaddr_in addr{};
  socklen_t len = sizeof addr;
  getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  return ntohs(addr.sin_port);
}

RunReport tcp_throughput(Rig& rig, const ThroughputOptions& options) {
  // Byte-counting sink with pattern verification.
  int listen_fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  if (::bind(listen_fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 ||
      ::listen(listen_fd, 4) != 0)
    throw std::runtime_error("cannot bind throughput sink");
  uint16_t sink_port = tcp_sink_port(listen_fd);

  std::atomic<uint64_t> sink_bytes{0};
  std::atomic<bool> sink_corrupt{false};
  std::thread sink([&] {
    int fd = ::accept(listen_fd, nullptr, nullptr);
    if (fd < 0) return;
    PatternChecker checker;
    Bytes buf(256 * 1024);
    for (;;) {
      ssize_t n = ::read(fd, buf.data(), buf.size());
      if (n <= 0) break;
      checker.check(ByteView(buf.data(), static_cast<size_t>(n)));
      sink_bytes.fetch_add(static_cast<uint64_t>(n), std::memory_order_relaxed);
    }
    sink_corrupt = checker.corrupt;
    ::close(fd);
  });

  Conversation conv = rig.connect();
  forward::ForwardingSpec spec;
  spec.protocol = forward::ForwardingSpec::Protocol::Tcp;
  spec.target_host = "127.0.0.1";
  spec.target_port = sink_port;
  forward::TcpForwarder forwarder(conv, spec);

  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in to{};
  to.sin_family = AF_INET;
  to.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  to.sin_port = htons(forwarder.port());
  if (::connect(fd, reinterpret_cast<sockaddr*>(&to), sizeof to) != 0)
    throw std::runtime_error("cannot dial forwarder");
  int flag = 1;
  setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &flag, sizeof flag);

  PatternWriter writer;
  Bytes chunk(64 * 1024);
  auto t0 = Clock::now();
  auto deadline = t0 + std::chrono::duration_cast<Clock::duration>(
                           std::chrono::duration<double>(options.seconds));
  uint64_t sent = 0;
  bool corrupted_once = false;
  while (Clock::now() < deadline) {
    writer.fill(chunk);
    if (options.inject_corruption && !corrupted_once && sent > 0) {
      chunk[7] ^= 0x55;
      corrupted_once = true;
    }
    size_t off = 0;
    while (off < chunk.size()) {
      ssize_t n = ::send(fd, chunk.data() + off, chunk.size() - off, MSG_NOSIGNAL);
      if (n <= 0) throw std::runtime_error("throughput sender failed");
      off += static_cast<size_t>(n);
    }
    sent += chunk.size();
  }
  ::shutdown(fd, SHUT_WR);
  double elapsed = std::chrono::duration<double>(Clock::now() - t0).count();

  // Wait for the sink to drain the tail.
  auto drain_deadline = Clock::now() + std::chrono::seconds(20);
  while (sink_bytes.load() < sent && Clock::now() < drain_deadline)
    std::this_thread::sleep_for(Millis(10));
  ::close(fd);
  ::close(listen_fd);
  sink.join();
  forwarder.stop();
  conv.close();

  if (sink_bytes.load() != sent)
    throw std::runtime_error(fmt::format("sink received {} of {} bytes", sink_bytes.load(), sent));
  if (sink_corrupt) throw std::runtime_error("sink detected payload corruption");

  RunReport report;
  report.scenario = options.scenario_name;
  report.samples.push_back(static_cast<double>(sent) * 8 / elapsed / 1e6);
  report.finalize();
  return report;
}

RunReport udp_throughput(Rig& rig, const ThroughputOptions& options) {
  int sink_fd = ::socket(AF_INET, SOCK_DGRAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  if (::bind(sink_fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0)
    throw std::runtime_error("cannot bind udp sink");
  int size = 8 * 1024 * 1024;
  setsockopt(sink_fd, SOL_SOCKET, SO_RCVBUF, &size, sizeof size);
  uint16_t sink_port = [&] {
    sockaddr_in a{};
    socklen_t len = sizeof a;
    getsockname(sink_fd, reinterpret_cast<sockaddr*>(&a), &len);
    return ntohs(a.sin_port);
  }();

  std::atomic<uint64_t> sink_bytes{0};
  std::atomic<uint64_t> sink_datagrams{0};
  std::atomic<bool> sink_corrupt{false};
  std::atomic<bool> sink_stop{false};
  std::thread sink([&] {
    Bytes buf(65536);
    while (!sink_stop) {
      pollfd pfd{sink_fd, POLLIN, 0};
      if (::poll(&pfd, 1, 50) <= 0) continue;
      for (;;) {
        ssize_t n = ::recv(sink_fd, buf.data(), buf.size(), MSG_DONTWAIT);
        if (n < 0) break;
        if (n >= 4) {
          uint32_t seq;
          std::memcpy(&seq, buf.data(), 4);
          for (ssize_t i = 4; i < n; i++) {
            if (buf[i] != static_cast<uint8_t>((seq + i) & 0xff)) {
              sink_corrupt = true;
              break;
            }
          }
        }
        sink_bytes.fetch_add(static_cast<uint64_t>(n), std::memory_order_relaxed);
        sink_datagrams.fetch_add(1, std::memory_order_relaxed);
      }
    }
  });

  Conversation conv = rig.connect();
  forward::ForwardingSpec spec;
  spec.protocol = forward::ForwardingSpec::Protocol::Udp;
  spec.target_host = "127.0.0.1";
  spec.target_port = sink_port;
  forward::UdpForwarder forwarder(conv, spec);

  int fd = ::socket(AF_INET, SOCK_DGRAM, 0);
  sockaddr_in to{};
  to.sin_family = AF_INET;
  to.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  to.sin_port = htons(forwarder.port());
  if (::connect(fd, reinterpret_cast<sockaddr*>(&to), sizeof to) != 0)
    throw std::runtime_error("cannot dial udp forwarder");

  // Prime the path: tunnelled datagrams may race channel setup. Probes are
  // shorter than a sequence header so the sink never pattern-checks them.
  {
    Bytes probe(3, 0);
    Bytes rbuf(256);
    bool live = false;
    for (int i = 0; i < 200 && !live; i++) {
      [[maybe_unused]] ssize_t s = ::send(fd, probe.data(), probe.size(), 0);
      std::this_thread::sleep_for(Millis(5));
      live = sink_datagrams.load() > 0;
    }
    if (!live) throw std::runtime_error("udp path never came up");
    sink_bytes = 0;
    sink_datagrams = 0;
  }

  Bytes payload(options.datagram_size);
  double rate_bytes_per_sec = options.udp_pace_mbps * 1e6 / 8;
  auto t0 = Clock::now();
  auto deadline = t0 + std::chrono::duration_cast<Clock::duration>(
                           std::chrono::duration<double>(options.seconds));
  uint64_t sent_bytes = 0;
  uint64_t sent_datagrams = 0;
  uint32_t seq = 0;
  bool corrupted_once = false;
  while (Clock::now() < deadline) {
    for (int burst = 0; burst < 16 && Clock::now() < deadline; burst++) {
      std::memcpy(payload.data(), &seq, 4);
      for (size_t i = 4; i < payload.size(); i++)
        payload[i] = static_cast<uint8_t>((seq + i) & 0xff);
      if (options.inject_corruption && !corrupted_once && sent_datagrams > 10) {
        payload[9] ^= 0x55;
        corrupted_once = true;
      }
      if (::send(fd, payload.data(), payload.size(), 0) > 0) {
        sent_bytes += payload.size();
        sent_datagrams++;
        seq++;
      }
    }
    // Pace to the target rate.
    double expected = static_cast<double>(sent_bytes) / rate_bytes_per_sec;
    double actual = std::chrono::duration<double>(Clock::now() - t0).count();
    if (expected > actual)
      std::this_thread::sleep_for(std::chrono::duration<double>(expected - actual));
  }
  double elapsed = std::chrono::duration<double>(Clock::now() - t0).count();
  std::this_thread::sleep_for(Millis(300));  // let the tail land
  sink_stop = true;
  sink.join();
  ::close(fd);
  ::close(sink_fd);
  forwarder.stop();
  conv.close();

  if (sink_corrupt) throw std::runtime_error("sink detected payload corruption");

  RunReport report;
  report.scenario = options.scenario_name;
  report.samples.push_back(static_cast<double>(sink_bytes.load()) * 8 / elapsed / 1e6);
  // Delivery ratio as an auxiliary sample? Keep goodput as the single value;
  // expose counts through round_trips slot zero for CSV stability.
  report.round_trips.push_back(sink_datagrams.load());
  report.finalize();
  return report;
}

}  // namespace

RunReport measure_forward_throughput(Rig& rig, const ThroughputOptions& options) {
  if (options.seconds <= 0) throw std::invalid_argument("duration must be positive");
  return options.protocol == forward::ForwardingSpec::Protocol::Tcp
             ? tcp_throughput(rig, options)
             : udp_throughput(rig, options);
}

}  // namespace quicshell::bench
