// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <arpa/inet.h>
#include <fmt/format.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cstring>
#include <thread>

#include "quicshell/forward.hpp"
#include "quicshell/keys.hpp"
#include "server_fixture.hpp"
#include "testutil.hpp"

using namespace quicshell;
using namespace quicshell::forward;
using namespace std::chrono_literals;
using quicshell::testutil::ServerFixture;

namespace {

// Minimal local TCP echo server for oracle comparisons.
struct TcpEchoServer {
  int listen_fd = -1;
  uint16_t port = 0;
  std::thread thread;
  std::atomic<bool> stop{false};
  std::atomic<int> connections{0};

  TcpEchoServer() {
    listen_fd = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    REQUIRE(::bind(listen_fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0);
    REQUIRE(::listen(listen_fd, 16) == 0);
    socklen_t len = sizeof addr;
    getsockname(listen_fd, reinterpret_cast<sockaddr*>(&addr), &len);
    port = ntohs(addr.sin_port);
    thread = std::thread([this] { run(); });
  }

  void run() {
    while (!stop) {
      pollfd pfd{listen_fd, POLLIN, 0};
      if (::poll(&pfd, 1, 100) <= 0) continue;
      int fd = ::accept(listen_fd, nullptr, nullptr);
      if (fd < 0) continue;
      connections++;
      std::thread([fd] {
        Bytes buf(64 * 1024);
        for (;;) {
          ssize_t n = ::read(fd, buf.data(), buf.size());
          if (n <= 0) break;
          size_t off = 0;
          while (off < static_cast<size_t>(n)) {
            ssize_t w = ::send(fd, buf.data() + off, n - off, MSG_NOSIGNAL);
            if (w <= 0) break;
            off += w;
          }
        }
        ::close(fd);
      }).detach();
    }
  }

  ~TcpEchoServer() {
    stop = true;
    if (thread.joinable()) thread.join();
    ::close(listen_fd);
  }
};

// Minimal local UDP echo server.
struct UdpEchoServer {
  int fd = -1;
  uint16_t port = 0;
  std::thread thread;
  std::atomic<bool> stop{false};

  UdpEchoServer() {
    fd = ::socket(AF_INET, SOCK_DGRAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    REQUIRE(::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0);
    socklen_t len = sizeof addr;
    getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
    port = ntohs(addr.sin_port);
    thread = std::thread([this] { run(); });
  }

  void run() {
    Bytes buf(65536);
    while (!stop) {
      pollfd pfd{fd, POLLIN, 0};
      if (::poll(&pfd, 1, 100) <= 0) continue;
      sockaddr_storage from{};
      socklen_t from_len = sizeof from;
      ssize_t n = ::recvfrom(fd, buf.data(), buf.size(), MSG_DONTWAIT,
                             reinterpret_cast<sockaddr*>(&from), &from_len);
      if (n < 0) continue;
      ::sendto(fd, buf.data(), n, MSG_DONTWAIT, reinterpret_cast<sockaddr*>(&from), from_len);
    }
  }

  ~UdpEchoServer() {
    stop = true;
    if (thread.joinable()) thread.join();
    ::close(fd);
  }
};

// Datagrams may race channel setup by design: prime the path until the
// first echo returns, so measurements start with a live route.
bool prime_udp_path(int fd) {
  Bytes probe = to_bytes("prime");
  Bytes buf(2048);
  for (int attempt = 0; attempt < 200; attempt++) {
    if (::send(fd, probe.data(), probe.size(), 0) < 0) return false;
    pollfd pfd{fd, POLLIN, 0};
    if (::poll(&pfd, 1, 25) > 0) {
      while (::recv(fd, buf.data(), buf.size(), MSG_DONTWAIT) >= 0) {
      }
      return true;
    }
  }
  return false;
}

int dial_tcp(uint16_t port) {
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(port);
  REQUIRE(::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0);
  return fd;
}

struct ForwardFixture {
  ServerFixture fx;
  session::Conversation conv;

  ForwardFixture() {
    fx.server->set_tcp_handler(make_tcp_handler(session::Millis(3000)));
    fx.server->set_udp_handler(make_udp_handler());
    fx.server->start();
    conv = session::open_conversation(fx.client_options());
  }
  ~ForwardFixture() {
    conv.close();
    fx.server->stop();
  }
};

}  // namespace

TEST_CASE("forwarding spec grammar round-trips and rejects nonsense") {
  auto spec = ForwardingSpec::parse("tcp/127.0.0.1:8080/remote.example:80");
  REQUIRE(spec.has_value());
  CHECK(spec->protocol == ForwardingSpec::Protocol::Tcp);
  CHECK(spec->bind_host == "127.0.0.1");
  CHECK(spec->bind_port == 8080);
  CHECK(spec->target_host == "remote.example");
  CHECK(spec->target_port == 80);
  CHECK(spec->to_string() == "tcp/127.0.0.1:8080/remote.example:80");

  auto udp = ForwardingSpec::parse("udp/:5353/127.0.0.1:53");
  REQUIRE(udp.has_value());
  CHECK(udp->protocol == ForwardingSpec::Protocol::Udp);
  CHECK(udp->bind_host == "127.0.0.1");  // empty bind defaults to loopback

  CHECK_FALSE(ForwardingSpec::parse("sctp/a:1/b:2").has_value());
  CHECK_FALSE(ForwardingSpec::parse("tcp/a:0/b:2").has_value());
  CHECK_FALSE(ForwardingSpec::parse("tcp/a:1/b:70000").has_value());
  CHECK_FALSE(ForwardingSpec::parse("tcp/a:1").has_value());
  CHECK_FALSE(ForwardingSpec::parse("tcp/a:1/:2").has_value());
}

TEST_CASE("tcp forward relays a large payload byte-exactly both ways") {
  ForwardFixture f;
  TcpEchoServer echo;

  ForwardingSpec spec;
  spec.protocol = ForwardingSpec::Protocol::Tcp;
  spec.target_host = "127.0.0.1";
  spec.target_port = echo.port;
  TcpForwarder forwarder(f.conv, spec);

  int fd = dial_tcp(forwarder.port());
  Bytes blob = random_bytes(2 * 1024 * 1024);

  std::thread writer([&] {
    size_t off = 0;
    while (off < blob.size()) {
      ssize_t n = ::send(fd, blob.data() + off, std::min<size_t>(blob.size() - off, 65536),
                         MSG_NOSIGNAL);
      REQUIRE(n > 0);
      off += n;
    }
    ::shutdown(fd, SHUT_WR);
  });

  Bytes got;
  got.reserve(blob.size());
  Bytes buf(64 * 1024);
  while (got.size() < blob.size()) {
    ssize_t n = ::read(fd, buf.data(), buf.size());
    REQUIRE(n > 0);
    got.insert(got.end(), buf.begin(), buf.begin() + n);
  }
  writer.join();
  CHECK(keys::sha256(got) == keys::sha256(blob));
  ::close(fd);
  forwarder.stop();
}

TEST_CASE("two simultaneous TCP connections stay isolated") {
  ForwardFixture f;
  TcpEchoServer echo;
  ForwardingSpec spec;
  spec.protocol = ForwardingSpec::Protocol::Tcp;
  spec.target_host = "127.0.0.1";
  spec.target_port = echo.port;
  TcpForwarder forwarder(f.conv, spec);

  std::atomic<int> failures{0};
  std::vector<std::thread> threads;
  for (int t = 0; t < 2; t++) {
    threads.emplace_back([&, t] {
      int fd = dial_tcp(forwarder.port());
      for (int round = 0; round < 50; round++) {
        std::string msg = fmt::format("conn-{}-round-{}", t, round);
        REQUIRE(::send(fd, msg.data(), msg.size(), MSG_NOSIGNAL) ==
                static_cast<ssize_t>(msg.size()));
        std::string back(msg.size(), '\0');
        size_t have = 0;
        while (have < back.size()) {
          ssize_t n = ::read(fd, back.data() + have, back.size() - have);
          if (n <= 0) {
            failures++;
            ::close(fd);
            return;
          }
          have += n;
        }
        if (back != msg) failures++;
      }
      ::close(fd);
    });
  }
  for (auto& t : threads) t.join();
  CHECK(failures == 0);
  CHECK(forwarder.connections_total() == 2);
  CHECK(echo.connections == 2);
  forwarder.stop();
}

TEST_CASE("refused target closes only that local connection") {
  ForwardFixture f;

  // Grab a port with no listener behind it.
  int probe = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  REQUIRE(::bind(probe, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0);
  socklen_t len = sizeof addr;
  getsockname(probe, reinterpret_cast<sockaddr*>(&addr), &len);
  uint16_t dead_port = ntohs(addr.sin_port);
  ::close(probe);  // released: connections will be refused

  ForwardingSpec spec;
  spec.protocol = ForwardingSpec::Protocol::Tcp;
  spec.target_host = "127.0.0.1";
  spec.target_port = dead_port;
  TcpForwarder forwarder(f.conv, spec);

  int fd = dial_tcp(forwarder.port());
  Bytes buf(64);
  // The relay closes our connection promptly once the remote refuses.
  pollfd pfd{fd, POLLIN, 0};
  REQUIRE(::poll(&pfd, 1, 5000) > 0);
  CHECK(::read(fd, buf.data(), buf.size()) <= 0);
  ::close(fd);

  // Conversation unaffected: the forwarder still accepts and would relay.
  CHECK_FALSE(f.conv.is_closed());
  forwarder.stop();
}

TEST_CASE("server-side reset codes distinguish refused from dns failure") {
  ForwardFixture f;

  auto expect_reset = [&](const std::string& host, uint16_t port, uint64_t expected_code) {
    session::Channel ch = f.conv.open_channel({wire::ChannelType::DirectTcp, host, port, 0});
    try {
      while (ch.next_message(session::Millis(8000))) {
      }
      FAIL("expected reset");
    } catch (const session::ChannelError& e) {
      CHECK(e.code == expected_code);
    }
  };

  int probe = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  REQUIRE(::bind(probe, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0);
  socklen_t len = sizeof addr;
  getsockname(probe, reinterpret_cast<sockaddr*>(&addr), &len);
  uint16_t dead_port = ntohs(addr.sin_port);
  ::close(probe);

  expect_reset("127.0.0.1", dead_port, transport::errc::kTargetRefused);
  expect_reset("no-such-host.invalid", 80, transport::errc::kTargetDns);
}

TEST_CASE("udp forward: sequence-numbered datagrams all arrive intact") {
  ForwardFixture f;
  UdpEchoServer echo;

  ForwardingSpec spec;
  spec.protocol = ForwardingSpec::Protocol::Udp;
  spec.target_host = "127.0.0.1";
  spec.target_port = echo.port;
  UdpForwarder forwarder(f.conv, spec);

  int fd = ::socket(AF_INET, SOCK_DGRAM, 0);
  sockaddr_in to{};
  to.sin_family = AF_INET;
  to.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  to.sin_port = htons(forwarder.port());
  REQUIRE(::connect(fd, reinterpret_cast<sockaddr*>(&to), sizeof to) == 0);
  REQUIRE(prime_udp_path(fd));

  constexpr int kCount = 300;
  std::vector<bool> seen(kCount, false);
  std::atomic<bool> receiver_trouble{false};
  std::thread receiver([&] {
    Bytes buf(2048);
    int received = 0;
    auto deadline = std::chrono::steady_clock::now() + 10s;
    while (received < kCount && std::chrono::steady_clock::now() < deadline) {
      pollfd pfd{fd, POLLIN, 0};
      if (::poll(&pfd, 1, 100) <= 0) continue;
      ssize_t n = ::recv(fd, buf.data(), buf.size(), MSG_DONTWAIT);
      if (n < 12) continue;
      uint32_t seq = 0;
      std::memcpy(&seq, buf.data(), 4);
      if (seq >= kCount) {
        receiver_trouble = true;
        continue;
      }
      bool ok = n == 512;
      for (ssize_t i = 4; i < n && ok; i++)
        ok = buf[i] == static_cast<uint8_t>((seq + i) & 0xff);
      if (ok && !seen[seq]) {
        seen[seq] = true;
        received++;
      }
    }
  });

  for (uint32_t seq = 0; seq < kCount; seq++) {
    Bytes payload(512);
    std::memcpy(payload.data(), &seq, 4);
    for (size_t i = 4; i < payload.size(); i++)
      payload[i] = static_cast<uint8_t>((seq + i) & 0xff);
    REQUIRE(::send(fd, payload.data(), payload.size(), 0) ==
            static_cast<ssize_t>(payload.size()));
    // Light pacing keeps loopback buffers comfortable.
    if (seq % 32 == 31) std::this_thread::sleep_for(1ms);
  }
  receiver.join();
  int delivered = 0;
  for (bool s : seen) delivered += s;
  CHECK(delivered == kCount);
  CHECK_FALSE(receiver_trouble.load());
  CHECK(forwarder.peer_count() == 1);
  ::close(fd);
  forwarder.stop();
}

TEST_CASE("udp forward: oversize payload dropped and counted; smaller ones flow") {
  ForwardFixture f;
  UdpEchoServer echo;
  ForwardingSpec spec;
  spec.protocol = ForwardingSpec::Protocol::Udp;
  spec.target_host = "127.0.0.1";
  spec.target_port = echo.port;
  UdpForwarder forwarder(f.conv, spec);

  int fd = ::socket(AF_INET, SOCK_DGRAM, 0);
  sockaddr_in to{};
  to.sin_family = AF_INET;
  to.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  to.sin_port = htons(forwarder.port());
  REQUIRE(::connect(fd, reinterpret_cast<sockaddr*>(&to), sizeof to) == 0);
  REQUIRE(prime_udp_path(fd));

  Bytes oversize(60000, 0xab);
  REQUIRE(::send(fd, oversize.data(), oversize.size(), 0) > 0);

  Bytes small = to_bytes("fits fine");
  REQUIRE(::send(fd, small.data(), small.size(), 0) > 0);

  Bytes buf(2048);
  pollfd pfd{fd, POLLIN, 0};
  REQUIRE(::poll(&pfd, 1, 5000) > 0);
  ssize_t n = ::recv(fd, buf.data(), buf.size(), 0);
  REQUIRE(n == static_cast<ssize_t>(small.size()));
  CHECK(Bytes(buf.begin(), buf.begin() + n) == small);
  CHECK(forwarder.oversize_drops() == 1);
  ::close(fd);
  forwarder.stop();
}

TEST_CASE("udp forward: two local peers get their replies demultiplexed") {
  ForwardFixture f;
  UdpEchoServer echo;
  ForwardingSpec spec;
  spec.protocol = ForwardingSpec::Protocol::Udp;
  spec.target_host = "127.0.0.1";
  spec.target_port = echo.port;
  UdpForwarder forwarder(f.conv, spec);

  auto exchange = [&](int fd, const std::string& tag) -> int {
    sockaddr_in to{};
    to.sin_family = AF_INET;
    to.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    to.sin_port = htons(forwarder.port());
    if (::connect(fd, reinterpret_cast<sockaddr*>(&to), sizeof to) != 0) return -1;
    if (!prime_udp_path(fd)) return -2;
    int good = 0;
    for (int i = 0; i < 20; i++) {
      std::string msg = tag + "-" + std::to_string(i);
      if (::send(fd, msg.data(), msg.size(), 0) < 0) break;
      Bytes buf(512);
      pollfd pfd{fd, POLLIN, 0};
      if (::poll(&pfd, 1, 5000) <= 0) break;
      ssize_t n = ::recv(fd, buf.data(), buf.size(), 0);
      if (n > 0 && std::string(buf.begin(), buf.begin() + n) == msg) good++;
    }
    return good;
  };

  int fd_a = ::socket(AF_INET, SOCK_DGRAM, 0);
  int fd_b = ::socket(AF_INET, SOCK_DGRAM, 0);
  int good_a = 0, good_b = 0;
  std::thread ta([&] { good_a = exchange(fd_a, "peer-a"); });
  std::thread tb([&] { good_b = exchange(fd_b, "peer-b"); });
  ta.join();
  tb.join();
  CHECK(good_a == 20);
  CHECK(good_b == 20);
  CHECK(forwarder.peer_count() == 2);
  ::close(fd_a);
  ::close(fd_b);
  forwarder.stop();
}

TEST_CASE("teardown symmetry: closing the local side closes the remote end") {
  ForwardFixture f;
  TcpEchoServer echo;
  ForwardingSpec spec;
  spec.protocol = ForwardingSpec::Protocol::Tcp;
  spec.target_host = "127.0.0.1";
  spec.target_port = echo.port;
  TcpForwarder forwarder(f.conv, spec);

  int fd = dial_tcp(forwarder.port());
  REQUIRE(::send(fd, "x", 1, MSG_NOSIGNAL) == 1);
  Bytes buf(16);
  REQUIRE(::read(fd, buf.data(), buf.size()) == 1);
  ::close(fd);

  // The echo server's connection handler sees EOF and exits; verify by
  // opening a fresh connection which still works (relay state is clean).
  std::this_thread::sleep_for(200ms);
  int fd2 = dial_tcp(forwarder.port());
  REQUIRE(::send(fd2, "y", 1, MSG_NOSIGNAL) == 1);
  REQUIRE(::read(fd2, buf.data(), buf.size()) == 1);
  CHECK(buf[0] == 'y');
  ::close(fd2);
  forwarder.stop();
}
