// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <condition_variable>
#include <mutex>
#include <thread>

#include "quicshell/bench.hpp"
#include "quicshell/keys.hpp"
#include "quicshell/transport.hpp"
#include "testutil.hpp"

using namespace quicshell;
using namespace quicshell::transport;
using namespace std::chrono_literals;

namespace {

struct TestServer {
  keys::SelfSignedCert cert = keys::generate_self_signed("localhost");
  std::unique_ptr<Listener> listener;

  explicit TestServer(Settings settings = {}, Millis idle = Millis(30000)) {
    ServerTransportConfig config;
    config.settings = settings;
    config.cert_pem = cert.cert_pem;
    config.key_pem = cert.key_pem;
    config.idle_timeout = idle;
    listener = std::make_unique<Listener>("127.0.0.1", 0, config);
  }

  ClientConfig client_config() const {
    ClientConfig config;
    config.server_name = "localhost";
    config.pinned_cert_sha256 = keys::cert_fingerprint_from_pem(cert.cert_pem);
    return config;
  }
};

void read_until_fin(Stream& s, Bytes& out) {
  uint8_t buf[16384];
  for (;;) {
    auto r = s.read_some(std::span(buf, sizeof buf), Millis(10000));
    REQUIRE(r.has_value());
    if (*r == 0) return;
    out.insert(out.end(), buf, buf + *r);
  }
}

}  // namespace

TEST_CASE("handshake on loopback: exporters agree, settings exchanged") {
  TestServer server;
  Connection client = connect("127.0.0.1", server.listener->port(), server.client_config());
  auto server_conn = server.listener->accept(Millis(3000));
  REQUIRE(server_conn.has_value());

  CHECK(client.is_established());
  CHECK(server_conn->is_established());

  Bytes c = client.export_keying_material("EXPORTER-SSH3", {}, 32);
  Bytes s = server_conn->export_keying_material("EXPORTER-SSH3", {}, 32);
  CHECK(c == s);
  CHECK(c.size() == 32);

  auto peer = client.peer_settings(Millis(3000));
  REQUIRE(peer.has_value());
  CHECK(peer->enable_connect_protocol);
  CHECK(peer->max_datagram_frame_size > 0);

  auto client_seen_by_server = server_conn->peer_settings(Millis(3000));
  REQUIRE(client_seen_by_server.has_value());
  CHECK(client_seen_by_server->enable_connect_protocol);

  client.close(errc::kNone, "done");
  CHECK(server_conn->wait_closed(Millis(3000)));
}

TEST_CASE("pin mismatch and unknown CA both fail the dial") {
  TestServer server;

  ClientConfig bad_pin = server.client_config();
  (*bad_pin.pinned_cert_sha256)[0] ^= 0xff;
  CHECK_THROWS_AS(connect("127.0.0.1", server.listener->port(), bad_pin), TransportError);

  ClientConfig ca_mode;
  ca_mode.server_name = "localhost";  // self-signed cert, no pin: must fail
  ca_mode.handshake_timeout = Millis(3000);
  CHECK_THROWS_AS(connect("127.0.0.1", server.listener->port(), ca_mode), TransportError);
}

TEST_CASE("stream echo with FIN in both directions") {
  TestServer server;
  Connection client = connect("127.0.0.1", server.listener->port(), server.client_config());
  auto server_conn = *server.listener->accept(Millis(3000));

  Stream cs = client.open_stream();
  cs.write(as_view("hello stream"), true);

  auto ss = server_conn.accept_stream(Millis(3000));
  REQUIRE(ss.has_value());
  Bytes got;
  read_until_fin(*ss, got);
  CHECK(to_string(got) == "hello stream");
  ss->write(got, true);

  Bytes echoed;
  read_until_fin(cs, echoed);
  CHECK(echoed == got);
  client.close(errc::kNone, "");
}

TEST_CASE("large transfer is byte-exact under flow control") {
  TestServer server;
  Connection client = connect("127.0.0.1", server.listener->port(), server.client_config());
  auto server_conn = *server.listener->accept(Millis(3000));

  Bytes blob = random_bytes(4 * 1024 * 1024);
  std::thread writer([&] {
    Stream cs = client.open_stream();
    cs.write(blob, true);
  });

  auto ss = server_conn.accept_stream(Millis(3000));
  REQUIRE(ss.has_value());
  Bytes got;
  got.reserve(blob.size());
  read_until_fin(*ss, got);
  writer.join();

  REQUIRE(got.size() == blob.size());
  CHECK(keys::sha256(got) == keys::sha256(blob));
  client.close(errc::kNone, "");
}

TEST_CASE("concurrent streams carry tagged payloads without cross-talk") {
  TestServer server;
  Connection client = connect("127.0.0.1", server.listener->port(), server.client_config());
  auto server_conn = *server.listener->accept(Millis(3000));

  // Server echo loop.
  std::thread echo([&] {
    std::vector<std::thread> workers;
    for (int i = 0; i < 8; i++) {
      auto ss = server_conn.accept_stream(Millis(3000));
      if (!ss) break;
      workers.emplace_back([s = *ss]() mutable {
        Bytes data;
        read_until_fin(s, data);
        s.write(data, true);
      });
    }
    for (auto& w : workers) w.join();
  });

  std::vector<std::thread> clients;
  std::atomic<int> failures{0};
  for (int i = 0; i < 8; i++) {
    clients.emplace_back([&, i] {
      Bytes payload(50000 + i * 1000, static_cast<uint8_t>(0x40 + i));
      Stream cs = client.open_stream();
      cs.write(payload, true);
      Bytes back;
      read_until_fin(cs, back);
      if (back != payload) failures++;
    });
  }
  for (auto& t : clients) t.join();
  echo.join();
  CHECK(failures == 0);
  client.close(errc::kNone, "");
}

TEST_CASE("retransmission recovers from injected loss") {
  TestServer server;
  bench::LatencyProxy::Options opts;
  opts.one_way_delay = 5ms;
  opts.target_port = server.listener->port();
  opts.drop_every = 7;
  bench::LatencyProxy proxy(opts);

  Connection client = connect("127.0.0.1", proxy.listen_port(), server.client_config());
  auto server_conn = *server.listener->accept(Millis(5000));

  Bytes blob = random_bytes(512 * 1024);
  std::thread writer([&] {
    Stream cs = client.open_stream();
    cs.write(blob, true);
    // And read the echo back through the lossy path.
    Bytes back;
    read_until_fin(cs, back);
    CHECK(keys::sha256(back) == keys::sha256(blob));
  });

  auto ss = server_conn.accept_stream(Millis(5000));
  REQUIRE(ss.has_value());
  Bytes got;
  read_until_fin(*ss, got);
  REQUIRE(got.size() == blob.size());
  CHECK(keys::sha256(got) == keys::sha256(blob));
  ss->write(got, true);
  writer.join();

  CHECK(client.stats().packets_retransmitted > 0);
  CHECK(proxy.packets_dropped() > 0);
  client.close(errc::kNone, "");
}

TEST_CASE("causality chain depths under injected latency") {
  TestServer server;
  bench::LatencyProxy::Options opts;
  opts.one_way_delay = 25ms;  // RTT 50ms
  opts.target_port = server.listener->port();
  bench::LatencyProxy proxy(opts);

  auto t0 = std::chrono::steady_clock::now();
  Connection client = connect("127.0.0.1", proxy.listen_port(), server.client_config());
  auto handshake_elapsed = std::chrono::steady_clock::now() - t0;
  auto server_conn = *server.listener->accept(Millis(5000));

  // Handshake costs one round trip: client hello out, server flight back.
  CHECK(handshake_elapsed >= 45ms);
  CHECK(handshake_elapsed < 200ms);
  CHECK(client.crypto_send_depth() == 2);  // the finished flight

  Stream cs = client.open_stream();
  cs.write(as_view("x"), true);
  auto ss = server_conn.accept_stream(Millis(5000));
  REQUIRE(ss.has_value());
  Bytes got;
  read_until_fin(*ss, got);

  // First channel bytes ride the flight right after the handshake.
  auto depth = client.first_send_depth(cs.id());
  REQUIRE(depth.has_value());
  CHECK(*depth == 2);
  client.close(errc::kNone, "");
}

TEST_CASE("datagrams round-trip and enforce the size cap") {
  TestServer server;
  Connection client = connect("127.0.0.1", server.listener->port(), server.client_config());
  auto server_conn = *server.listener->accept(Millis(3000));

  std::mutex m;
  std::condition_variable cv;
  std::vector<Bytes> received;
  server_conn.set_datagram_handler([&](Bytes payload) {
    std::lock_guard lock(m);
    received.push_back(std::move(payload));
    cv.notify_one();
  });

  REQUIRE(client.peer_settings(Millis(3000)).has_value());
  Bytes small = random_bytes(1200);
  client.send_datagram(small);
  {
    std::unique_lock lock(m);
    REQUIRE(cv.wait_for(lock, 3s, [&] { return !received.empty(); }));
    CHECK(received[0] == small);
  }

  Bytes oversized = random_bytes(65 * 1024);
  CHECK_THROWS_AS(client.send_datagram(oversized), TransportError);
  CHECK(client.max_datagram_payload() >= 1200);
  CHECK(client.stats().datagram_frames_sent == 1);
  client.close(errc::kNone, "");
}

TEST_CASE("peer reset surfaces with its error code") {
  TestServer server;
  Connection client = connect("127.0.0.1", server.listener->port(), server.client_config());
  auto server_conn = *server.listener->accept(Millis(3000));

  Stream cs = client.open_stream();
  cs.write(as_view("hi"));
  auto ss = server_conn.accept_stream(Millis(3000));
  REQUIRE(ss.has_value());
  ss->reset(errc::kChannelLimit);

  uint8_t buf[16];
  try {
    for (int i = 0; i < 100; i++) {
      auto r = cs.read_some(std::span(buf, sizeof buf), Millis(100));
      (void)r;
    }
    FAIL("expected reset");
  } catch (const TransportError& e) {
    CHECK(e.kind == TransportError::Kind::Reset);
    CHECK(e.code == errc::kChannelLimit);
  }
  client.close(errc::kNone, "");
}

TEST_CASE("connection close wakes blocked peers") {
  TestServer server;
  Connection client = connect("127.0.0.1", server.listener->port(), server.client_config());
  auto server_conn = *server.listener->accept(Millis(3000));

  Stream cs = client.open_stream();
  cs.write(as_view("x"));
  auto ss = server_conn.accept_stream(Millis(3000));
  REQUIRE(ss.has_value());

  std::thread closer([&] {
    std::this_thread::sleep_for(100ms);
    client.close(errc::kShutdown, "test over");
  });
  uint8_t buf[16];
  (void)ss->read_some(std::span(buf, sizeof buf), Millis(50));  // drain the "x"
  CHECK_THROWS_AS(
      {
        for (;;) {
          auto r = ss->read_some(std::span(buf, sizeof buf));
          if (!r) break;
        }
      },
      TransportError);
  closer.join();
  CHECK(server_conn.wait_closed(Millis(3000)));
}

TEST_CASE("accept_stream times out cleanly") {
  TestServer server;
  Connection client = connect("127.0.0.1", server.listener->port(), server.client_config());
  auto server_conn = *server.listener->accept(Millis(3000));
  auto none = server_conn.accept_stream(Millis(100));
  CHECK_FALSE(none.has_value());
  client.close(errc::kNone, "");
}

TEST_CASE("dead path triggers the idle timeout") {
  TestServer server;
  bench::LatencyProxy::Options opts;
  opts.target_port = server.listener->port();
  auto proxy = std::make_unique<bench::LatencyProxy>(opts);

  ClientConfig config = server.client_config();
  config.idle_timeout = Millis(1200);
  Connection client = connect("127.0.0.1", proxy->listen_port(), config);
  CHECK(client.is_established());

  proxy->stop();
  proxy.reset();  // path is gone mid-session

  Stream cs = client.open_stream();
  cs.write(as_view("into the void"));
  CHECK(client.wait_closed(Millis(6000)));
  CHECK_THROWS_AS(cs.write(as_view("more")), TransportError);
}

TEST_CASE("listener close shuts down active conversations") {
  auto server = std::make_unique<TestServer>();
  Connection client = connect("127.0.0.1", server->listener->port(), server->client_config());
  auto server_conn = *server->listener->accept(Millis(3000));
  CHECK(client.is_established());

  server->listener->close();
  CHECK(server_conn.is_closed());
  CHECK(client.wait_closed(Millis(3000)));
}
