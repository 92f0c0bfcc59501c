// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "quicshell/bytes.hpp"
#include "quicshell/forward.hpp"
#include "quicshell/session.hpp"

namespace quicshell::bench {

// UDP relay that delays every packet by a fixed one-way delay in each
// direction, emulating a long path on loopback. Packets are forwarded
// unmodified. Optional loss injection drops every `drop_every`-th packet.
class LatencyProxy {
 public:
  struct Options {
    std::chrono::milliseconds one_way_delay{0};
    std::string target_host = "127.0.0.1";
    uint16_t target_port = 0;
    uint32_t drop_every = 0;  // 0 = lossless
  };

  explicit LatencyProxy(Options options);
  ~LatencyProxy();
  LatencyProxy(const LatencyProxy&) = delete;
  LatencyProxy& operator=(const LatencyProxy&) = delete;

  uint16_t listen_port() const;
  uint64_t packets_forwarded() const;
  uint64_t packets_dropped() const;
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// In-process system under test: a server with shell/exec and forwarding
// handlers, one provisioned user, and (for rtt > 0) a latency proxy in
// front. Client options point at the proxy so every packet crosses it.
class Rig {
 public:
  struct Options {
    int rtt_ms = 0;
    size_t max_channels = 128;
    session::Millis idle_timeout{30000};
  };

  Rig();
  explicit Rig(Options options);
  ~Rig();
  Rig(const Rig&) = delete;
  Rig& operator=(const Rig&) = delete;

  session::ClientOptions client_options() const;
  session::Conversation connect() const;
  session::Server& server();
  uint16_t server_port() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// One measured scenario: samples plus summary statistics.
struct RunReport {
  std::string scenario;
  std::vector<double> samples;          // ms or Mbps depending on scenario
  std::vector<uint64_t> round_trips;    // chain depths from the event log, when measured
  double mean = 0;
  double stddev = 0;

  void finalize();
  double median() const;
  uint64_t max_round_trips() const;
  std::string to_csv() const;  // scenario,sample_index,value,rtt_count
};

// Cold-start sessions: establish, run `command`, collect output and exit
// status, close; wall-clock per run plus the event-log round-trip count of
// the first channel message. Throws on n == 0 or any failed session.
struct CompletionOptions {
  std::string command = "true";
  int n = 50;
  int rtt_ms = 0;
  std::string scenario_name = "session-completion";
};
RunReport measure_session_completion(Rig& rig, const CompletionOptions& options);

// Per-keystroke time from stdin write to the pty echo arriving back, over an
// interactive `cat` session.
struct EchoLatencyOptions {
  int keystrokes = 200;
  int rtt_ms = 0;
  std::string scenario_name = "echo-latency";
};
RunReport measure_echo_latency(Rig& rig, const EchoLatencyOptions& options);

// Sustained goodput through a TCP or UDP forward on loopback. The sink
// verifies payload integrity; corruption is a hard failure.
struct ThroughputOptions {
  forward::ForwardingSpec::Protocol protocol = forward::ForwardingSpec::Protocol::Tcp;
  double seconds = 3.0;
  size_t datagram_size = 1200;
  double udp_pace_mbps = 240.0;
  bool inject_corruption = false;  // fault-injection hook for tests
  std::string scenario_name = "throughput";
};
RunReport measure_forward_throughput(Rig& rig, const ThroughputOptions& options);

}  // namespace quicshell::bench
