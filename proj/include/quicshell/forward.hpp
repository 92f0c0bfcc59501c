// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <optional>
#include <string>

#include "quicshell/session.hpp"

namespace quicshell::forward {

using session::Millis;

struct ForwardingSpec {
  enum class Protocol { Tcp, Udp };
  Protocol protocol = Protocol::Tcp;
  std::string bind_host = "127.0.0.1";
  uint16_t bind_port = 0;  // 0: ephemeral (programmatic use)
  std::string target_host;
  uint16_t target_port = 0;

  // CLI grammar: tcp/<bind>:<port>/<host>:<port> or udp/<bind>:<port>/<host>:<port>.
  // An empty bind address means loopback. Ports must be in [1, 65535].
  static std::optional<ForwardingSpec> parse(std::string_view text);
  std::string to_string() const;
};

// Client side: accepts local TCP connections and relays each over a
// dedicated direct-tcp channel.
class TcpForwarder {
 public:
  TcpForwarder(session::Conversation conv, ForwardingSpec spec);
  ~TcpForwarder();
  TcpForwarder(const TcpForwarder&) = delete;
  TcpForwarder& operator=(const TcpForwarder&) = delete;

  uint16_t port() const;
  uint64_t connections_total() const;
  void stop();

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
};

// Client side: tunnels local UDP datagrams over QUIC-style datagram frames,
// one direct-udp channel per local peer, NAT-style with idle eviction.
class UdpForwarder {
 public:
  UdpForwarder(session::Conversation conv, ForwardingSpec spec,
               Millis idle_eviction = Millis(60000));
  ~UdpForwarder();
  UdpForwarder(const UdpForwarder&) = delete;
  UdpForwarder& operator=(const UdpForwarder&) = delete;

  uint16_t port() const;
  size_t peer_count() const;
  uint64_t oversize_drops() const;
  void stop();

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
};

// Server side: connects to the preamble's target and relays.
void serve_tcp_channel(session::Conversation& conv, session::Channel ch,
                       Millis connect_timeout = Millis(10000));
void serve_udp_channel(session::Conversation& conv, session::Channel ch);

session::Server::ChannelHandler make_tcp_handler(Millis connect_timeout = Millis(10000));
session::Server::ChannelHandler make_udp_handler();

}  // namespace quicshell::forward
