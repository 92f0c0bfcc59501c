// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "quicshell/session.hpp"

namespace quicshell::config {

struct ConfigError : std::runtime_error {
  int line;
  ConfigError(int line_, const std::string& msg)
      : std::runtime_error("config line " + std::to_string(line_) + ": " + msg), line(line_) {}
};

// Daemon configuration file: TOML-style `key = value` lines.
//   listen = "0.0.0.0:4433"
//   cert = "/etc/quicshell/cert.pem"
//   key = "/etc/quicshell/key.pem"
//   url_path = "/my-secret-endpoint"
//   identity_store = "/etc/quicshell/identities"
//   schemes = "Basic,Bearer"
//   max_channels = 128
//   oidc_audience = "client-id"        # optional
//   idle_timeout_ms = 30000            # optional
struct DaemonConfig {
  std::string listen_host = "0.0.0.0";
  uint16_t listen_port = 4433;
  std::string cert_path;
  std::string key_path;
  std::string url_path = "/";
  std::string identity_store_path;
  std::vector<std::string> schemes{"Basic", "Bearer"};
  size_t max_channels = 128;
  std::string oidc_audience;
  int idle_timeout_ms = 30000;

  static DaemonConfig parse(std::string_view text);  // throws ConfigError
  static DaemonConfig from_file(const std::string& path);

  // Loads certificate, key, and identity store from their paths. Throws
  // std::runtime_error naming the offending file.
  session::ServerConfig to_server_config() const;
};

}  // namespace quicshell::config
