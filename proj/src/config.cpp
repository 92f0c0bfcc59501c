// SPDX-License-Identifier: Apache-2.0
#include "quicshell/config.hpp"

#include <fmt/format.h>

#include <fstream>
#include <sstream>

namespace quicshell::config {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

std::string unquote(std::string_view v, int line) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"')
    return std::string(v.substr(1, v.size() - 2));
  if (!v.empty() && (v.front() == '"' || v.back() == '"'))
    throw ConfigError(line, "unbalanced quotes");
  return std::string(v);
}

uint64_t to_number(std::string_view v, int line) {
  uint64_t out = 0;
  if (v.empty()) throw ConfigError(line, "expected a number");
  for (char c : v) {
    if (c < '0' || c > '9') throw ConfigError(line, fmt::format("invalid number \"{}\"", v));
    out = out * 10 + static_cast<uint64_t>(c - '0');
  }
  return out;
}

std::string read_file(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(fmt::format("cannot read {} file: {}", what, path));
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace

DaemonConfig DaemonConfig::parse(std::string_view text) {
  DaemonConfig config;
  std::istringstream in{std::string(text)};
  std::string raw;
  int lineno = 0;
  bool listen_seen = false;
  while (std::getline(in, raw)) {
    lineno++;
    std::string_view line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    size_t eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(lineno, "expected key = value");
    std::string key(trim(line.substr(0, eq)));
    std::string value = unquote(trim(line.substr(eq + 1)), lineno);

    if (key == "listen") {
      size_t colon = value.rfind(':');
      if (colon == std::string::npos) throw ConfigError(lineno, "listen must be host:port");
      config.listen_host = value.substr(0, colon);
      uint64_t port = to_number(value.substr(colon + 1), lineno);
      if (port < 1 || port > 65535) throw ConfigError(lineno, "listen port out of range");
      config.listen_port = static_cast<uint16_t>(port);
      listen_seen = true;
    } else if (key == "cert") {
      config.cert_path = value;
    } else if (key == "key") {
      config.key_path = value;
    } else if (key == "url_path") {
      if (value.empty() || value.front() != '/')
        throw ConfigError(lineno, "url_path must begin with '/'");
      config.url_path = value;
    } else if (key == "identity_store") {
      config.identity_store_path = value;
    } else if (key == "schemes") {
      config.schemes.clear();
      std::stringstream ss(value);
      std::string item;
      while (std::getline(ss, item, ',')) {
        std::string_view scheme = trim(item);
        if (scheme != "Basic" && scheme != "Bearer")
          throw ConfigError(lineno, fmt::format("unknown scheme \"{}\"", scheme));
        config.schemes.emplace_back(scheme);
      }
      if (config.schemes.empty()) throw ConfigError(lineno, "schemes must not be empty");
    } else if (key == "max_channels") {
      uint64_t n = to_number(value, lineno);
      if (n < 1) throw ConfigError(lineno, "max_channels must be at least 1");
      config.max_channels = static_cast<size_t>(n);
    } else if (key == "oidc_audience") {
      config.oidc_audience = value;
    } else if (key == "idle_timeout_ms") {
      config.idle_timeout_ms = static_cast<int>(to_number(value, lineno));
    } else {
      throw ConfigError(lineno, fmt::format("unknown key \"{}\"", key));
    }
  }
  (void)listen_seen;
  if (config.cert_path.empty()) throw ConfigError(lineno, "missing required key: cert");
  if (config.key_path.empty()) throw ConfigError(lineno, "missing required key: key");
  if (config.identity_store_path.empty())
    throw ConfigError(lineno, "missing required key: identity_store");
  return config;
}

DaemonConfig DaemonConfig::from_file(const std::string& path) {
  return parse(read_file(path, "config"));
}

session::ServerConfig DaemonConfig::to_server_config() const {
  session::ServerConfig config;
  config.listen_host = listen_host;
  config.listen_port = listen_port;
  config.cert_pem = read_file(cert_path, "certificate");
  config.key_pem = read_file(key_path, "private key");
  config.url_path = url_path;
  config.store = auth::IdentityStore::from_file(identity_store_path);
  config.schemes = schemes;
  config.max_channels = max_channels;
  config.oidc_audience = oidc_audience;
  config.idle_timeout = session::Millis(idle_timeout_ms);
  config.validate();
  return config;
}

}  // namespace quicshell::config
