// SPDX-License-Identifier: Apache-2.0
//
// quicshelld — server daemon.
#include <CLI11.hpp>

#include <signal.h>
#include <unistd.h>

#include <fmt/format.h>

#include <atomic>
#include <csignal>
#include <fstream>
#include <iostream>
#include <thread>

#include "quicshell/config.hpp"
#include "quicshell/exec.hpp"
#include "quicshell/forward.hpp"
#include "quicshell/log.hpp"
#include "quicshell/session.hpp"

using namespace quicshell;

namespace {

std::atomic<bool> g_shutdown{false};

void shutdown_handler(int) { g_shutdown = true; }

int run_daemon(const std::string& config_path, bool privileged) {
  config::DaemonConfig daemon_config;
  session::ServerConfig server_config;
  try {
    daemon_config = config::DaemonConfig::from_file(config_path);
    server_config = daemon_config.to_server_config();
  } catch (const std::exception& e) {
    std::cerr << "quicshelld: " << e.what() << "\n";
    return 1;
  }

  if (privileged && getuid() != 0) {
    std::cerr << "quicshelld: --privileged requires running as root\n";
    return 1;
  }

  session::Server server(std::move(server_config));
  server.set_session_handler(exec::make_session_handler({privileged}));
  server.set_tcp_handler(forward::make_tcp_handler());
  server.set_udp_handler(forward::make_udp_handler());
  try {
    server.start();
  } catch (const std::exception& e) {
    std::cerr << "quicshelld: " << e.what() << "\n";
    return 1;
  }

  std::cout << fmt::format("quicshelld listening on {}:{} path={} ({} mode)\n",
                           daemon_config.listen_host, server.port(), daemon_config.url_path,
                           privileged ? "privileged" : "single-user")
            << std::flush;

  signal(SIGTERM, shutdown_handler);
  signal(SIGINT, shutdown_handler);
  while (!g_shutdown) std::this_thread::sleep_for(std::chrono::milliseconds(100));

  log::info("shutting down");
  server.stop();
  std::cout << "quicshelld stopped\n";
  return 0;
}

int hash_password() {
  std::string password;
  if (isatty(STDIN_FILENO)) std::cerr << "password: " << std::flush;
  std::getline(std::cin, password);
  if (password.empty()) {
    std::cerr << "quicshelld: empty password\n";
    return 1;
  }
  std::cout << "password-hash " << auth::password_hash_to_string(auth::make_password_hash(password))
            << "\n";
  return 0;
}

int gen_cert(const std::string& common_name, const std::string& cert_out,
             const std::string& key_out) {
  auto cert = keys::generate_self_signed(common_name);
  std::ofstream cert_file(cert_out);
  std::ofstream key_file(key_out);
  if (!cert_file || !key_file) {
    std::cerr << "quicshelld: cannot write certificate files\n";
    return 1;
  }
  cert_file << cert.cert_pem;
  key_file << cert.key_pem;
  auto fp = keys::cert_fingerprint_from_pem(cert.cert_pem);
  std::cout << fmt::format("wrote {} and {}\nfingerprint (for --insecure-pin): {}\n", cert_out,
                           key_out, hex_encode(*fp));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"quicshelld: shell/exec/forwarding server over a secure datagram transport"};
  app.require_subcommand(1);

  std::string config_path;
  bool privileged = false;
  std::string level = "info";
  CLI::App* run_cmd = app.add_subcommand("run", "run the daemon");
  run_cmd->add_option("-c,--config", config_path, "configuration file")->required();
  run_cmd->add_flag("--privileged", privileged,
                    "spawn processes under the authenticated account (requires root)");
  run_cmd->add_option("--log-level", level, "debug|info|warn|error");

  CLI::App* hash_cmd =
      app.add_subcommand("hash-password", "read a password from stdin, print a store line");

  std::string cn = "localhost";
  std::string cert_out = "cert.pem";
  std::string key_out = "key.pem";
  CLI::App* cert_cmd = app.add_subcommand("gen-cert", "generate a self-signed certificate");
  cert_cmd->add_option("--cn", cn, "certificate common name");
  cert_cmd->add_option("--cert-out", cert_out, "certificate output path");
  cert_cmd->add_option("--key-out", key_out, "key output path");

  CLI11_PARSE(app, argc, argv);

  if (level == "debug") log::set_level(log::Level::Debug);
  else if (level == "warn") log::set_level(log::Level::Warn);
  else if (level == "error") log::set_level(log::Level::Error);

  if (app.got_subcommand(hash_cmd)) return hash_password();
  if (app.got_subcommand(cert_cmd)) return gen_cert(cn, cert_out, key_out);
  return run_daemon(config_path, privileged);
}
