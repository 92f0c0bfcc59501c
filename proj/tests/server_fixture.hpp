// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <string>

#include "quicshell/auth.hpp"
#include "quicshell/keys.hpp"
#include "quicshell/session.hpp"

namespace quicshell::testutil {

struct ServerFixture {
  keys::SelfSignedCert cert = keys::generate_self_signed("localhost");
  keys::Key user_key = keys::Key::generate_ed25519();
  std::string username = "alice";
  std::string password = "correct horse";
  std::string secret_path = "/deadbeef-cafe";
  std::unique_ptr<session::Server> server;

  explicit ServerFixture(std::function<void(session::ServerConfig&)> tweak = {}) {
    session::ServerConfig config;
    config.listen_host = "127.0.0.1";
    config.cert_pem = cert.cert_pem;
    config.key_pem = cert.key_pem;
    config.url_path = secret_path;

    auth::UserEntries entries;
    entries.passwords.push_back(auth::make_password_hash(password));
    entries.pubkeys.push_back(*keys::Key::from_authorized_line(user_key.authorized_line()));
    config.store.add_user(username, std::move(entries));

    if (tweak) tweak(config);
    server = std::make_unique<session::Server>(std::move(config));
  }

  session::ClientOptions client_options() const {
    session::ClientOptions options;
    options.host = "127.0.0.1";
    options.port = server->port();
    options.path = secret_path;
    options.username = username;
    options.credential = auth::PasswordCredential{username, password};
    options.pinned_cert_sha256 = keys::cert_fingerprint_from_pem(cert.cert_pem);
    return options;
  }
};

// Echoes every Data message back, then mirrors the close.
inline void echo_session_handler(session::Conversation&, session::Channel ch) {
  try {
    while (auto m = ch.next_message()) {
      if (std::holds_alternative<wire::Data>(*m)) ch.send_message(*m);
    }
    ch.close();
  } catch (const session::ChannelError&) {
  }
}

}  // namespace quicshell::testutil
