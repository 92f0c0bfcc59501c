// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <optional>
#include <string>

#include "quicshell/bytes.hpp"

typedef struct ssl_ctx_st SSL_CTX;
typedef struct ssl_st SSL;
typedef struct bio_st BIO;

namespace quicshell::transport {

// TLS 1.3 handshake driver over memory BIOs. The transport shuttles the
// opaque handshake bytes in its own packets; record protection of the
// handshake content is TLS's own business. After completion the exporter
// provides per-connection keying material.
class TlsEngine {
 public:
  struct ClientParams {
    std::string server_name;
    std::optional<std::string> ca_file;  // nullopt: system default roots
    bool skip_verify = false;            // pin checked by caller after handshake
  };
  struct ServerParams {
    std::string cert_pem;
    std::string key_pem;
  };

  static std::unique_ptr<TlsEngine> make_client(const ClientParams& params);
  static std::unique_ptr<TlsEngine> make_server(const ServerParams& params);
  ~TlsEngine();

  TlsEngine(const TlsEngine&) = delete;
  TlsEngine& operator=(const TlsEngine&) = delete;

  // Feeds peer handshake bytes (may be empty to kick off the client hello)
  // and returns bytes to transmit. Throws std::runtime_error on alerts or
  // certificate verification failure.
  Bytes advance(ByteView inbound);

  bool handshake_done() const { return done_; }

  Bytes export_keying_material(std::string_view label, ByteView context, size_t length) const;

  // DER certificate presented by the peer; empty if none.
  Bytes peer_cert_der() const;

  std::string cipher_name() const;

 private:
  TlsEngine() = default;

  SSL_CTX* ctx_ = nullptr;
  SSL* ssl_ = nullptr;
  BIO* rbio_ = nullptr;  // network -> TLS
  BIO* wbio_ = nullptr;  // TLS -> network
  bool done_ = false;
  bool client_ = false;
};

}  // namespace quicshell::transport
