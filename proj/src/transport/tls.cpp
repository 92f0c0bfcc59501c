// SPDX-License-Identifier: Apache-2.0
#include "transport/tls.hpp"

#include <openssl/err.h>
#include <openssl/pem.h>
#include <openssl/ssl.h>
#include <openssl/x509.h>

#include <stdexcept>

namespace quicshell::transport {

namespace {

constexpr unsigned char kAlpn[] = "\x05qsh/1";

[[noreturn]] void throw_tls(const std::string& what, SSL* ssl = nullptr) {
  std::string msg = what;
  if (ssl) {
    long vr = SSL_get_verify_result(ssl);
    if (vr != X509_V_OK) {
      msg += ": ";
      msg += X509_verify_cert_error_string(vr);
    }
  }
  unsigned long err = ERR_get_error();
  if (err != 0) {
    char buf[256];
    ERR_error_string_n(err, buf, sizeof buf);
    msg += ": ";
    msg += buf;
  }
  ERR_clear_error();
  throw std::runtime_error(msg);
}

int alpn_select(SSL*, const unsigned char** out, unsigned char* outlen, const unsigned char* in,
                unsigned int inlen, void*) {
  if (SSL_select_next_proto(const_cast<unsigned char**>(out), outlen, kAlpn, sizeof(kAlpn) - 1,
                            in, inlen) == OPENSSL_NPN_NEGOTIATED)
    return SSL_TLSEXT_ERR_OK;
  return SSL_TLSEXT_ERR_ALERT_FATAL;
}

}  // namespace

std::unique_ptr<TlsEngine> TlsEngine::make_client(const ClientParams& params) {
  auto e = std::unique_ptr<TlsEngine>(new TlsEngine);
  e->client_ = true;
  e->ctx_ = SSL_CTX_new(TLS_client_method());
  if (!e->ctx_) throw_tls("SSL_CTX_new");
  SSL_CTX_set_min_proto_version(e->ctx_, TLS1_3_VERSION);
  if (params.skip_verify) {
    SSL_CTX_set_verify(e->ctx_, SSL_VERIFY_NONE, nullptr);
  } else {
    SSL_CTX_set_verify(e->ctx_, SSL_VERIFY_PEER, nullptr);
    if (params.ca_file) {
      if (SSL_CTX_load_verify_locations(e->ctx_, params.ca_file->c_str(), nullptr) != 1)
        throw_tls("load CA file " + *params.ca_file);
    } else {
      SSL_CTX_set_default_verify_paths(e->ctx_);
    }
  }
  SSL_CTX_set_alpn_protos(e->ctx_, kAlpn, sizeof(kAlpn) - 1);

  e->ssl_ = SSL_new(e->ctx_);
  e->rbio_ = BIO_new(BIO_s_mem());
  e->wbio_ = BIO_new(BIO_s_mem());
  SSL_set_bio(e->ssl_, e->rbio_, e->wbio_);
  SSL_set_connect_state(e->ssl_);
  if (!params.server_name.empty()) {
    SSL_set_tlsext_host_name(e->ssl_, params.server_name.c_str());
    if (!params.skip_verify) SSL_set1_host(e->ssl_, params.server_name.c_str());
  }
  return e;
}

std::unique_ptr<TlsEngine> TlsEngine::make_server(const ServerParams& params) {
  auto e = std::unique_ptr<TlsEngine>(new TlsEngine);
  e->ctx_ = SSL_CTX_new(TLS_server_method());
  if (!e->ctx_) throw_tls("SSL_CTX_new");
  SSL_CTX_set_min_proto_version(e->ctx_, TLS1_3_VERSION);
  SSL_CTX_set_num_tickets(e->ctx_, 0);
  SSL_CTX_set_alpn_select_cb(e->ctx_, alpn_select, nullptr);

  BIO* cert_bio = BIO_new_mem_buf(params.cert_pem.data(), static_cast<int>(params.cert_pem.size()));
  X509* cert = PEM_read_bio_X509(cert_bio, nullptr, nullptr, nullptr);
  BIO_free(cert_bio);
  if (!cert) throw_tls("parse certificate PEM");
  int rc = SSL_CTX_use_certificate(e->ctx_, cert);
  X509_free(cert);
  if (rc != 1) throw_tls("use certificate");

  BIO* key_bio = BIO_new_mem_buf(params.key_pem.data(), static_cast<int>(params.key_pem.size()));
  EVP_PKEY* key = PEM_read_bio_PrivateKey(key_bio, nullptr, nullptr, nullptr);
  BIO_free(key_bio);
  if (!key) throw_tls("parse private key PEM");
  rc = SSL_CTX_use_PrivateKey(e->ctx_, key);
  EVP_PKEY_free(key);
  if (rc != 1) throw_tls("use private key");

  e->ssl_ = SSL_new(e->ctx_);
  e->rbio_ = BIO_new(BIO_s_mem());
  e->wbio_ = BIO_new(BIO_s_mem());
  SSL_set_bio(e->ssl_, e->rbio_, e->wbio_);
  SSL_set_accept_state(e->ssl_);
  return e;
}

TlsEngine::~TlsEngine() {
  if (ssl_) SSL_free(ssl_);  // owns the BIOs
  if (ctx_) SSL_CTX_free(ctx_);
}

Bytes TlsEngine::advance(ByteView inbound) {
  if (!inbound.empty())
    BIO_write(rbio_, inbound.data(), static_cast<int>(inbound.size()));

  if (!done_) {
    int rc = SSL_do_handshake(ssl_);
    if (rc == 1) {
      done_ = true;
    } else {
      int err = SSL_get_error(ssl_, rc);
      if (err != SSL_ERROR_WANT_READ && err != SSL_ERROR_WANT_WRITE)
        throw_tls(client_ ? "TLS handshake failed" : "TLS accept failed", ssl_);
    }
  } else if (!inbound.empty()) {
    // Post-handshake records (key updates, tickets) are consumed and ignored.
    char sink[512];
    while (SSL_read(ssl_, sink, sizeof sink) > 0) {
    }
    ERR_clear_error();
  }

  Bytes out;
  char buf[4096];
  int n;
  while ((n = BIO_read(wbio_, buf, sizeof buf)) > 0)
    append(out, ByteView(reinterpret_cast<uint8_t*>(buf), static_cast<size_t>(n)));
  return out;
}

Bytes TlsEngine::export_keying_material(std::string_view label, ByteView context,
                                        size_t length) const {
  if (!done_) throw std::runtime_error("TLS exporter unavailable: handshake incomplete");
  Bytes out(length);
  if (SSL_export_keying_material(ssl_, out.data(), out.size(),
                                 label.data(), label.size(), context.data(), context.size(),
                                 context.empty() ? 0 : 1) != 1)
    throw_tls("export keying material");
  return out;
}

Bytes TlsEngine::peer_cert_der() const {
  X509* cert = SSL_get_peer_certificate(ssl_);
  if (!cert) return {};
  unsigned char* der = nullptr;
  int len = i2d_X509(cert, &der);
  X509_free(cert);
  if (len <= 0) return {};
  Bytes out(der, der + len);
  OPENSSL_free(der);
  return out;
}

std::string TlsEngine::cipher_name() const {
  const char* c = SSL_get_cipher(ssl_);
  return c ? c : "";
}

}  // namespace quicshell::transport
