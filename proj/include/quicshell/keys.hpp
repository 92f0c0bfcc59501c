// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <optional>
#include <string>

#include "quicshell/bytes.hpp"

typedef struct evp_pkey_st EVP_PKEY;

namespace quicshell::keys {

// Signature profiles permitted for session tokens, identified by their
// standard JWT "alg" names.
enum class SigAlg { RS256, EdDSA };

const char* sig_alg_name(SigAlg alg);
std::optional<SigAlg> sig_alg_from_name(std::string_view name);

class Key {
 public:
  Key() = default;
  explicit Key(EVP_PKEY* owned);

  static Key generate_ed25519();
  static Key generate_rsa(int bits = 2048);

  // PEM (PKCS#8 for private keys, SubjectPublicKeyInfo for public keys).
  static Key from_private_pem(std::string_view pem);
  static Key from_private_pem_file(const std::string& path);
  std::string private_pem() const;
  std::string public_pem() const;

  // authorized-keys text form: "ssh-ed25519 <b64>" / "ssh-rsa <b64>".
  static std::optional<Key> from_authorized_line(std::string_view line);
  std::string authorized_line() const;

  bool has_private() const { return has_private_; }
  explicit operator bool() const { return pkey_ != nullptr; }
  EVP_PKEY* handle() const { return pkey_.get(); }

  // The natural token profile for this key type.
  SigAlg default_alg() const;

  // True when both sides wrap the same public key material.
  bool same_public_key(const Key& other) const;

 private:
  std::shared_ptr<EVP_PKEY> pkey_;
  bool has_private_ = false;
};

Bytes sign(const Key& key, SigAlg alg, ByteView data);
bool verify(const Key& key, SigAlg alg, ByteView data, ByteView signature);

Bytes sha256(ByteView data);

struct SelfSignedCert {
  std::string cert_pem;
  std::string key_pem;
};

// TLS server identity for tests and personal deployments.
SelfSignedCert generate_self_signed(const std::string& common_name, int valid_days = 365);

// SHA-256 over the DER certificate, as pinned by --insecure-pin.
std::optional<Bytes> cert_fingerprint_from_pem(std::string_view cert_pem);

}  // namespace quicshell::keys
