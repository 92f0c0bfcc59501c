// SPDX-License-Identifier: Apache-2.0
#include "quicshell/keys.hpp"

#include <openssl/bio.h>
#include <openssl/core_names.h>
#include <openssl/err.h>
#include <openssl/evp.h>
#include <openssl/param_build.h>
#include <openssl/pem.h>
#include <openssl/sha.h>
#include <openssl/x509.h>
#include <openssl/x509v3.h>

#include <cstring>
#include <stdexcept>

namespace quicshell::keys {

namespace {

[[noreturn]] void throw_openssl(const char* what) {
  char buf[256];
  ERR_error_string_n(ERR_get_error(), buf, sizeof buf);
  throw std::runtime_error(std::string(what) + ": " + buf);
}

struct BioDeleter {
  void operator()(BIO* b) const { BIO_free(b); }
};
using BioPtr = std::unique_ptr<BIO, BioDeleter>;

std::string bio_to_string(BIO* bio) {
  char* data = nullptr;
  long len = BIO_get_mem_data(bio, &data);
  return std::string(data, static_cast<size_t>(len));
}

// SSH wire-format helpers (uint32 length prefixes, big-endian).
void put_ssh_string(Bytes& out, ByteView s) {
  uint32_t n = static_cast<uint32_t>(s.size());
  out.push_back(static_cast<uint8_t>(n >> 24));
  out.push_back(static_cast<uint8_t>(n >> 16));
  out.push_back(static_cast<uint8_t>(n >> 8));
  out.push_back(static_cast<uint8_t>(n));
  append(out, s);
}

void put_ssh_mpint(Bytes& out, const BIGNUM* bn) {
  Bytes mag(static_cast<size_t>(BN_num_bytes(bn)));
  BN_bn2bin(bn, mag.data());
  size_t skip = 0;
  while (skip < mag.size() && mag[skip] == 0) skip++;
  Bytes v(mag.begin() + skip, mag.end());
  if (!v.empty() && (v[0] & 0x80)) v.insert(v.begin(), 0);
  put_ssh_string(out, v);
}

struct SshReader {
  ByteView in;
  size_t pos = 0;
  bool ok = true;

  Bytes string() {
    if (!ok || in.size() - pos < 4) {
      ok = false;
      return {};
    }
    uint32_t n = uint32_t{in[pos]} << 24 | uint32_t{in[pos + 1]} << 16 |
                 uint32_t{in[pos + 2]} << 8 | in[pos + 3];
    pos += 4;
    if (n > in.size() - pos) {
      ok = false;
      return {};
    }
    Bytes out(in.begin() + pos, in.begin() + pos + n);
    pos += n;
    return out;
  }
};

}  // namespace

const char* sig_alg_name(SigAlg alg) {
  switch (alg) {
    case SigAlg::RS256: return "RS256";
    case SigAlg::EdDSA: return "EdDSA";
  }
  return "?";
}

std::optional<SigAlg> sig_alg_from_name(std::string_view name) {
  if (name == "RS256") return SigAlg::RS256;
  if (name == "EdDSA") return SigAlg::EdDSA;
  return std::nullopt;
}

Key::Key(EVP_PKEY* owned) : pkey_(owned, EVP_PKEY_free) {
  // Heuristic: a freshly generated or PEM-loaded private key can sign.
  has_private_ = owned != nullptr;
}

Key Key::generate_ed25519() {
  EVP_PKEY* k = EVP_PKEY_Q_keygen(nullptr, nullptr, "ED25519");
  if (!k) throw_openssl("ed25519 keygen");
  return Key(k);
}

Key Key::generate_rsa(int bits) {
  EVP_PKEY* k = EVP_PKEY_Q_keygen(nullptr, nullptr, "RSA", static_cast<size_t>(bits));
  if (!k) throw_openssl("rsa keygen");
  return Key(k);
}

Key Key::from_private_pem(std::string_view pem) {
  BioPtr bio(BIO_new_mem_buf(pem.data(), static_cast<int>(pem.size())));
  EVP_PKEY* k = PEM_read_bio_PrivateKey(bio.get(), nullptr, nullptr, nullptr);
  if (!k) throw_openssl("parse private key PEM");
  return Key(k);
}

Key Key::from_private_pem_file(const std::string& path) {
  FILE* f = fopen(path.c_str(), "r");
  if (!f) throw std::runtime_error("cannot open key file: " + path);
  EVP_PKEY* k = PEM_read_PrivateKey(f, nullptr, nullptr, nullptr);
  fclose(f);
  if (!k) throw_openssl(("parse private key " + path).c_str());
  return Key(k);
}

std::string Key::private_pem() const {
  BioPtr bio(BIO_new(BIO_s_mem()));
  if (PEM_write_bio_PKCS8PrivateKey(bio.get(), pkey_.get(), nullptr, nullptr, 0, nullptr,
                                    nullptr) != 1)
    throw_openssl("write private key PEM");
  return bio_to_string(bio.get());
}

std::string Key::public_pem() const {
  BioPtr bio(BIO_new(BIO_s_mem()));
  if (PEM_write_bio_PUBKEY(bio.get(), pkey_.get()) != 1) throw_openssl("write public key PEM");
  return bio_to_string(bio.get());
}

std::optional<Key> Key::from_authorized_line(std::string_view line) {
  size_t sp = line.find(' ');
  if (sp == std::string_view::npos) return std::nullopt;
  std::string_view type = line.substr(0, sp);
  std::string_view rest = line.substr(sp + 1);
  size_t end = rest.find(' ');  // optional trailing comment
  std::string_view b64 = end == std::string_view::npos ? rest : rest.substr(0, end);
  auto blob = base64_decode(b64);
  if (!blob) return std::nullopt;

  SshReader r{*blob};
  Bytes wire_type = r.string();
  if (!r.ok || to_string(wire_type) != type) return std::nullopt;

  if (type == "ssh-ed25519") {
    Bytes pub = r.string();
    if (!r.ok || pub.size() != 32) return std::nullopt;
    EVP_PKEY* k =
        EVP_PKEY_new_raw_public_key(EVP_PKEY_ED25519, nullptr, pub.data(), pub.size());
    if (!k) return std::nullopt;
    Key key(k);
    key.has_private_ = false;
    return key;
  }
  if (type == "ssh-rsa") {
    Bytes e_bytes = r.string();
    Bytes n_bytes = r.string();
    if (!r.ok || e_bytes.empty() || n_bytes.empty()) return std::nullopt;
    BIGNUM* n = BN_bin2bn(n_bytes.data(), static_cast<int>(n_bytes.size()), nullptr);
    BIGNUM* e = BN_bin2bn(e_bytes.data(), static_cast<int>(e_bytes.size()), nullptr);
    OSSL_PARAM_BLD* bld = OSSL_PARAM_BLD_new();
    OSSL_PARAM_BLD_push_BN(bld, OSSL_PKEY_PARAM_RSA_N, n);
    OSSL_PARAM_BLD_push_BN(bld, OSSL_PKEY_PARAM_RSA_E, e);
    OSSL_PARAM* params = OSSL_PARAM_BLD_to_param(bld);
    EVP_PKEY_CTX* ctx = EVP_PKEY_CTX_new_from_name(nullptr, "RSA", nullptr);
    EVP_PKEY* k = nullptr;
    bool good = ctx && EVP_PKEY_fromdata_init(ctx) == 1 &&
                EVP_PKEY_fromdata(ctx, &k, EVP_PKEY_PUBLIC_KEY, params) == 1;
    EVP_PKEY_CTX_free(ctx);
    OSSL_PARAM_free(params);
    OSSL_PARAM_BLD_free(bld);
    BN_free(n);
    BN_free(e);
    if (!good || !k) return std::nullopt;
    Key key(k);
    key.has_private_ = false;
    return key;
  }
  return std::nullopt;
}

std::string Key::authorized_line() const {
  int base = EVP_PKEY_get_base_id(pkey_.get());
  Bytes blob;
  std::string type;
  if (base == EVP_PKEY_ED25519) {
    type = "ssh-ed25519";
    size_t len = 32;
    Bytes pub(len);
    if (EVP_PKEY_get_raw_public_key(pkey_.get(), pub.data(), &len) != 1)
      throw_openssl("ed25519 raw public key");
    pub.resize(len);
    put_ssh_string(blob, as_view(type));
    put_ssh_string(blob, pub);
  } else if (base == EVP_PKEY_RSA) {
    type = "ssh-rsa";
    BIGNUM *n = nullptr, *e = nullptr;
    if (EVP_PKEY_get_bn_param(pkey_.get(), OSSL_PKEY_PARAM_RSA_N, &n) != 1 ||
        EVP_PKEY_get_bn_param(pkey_.get(), OSSL_PKEY_PARAM_RSA_E, &e) != 1)
      throw_openssl("rsa public params");
    put_ssh_string(blob, as_view(type));
    put_ssh_mpint(blob, e);
    put_ssh_mpint(blob, n);
    BN_free(n);
    BN_free(e);
  } else {
    throw std::runtime_error("unsupported key type for authorized-keys form");
  }
  return type + " " + base64_encode(blob);
}

SigAlg Key::default_alg() const {
  return EVP_PKEY_get_base_id(pkey_.get()) == EVP_PKEY_ED25519 ? SigAlg::EdDSA : SigAlg::RS256;
}

bool Key::same_public_key(const Key& other) const {
  if (!pkey_ || !other.pkey_) return false;
#if OPENSSL_VERSION_NUMBER >= 0x30000000L
  return EVP_PKEY_eq(pkey_.get(), other.pkey_.get()) == 1;
#else
  return EVP_PKEY_cmp(pkey_.get(), other.pkey_.get()) == 1;
#endif
}

Bytes sign(const Key& key, SigAlg alg, ByteView data) {
  if (!key.has_private()) throw std::invalid_argument("signing requires a private key");
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  const EVP_MD* md = alg == SigAlg::RS256 ? EVP_sha256() : nullptr;
  if (EVP_DigestSignInit(ctx, nullptr, md, nullptr, key.handle()) != 1) {
    EVP_MD_CTX_free(ctx);
    throw_openssl("sign init");
  }
  size_t len = 0;
  if (EVP_DigestSign(ctx, nullptr, &len, data.data(), data.size()) != 1) {
    EVP_MD_CTX_free(ctx);
    throw_openssl("sign size");
  }
  Bytes sig(len);
  if (EVP_DigestSign(ctx, sig.data(), &len, data.data(), data.size()) != 1) {
    EVP_MD_CTX_free(ctx);
    throw_openssl("sign");
  }
  sig.resize(len);
  EVP_MD_CTX_free(ctx);
  return sig;
}

bool verify(const Key& key, SigAlg alg, ByteView data, ByteView signature) {
  int base = EVP_PKEY_get_base_id(key.handle());
  // Key type must match the announced algorithm; a mismatch is a failure,
  // not an exception, because the input comes off the wire.
  if (alg == SigAlg::RS256 && base != EVP_PKEY_RSA) return false;
  if (alg == SigAlg::EdDSA && base != EVP_PKEY_ED25519) return false;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  const EVP_MD* md = alg == SigAlg::RS256 ? EVP_sha256() : nullptr;
  bool ok = EVP_DigestVerifyInit(ctx, nullptr, md, nullptr, key.handle()) == 1 &&
            EVP_DigestVerify(ctx, signature.data(), signature.size(), data.data(),
                             data.size()) == 1;
  EVP_MD_CTX_free(ctx);
  ERR_clear_error();
  return ok;
}

Bytes sha256(ByteView data) {
  Bytes out(SHA256_DIGEST_LENGTH);
  SHA256(data.data(), data.size(), out.data());
  return out;
}

SelfSignedCert generate_self_signed(const std::string& common_name, int valid_days) {
  Key key = Key::generate_ed25519();
  X509* x = X509_new();
  ASN1_INTEGER_set(X509_get_serialNumber(x), static_cast<long>(random_u64() >> 1));
  X509_gmtime_adj(X509_getm_notBefore(x), -300);
  X509_gmtime_adj(X509_getm_notAfter(x), 60L * 60 * 24 * valid_days);
  X509_set_pubkey(x, key.handle());

  X509_NAME* name = X509_get_subject_name(x);
  X509_NAME_add_entry_by_txt(name, "CN", MBSTRING_ASC,
                             reinterpret_cast<const unsigned char*>(common_name.c_str()), -1,
                             -1, 0);
  X509_set_issuer_name(x, name);

  std::string san = "DNS:" + common_name + ",DNS:localhost,IP:127.0.0.1";
  X509_EXTENSION* ext = X509V3_EXT_conf_nid(nullptr, nullptr, NID_subject_alt_name, san.c_str());
  if (ext) {
    X509_add_ext(x, ext, -1);
    X509_EXTENSION_free(ext);
  }

  if (X509_sign(x, key.handle(), nullptr) == 0) {
    X509_free(x);
    throw_openssl("sign certificate");
  }

  BioPtr bio(BIO_new(BIO_s_mem()));
  PEM_write_bio_X509(bio.get(), x);
  SelfSignedCert out{bio_to_string(bio.get()), key.private_pem()};
  X509_free(x);
  return out;
}

std::optional<Bytes> cert_fingerprint_from_pem(std::string_view cert_pem) {
  BioPtr bio(BIO_new_mem_buf(cert_pem.data(), static_cast<int>(cert_pem.size())));
  X509* x = PEM_read_bio_X509(bio.get(), nullptr, nullptr, nullptr);
  if (!x) return std::nullopt;
  unsigned char* der = nullptr;
  int len = i2d_X509(x, &der);
  X509_free(x);
  if (len <= 0) return std::nullopt;
  Bytes fp = sha256(ByteView(der, static_cast<size_t>(len)));
  OPENSSL_free(der);
  return fp;
}

}  // namespace quicshell::keys
