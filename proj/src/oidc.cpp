// SPDX-License-Identifier: Apache-2.0
#include "quicshell/oidc.hpp"

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include <json.hpp>
#include <openssl/core_names.h>
#include <openssl/evp.h>
#include <openssl/param_build.h>

#include "quicshell/log.hpp"

namespace quicshell::oidc {

using nlohmann::json;

HttpGet default_http_get() {
  return [](const std::string& url) -> std::optional<std::string> {
    // Split "https://host[:port]/path".
    size_t scheme_end = url.find("://");
    if (scheme_end == std::string::npos) return std::nullopt;
    size_t path_start = url.find('/', scheme_end + 3);
    std::string origin = path_start == std::string::npos ? url : url.substr(0, path_start);
    std::string path = path_start == std::string::npos ? "/" : url.substr(path_start);
    httplib::Client client(origin);
    client.set_connection_timeout(5);
    client.set_read_timeout(5);
    client.enable_server_certificate_verification(true);
    auto res = client.Get(path);
    if (!res || res->status != 200) return std::nullopt;
    return res->body;
  };
}

namespace {

std::optional<keys::Key> key_from_jwk(const json& jwk) {
  auto kty = jwk.value("kty", std::string{});
  if (kty == "RSA") {
    auto n_b = base64url_decode(jwk.value("n", std::string{}));
    auto e_b = base64url_decode(jwk.value("e", std::string{}));
    if (!n_b || !e_b || n_b->empty() || e_b->empty()) return std::nullopt;
    BIGNUM* n = BN_bin2bn(n_b->data(), static_cast<int>(n_b->size()), nullptr);
    BIGNUM* e = BN_bin2bn(e_b->data(), static_cast<int>(e_b->size()), nullptr);
    OSSL_PARAM_BLD* bld = OSSL_PARAM_BLD_new();
    OSSL_PARAM_BLD_push_BN(bld, OSSL_PKEY_PARAM_RSA_N, n);
    OSSL_PARAM_BLD_push_BN(bld, OSSL_PKEY_PARAM_RSA_E, e);
    OSSL_PARAM* params = OSSL_PARAM_BLD_to_param(bld);
    EVP_PKEY_CTX* ctx = EVP_PKEY_CTX_new_from_name(nullptr, "RSA", nullptr);
    EVP_PKEY* pkey = nullptr;
    bool ok = ctx && EVP_PKEY_fromdata_init(ctx) == 1 &&
              EVP_PKEY_fromdata(ctx, &pkey, EVP_PKEY_PUBLIC_KEY, params) == 1;
    EVP_PKEY_CTX_free(ctx);
    OSSL_PARAM_free(params);
    OSSL_PARAM_BLD_free(bld);
    BN_free(n);
    BN_free(e);
    if (!ok || !pkey) return std::nullopt;
    return keys::Key(pkey);
  }
  if (kty == "OKP" && jwk.value("crv", std::string{}) == "Ed25519") {
    auto x = base64url_decode(jwk.value("x", std::string{}));
    if (!x || x->size() != 32) return std::nullopt;
    EVP_PKEY* pkey = EVP_PKEY_new_raw_public_key(EVP_PKEY_ED25519, nullptr, x->data(), x->size());
    if (!pkey) return std::nullopt;
    return keys::Key(pkey);
  }
  return std::nullopt;
}

}  // namespace

std::optional<auth::ProviderKeySet> parse_jwks(const std::string& body) {
  json doc = json::parse(body, nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) return std::nullopt;
  auto keys_it = doc.find("keys");
  if (keys_it == doc.end() || !keys_it->is_array()) return std::nullopt;
  auth::ProviderKeySet set;
  for (const auto& jwk : *keys_it) {
    if (!jwk.is_object()) return std::nullopt;
    auto key = key_from_jwk(jwk);
    if (!key) return std::nullopt;
    set.push_back({jwk.value("kid", std::string{}), std::move(*key)});
  }
  if (set.empty()) return std::nullopt;
  return set;
}

ProviderKeyCache::ProviderKeyCache(HttpGet http, std::chrono::seconds ttl, auth::Clock clock)
    : http_(std::move(http)), ttl_(ttl), clock_(std::move(clock)) {}

std::optional<auth::ProviderKeySet> ProviderKeyCache::get(const std::string& issuer) {
  {
    std::lock_guard lock(mutex_);
    auto it = cache_.find(issuer);
    if (it != cache_.end() && clock_() - it->second.fetched_at < ttl_) return it->second.keys;
  }
  auto fresh = fetch(issuer);
  std::lock_guard lock(mutex_);
  if (fresh) {
    cache_[issuer] = Entry{*fresh, clock_()};
    return fresh;
  }
  // Auth proceeds only with cached keys when the provider is unreachable.
  auto it = cache_.find(issuer);
  if (it != cache_.end()) {
    log::warn("oidc provider {} unreachable, using cached keys", issuer);
    return it->second.keys;
  }
  return std::nullopt;
}

std::optional<auth::ProviderKeySet> ProviderKeyCache::fetch(const std::string& issuer) {
  {
    std::lock_guard lock(mutex_);
    fetches_++;
  }
  std::string config_url = issuer;
  if (!config_url.empty() && config_url.back() == '/') config_url.pop_back();
  config_url += "/.well-known/openid-configuration";
  auto config_body = http_(config_url);
  if (!config_body) return std::nullopt;
  json config = json::parse(*config_body, nullptr, false);
  if (config.is_discarded() || !config.is_object()) return std::nullopt;
  std::string jwks_uri = config.value("jwks_uri", std::string{});
  if (jwks_uri.empty()) return std::nullopt;
  auto jwks_body = http_(jwks_uri);
  if (!jwks_body) return std::nullopt;
  return parse_jwks(*jwks_body);
}

uint64_t ProviderKeyCache::fetch_count() const {
  std::lock_guard lock(mutex_);
  return fetches_;
}

}  // namespace quicshell::oidc
