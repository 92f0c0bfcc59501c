// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>

#include "quicshell/auth.hpp"

namespace quicshell::oidc {

// Returns the response body for a GET of `url`, nullopt on network failure.
using HttpGet = std::function<std::optional<std::string>(const std::string& url)>;

// Default fetcher backed by an HTTPS client.
HttpGet default_http_get();

// Parses a JWKS document ({"keys": [...]}) into verification keys.
// Unsupported entries fail the whole document: a partial key set must never
// be used for verification.
std::optional<auth::ProviderKeySet> parse_jwks(const std::string& body);

// Resolves and caches provider signing keys via OIDC discovery
// (<issuer>/.well-known/openid-configuration -> jwks_uri -> JWKS).
class ProviderKeyCache {
 public:
  explicit ProviderKeyCache(HttpGet http = default_http_get(),
                            std::chrono::seconds ttl = std::chrono::seconds(300),
                            auth::Clock clock = auth::system_now);

  // Cached keys within TTL are returned without a network call. On fetch
  // failure, stale cached keys are served if present; otherwise nullopt.
  std::optional<auth::ProviderKeySet> get(const std::string& issuer);

  uint64_t fetch_count() const;

 private:
  struct Entry {
    auth::ProviderKeySet keys;
    auth::TimePoint fetched_at;
  };

  std::optional<auth::ProviderKeySet> fetch(const std::string& issuer);

  HttpGet http_;
  std::chrono::seconds ttl_;
  auth::Clock clock_;
  mutable std::mutex mutex_;
  std::map<std::string, Entry> cache_;
  uint64_t fetches_ = 0;
};

}  // namespace quicshell::oidc
