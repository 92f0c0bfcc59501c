// SPDX-License-Identifier: Apache-2.0
#include "quicshell/auth.hpp"

#include <openssl/evp.h>

#include <fmt/format.h>

#include <algorithm>
#include <atomic>
#include <fstream>
#include <sstream>

#include "quicshell/jwt.hpp"
#include "quicshell/log.hpp"

namespace quicshell::auth {

using nlohmann::json;

namespace {

std::atomic<uint64_t> g_verifications{0};

void count_verification() { g_verifications.fetch_add(1, std::memory_order_relaxed); }

bool iequals(std::string_view a, std::string_view b) {
  return a.size() == b.size() &&
         std::equal(a.begin(), a.end(), b.begin(),
                    [](char x, char y) { return tolower(x) == tolower(y); });
}

// "Basic dXNlcjpwYXNz" -> param after the scheme, nullopt if scheme differs.
std::optional<std::string_view> scheme_param(std::string_view header, std::string_view scheme) {
  if (header.size() < scheme.size() + 1) return std::nullopt;
  if (!iequals(header.substr(0, scheme.size()), scheme)) return std::nullopt;
  if (header[scheme.size()] != ' ') return std::nullopt;
  std::string_view rest = header.substr(scheme.size() + 1);
  while (!rest.empty() && rest.front() == ' ') rest.remove_prefix(1);
  return rest;
}

}  // namespace

uint64_t verification_count() { return g_verifications.load(std::memory_order_relaxed); }

ConversationId derive_conversation_id(const TlsExporter& exporter) {
  Bytes material = exporter(kExporterLabel, {}, kConversationIdLen);
  if (material.size() != kConversationIdLen)
    throw std::runtime_error("TLS exporter unavailable or returned short material");
  ConversationId id;
  std::copy(material.begin(), material.end(), id.bytes.begin());
  return id;
}

AuthDecision AuthDecision::accept(std::string user) {
  AuthDecision d;
  d.accepted = true;
  d.username = std::move(user);
  return d;
}

AuthDecision AuthDecision::reject(RejectReason reason, std::vector<std::string> schemes) {
  AuthDecision d;
  d.accepted = false;
  d.reason = reason;
  d.advertised_schemes = std::move(schemes);
  return d;
}

const char* reject_reason_code(RejectReason r) {
  switch (r) {
    case RejectReason::None: return "none";
    case RejectReason::MissingCredentials: return "missing-credentials";
    case RejectReason::UnsupportedScheme: return "unsupported-scheme";
    case RejectReason::BadFormat: return "bad-format";
    case RejectReason::UnknownUser: return "unknown-user";
    case RejectReason::WrongPassword: return "wrong-password";
    case RejectReason::UserMismatch: return "user-mismatch";
    case RejectReason::AlgNotAllowed: return "alg-not-allowed";
    case RejectReason::UnknownKey: return "unknown-key";
    case RejectReason::UnknownKeyId: return "unknown-key-id";
    case RejectReason::BadSignature: return "bad-signature";
    case RejectReason::SessionMismatch: return "session-mismatch";
    case RejectReason::Expired: return "expired";
    case RejectReason::NotYetValid: return "not-yet-valid";
    case RejectReason::IssuerMismatch: return "issuer-mismatch";
    case RejectReason::AudienceMismatch: return "audience-mismatch";
    case RejectReason::IdentityNotAuthorized: return "identity-not-authorized";
    case RejectReason::ProviderUnreachable: return "provider-unreachable";
  }
  return "?";
}

// --- password hashing -----------------------------------------------------------

namespace {

struct ScryptParams {
  uint64_t n = 16384;
  uint32_t r = 8;
  uint32_t p = 1;
};

constexpr size_t kScryptKeyLen = 32;
constexpr size_t kScryptSaltLen = 16;

std::optional<ScryptParams> parse_scheme_id(std::string_view id) {
  if (id.substr(0, 7) != "scrypt-") return std::nullopt;
  ScryptParams params;
  unsigned long long n = 0, r = 0, p = 0;
  if (sscanf(std::string(id.substr(7)).c_str(), "%llu-%llu-%llu", &n, &r, &p) != 3)
    return std::nullopt;
  if (n == 0 || (n & (n - 1)) != 0 || r == 0 || p == 0) return std::nullopt;
  params.n = n;
  params.r = static_cast<uint32_t>(r);
  params.p = static_cast<uint32_t>(p);
  return params;
}

Bytes scrypt(std::string_view password, ByteView salt, const ScryptParams& params) {
  Bytes key(kScryptKeyLen);
  if (EVP_PBE_scrypt(password.data(), password.size(), salt.data(), salt.size(), params.n,
                     params.r, params.p, 64 * 1024 * 1024, key.data(), key.size()) != 1)
    throw std::runtime_error("scrypt failed");
  return key;
}

}  // namespace

PasswordHash make_password_hash(std::string_view password) {
  ScryptParams params;
  PasswordHash h;
  h.scheme_id = fmt::format("scrypt-{}-{}-{}", params.n, params.r, params.p);
  h.salt = random_bytes(kScryptSaltLen);
  h.hash = scrypt(password, h.salt, params);
  return h;
}

bool verify_password(const PasswordHash& stored, std::string_view password) {
  auto params = parse_scheme_id(stored.scheme_id);
  if (!params) return false;
  Bytes computed = scrypt(password, stored.salt, *params);
  return constant_time_equal(computed, stored.hash);
}

std::string password_hash_to_string(const PasswordHash& h) {
  return fmt::format("{}:{}:{}", h.scheme_id, base64_encode(h.salt), base64_encode(h.hash));
}

std::optional<PasswordHash> password_hash_from_string(std::string_view s) {
  size_t c1 = s.find(':');
  if (c1 == std::string_view::npos) return std::nullopt;
  size_t c2 = s.find(':', c1 + 1);
  if (c2 == std::string_view::npos) return std::nullopt;
  PasswordHash h;
  h.scheme_id = std::string(s.substr(0, c1));
  if (!parse_scheme_id(h.scheme_id)) return std::nullopt;
  auto salt = base64_decode(s.substr(c1 + 1, c2 - c1 - 1));
  auto hash = base64_decode(s.substr(c2 + 1));
  if (!salt || !hash || hash->empty()) return std::nullopt;
  h.salt = std::move(*salt);
  h.hash = std::move(*hash);
  return h;
}

// --- identity store -------------------------------------------------------------

IdentityStore IdentityStore::parse(std::string_view text) {
  IdentityStore store;
  std::string current_user;
  UserEntries current;
  int lineno = 0;

  auto flush = [&] {
    if (!current_user.empty()) {
      store.users_.emplace(current_user, std::move(current));
      current = UserEntries{};
    }
  };

  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    lineno++;
    std::string_view line = raw;
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.remove_suffix(1);
    while (!line.empty() && line.front() == ' ') line.remove_prefix(1);
    if (line.empty() || line.front() == '#') continue;

    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError(lineno, "unterminated section header");
      std::string_view inner = line.substr(1, line.size() - 2);
      if (inner.substr(0, 5) != "user " || inner.size() <= 5)
        throw ParseError(lineno, "expected [user <name>]");
      std::string name(inner.substr(5));
      if (store.users_.count(name) || name == current_user)
        throw ParseError(lineno, "duplicate user section: " + name);
      flush();
      current_user = name;
      continue;
    }

    if (current_user.empty()) throw ParseError(lineno, "entry before any [user] section");

    size_t sp = line.find(' ');
    std::string_view kind = line.substr(0, sp == std::string_view::npos ? line.size() : sp);
    std::string_view rest = sp == std::string_view::npos ? std::string_view{} : line.substr(sp + 1);

    if (kind == "password-hash") {
      auto h = password_hash_from_string(rest);
      if (!h) throw ParseError(lineno, "malformed password-hash entry");
      current.passwords.push_back(std::move(*h));
    } else if (kind == "pubkey") {
      auto key = keys::Key::from_authorized_line(rest);
      if (!key) throw ParseError(lineno, "malformed public key");
      current.pubkeys.push_back(std::move(*key));
    } else if (kind == "oidc") {
      size_t sep = rest.find(' ');
      if (sep == std::string_view::npos || sep == 0 || sep + 1 >= rest.size())
        throw ParseError(lineno, "expected: oidc <issuer-url> <email>");
      current.oidc.push_back(
          OidcIdentity{std::string(rest.substr(0, sep)), std::string(rest.substr(sep + 1))});
    } else {
      log::warn("identity store line {}: skipping unknown entry kind \"{}\"", lineno,
                std::string(kind));
    }
  }
  flush();
  return store;
}

IdentityStore IdentityStore::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open identity store: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

std::string IdentityStore::serialize() const {
  std::string out;
  for (const auto& [name, entries] : users_) {
    out += fmt::format("[user {}]\n", name);
    for (const auto& h : entries.passwords)
      out += fmt::format("password-hash {}\n", password_hash_to_string(h));
    for (const auto& k : entries.pubkeys) out += fmt::format("pubkey {}\n", k.authorized_line());
    for (const auto& o : entries.oidc) out += fmt::format("oidc {} {}\n", o.issuer, o.email);
  }
  return out;
}

bool IdentityStore::has_user(const std::string& username) const {
  return users_.count(username) > 0;
}

const UserEntries* IdentityStore::find(const std::string& username) const {
  auto it = users_.find(username);
  return it == users_.end() ? nullptr : &it->second;
}

void IdentityStore::add_user(const std::string& username, UserEntries entries) {
  users_[username] = std::move(entries);
}

std::vector<std::string> IdentityStore::advertised_schemes(
    const std::string& username, const std::vector<std::string>& fallback) const {
  const UserEntries* e = find(username);
  if (!e) return fallback;
  std::vector<std::string> schemes;
  if (!e->passwords.empty()) schemes.push_back("Basic");
  if (!e->pubkeys.empty() || !e->oidc.empty()) schemes.push_back("Bearer");
  if (schemes.empty()) return fallback;
  return schemes;
}

// --- header construction ----------------------------------------------------------

std::string build_authorization_header(const Credential& credential,
                                       const std::optional<ConversationId>& sid,
                                       TimePoint now) {
  return std::visit(
      [&](const auto& c) -> std::string {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, PasswordCredential>) {
          if (c.username.empty()) throw std::invalid_argument("empty username");
          if (c.username.find(':') != std::string::npos)
            throw std::invalid_argument("':' in username is ambiguous for Basic");
          return "Basic " + base64_encode(as_view(c.username + ":" + c.password));
        } else if constexpr (std::is_same_v<T, OidcTokenCredential>) {
          return "Bearer " + c.raw_jwt;
        } else {
          if (c.username.empty()) throw std::invalid_argument("empty username");
          if (!sid) throw std::invalid_argument("public-key credential requires a session id");
          json claims = {
              {"iss", c.username},
              {"aud", kPubkeyJwtAudience},
              {"iat", to_unix(now)},
              {"exp", to_unix(now + kPubkeyJwtLifetime)},
              {"public_key", c.key.authorized_line()},
              {"session_id", sid->b64()},
          };
          return "Bearer " + jwt::mint(c.key, c.alg, claims);
        }
      },
      credential);
}

// --- verification -------------------------------------------------------------------

AuthDecision verify_basic(std::string_view header_value, const IdentityStore& store,
                          const std::string& claimed_user) {
  count_verification();
  auto schemes = [&] { return store.advertised_schemes(claimed_user, {"Basic"}); };

  auto param = scheme_param(header_value, "Basic");
  if (!param) return AuthDecision::reject(RejectReason::BadFormat, schemes());
  auto decoded = base64_decode(*param);
  if (!decoded) return AuthDecision::reject(RejectReason::BadFormat, schemes());
  std::string pair = to_string(*decoded);
  size_t colon = pair.find(':');
  if (colon == std::string::npos)
    return AuthDecision::reject(RejectReason::BadFormat, schemes());
  std::string username = pair.substr(0, colon);
  std::string password = pair.substr(colon + 1);

  if (username != claimed_user)
    return AuthDecision::reject(RejectReason::UserMismatch, schemes());
  const UserEntries* entries = store.find(claimed_user);
  if (!entries || entries->passwords.empty())
    return AuthDecision::reject(RejectReason::UnknownUser, schemes());
  for (const auto& stored : entries->passwords)
    if (verify_password(stored, password)) return AuthDecision::accept(claimed_user);
  return AuthDecision::reject(RejectReason::WrongPassword, schemes());
}

AuthDecision verify_pubkey_jwt(std::string_view token, const IdentityStore& store,
                               const std::string& claimed_user, const ConversationId& sid,
                               TimePoint now) {
  count_verification();
  auto schemes = [&] { return store.advertised_schemes(claimed_user, {"Bearer"}); };
  auto reject = [&](RejectReason r) { return AuthDecision::reject(r, schemes()); };

  auto parsed = jwt::parse(token);
  if (!parsed) return reject(RejectReason::BadFormat);
  if (!parsed->alg()) return reject(RejectReason::AlgNotAllowed);

  // (a) the public key in the token matches a locally installed key
  auto pk_claim = parsed->claims.find("public_key");
  if (pk_claim == parsed->claims.end() || !pk_claim->is_string())
    return reject(RejectReason::BadFormat);
  auto offered = keys::Key::from_authorized_line(pk_claim->get<std::string>());
  if (!offered) return reject(RejectReason::BadFormat);
  const UserEntries* entries = store.find(claimed_user);
  if (!entries) return reject(RejectReason::UnknownUser);
  const keys::Key* match = nullptr;
  for (const auto& k : entries->pubkeys)
    if (k.same_public_key(*offered)) {
      match = &k;
      break;
    }
  if (!match) return reject(RejectReason::UnknownKey);

  // (b) signature under the stored key
  if (!jwt::verify_signature(*parsed, *match)) return reject(RejectReason::BadSignature);

  // (c) session binding (replay protection)
  auto sid_claim = parsed->claims.find("session_id");
  if (sid_claim == parsed->claims.end() || !sid_claim->is_string())
    return reject(RejectReason::BadFormat);
  auto sid_bytes = base64_decode(sid_claim->get<std::string>());
  if (!sid_bytes || sid_bytes->size() != kConversationIdLen)
    return reject(RejectReason::BadFormat);
  if (!constant_time_equal(*sid_bytes, sid.view()))
    return reject(RejectReason::SessionMismatch);

  // (d) validity window: iat <= now < exp
  auto iat = parsed->claims.find("iat");
  auto exp = parsed->claims.find("exp");
  if (iat == parsed->claims.end() || !iat->is_number_integer() || exp == parsed->claims.end() ||
      !exp->is_number_integer())
    return reject(RejectReason::BadFormat);
  int64_t now_s = to_unix(now);
  if (now_s < iat->get<int64_t>()) return reject(RejectReason::NotYetValid);
  if (now_s >= exp->get<int64_t>()) return reject(RejectReason::Expired);

  // (e) issuer names the authenticating user
  auto iss = parsed->claims.find("iss");
  if (iss == parsed->claims.end() || !iss->is_string())
    return reject(RejectReason::BadFormat);
  if (iss->get<std::string>() != claimed_user) return reject(RejectReason::IssuerMismatch);

  auto aud = parsed->claims.find("aud");
  if (aud == parsed->claims.end() || !aud->is_string() ||
      aud->get<std::string>() != kPubkeyJwtAudience)
    return reject(RejectReason::AudienceMismatch);

  return AuthDecision::accept(claimed_user);
}

AuthDecision verify_oidc_token(std::string_view token, const ProviderKeySet& provider_keys,
                               const std::string& expected_issuer,
                               const std::string& expected_audience,
                               const IdentityStore& store, const std::string& claimed_user,
                               TimePoint now) {
  count_verification();
  auto schemes = [&] { return store.advertised_schemes(claimed_user, {"Bearer"}); };
  auto reject = [&](RejectReason r) { return AuthDecision::reject(r, schemes()); };

  auto parsed = jwt::parse(token);
  if (!parsed) return reject(RejectReason::BadFormat);
  if (!parsed->alg()) return reject(RejectReason::AlgNotAllowed);

  // Select the provider key; a kid narrows the choice, otherwise any
  // provider key may verify.
  auto kid = parsed->kid();
  const keys::Key* match = nullptr;
  for (const auto& pk : provider_keys) {
    if (kid && pk.kid != *kid) continue;
    if (jwt::verify_signature(*parsed, pk.key)) {
      match = &pk.key;
      break;
    }
  }
  if (!match) {
    bool kid_known = !kid || std::any_of(provider_keys.begin(), provider_keys.end(),
                                         [&](const ProviderKey& pk) { return pk.kid == *kid; });
    return reject(kid_known ? RejectReason::BadSignature : RejectReason::UnknownKeyId);
  }

  auto iss = parsed->claims.find("iss");
  if (iss == parsed->claims.end() || !iss->is_string())
    return reject(RejectReason::BadFormat);
  if (iss->get<std::string>() != expected_issuer) return reject(RejectReason::IssuerMismatch);

  auto aud = parsed->claims.find("aud");
  bool aud_ok = false;
  if (aud != parsed->claims.end()) {
    if (aud->is_string()) aud_ok = aud->get<std::string>() == expected_audience;
    else if (aud->is_array())
      aud_ok = std::any_of(aud->begin(), aud->end(), [&](const json& a) {
        return a.is_string() && a.get<std::string>() == expected_audience;
      });
  }
  if (!aud_ok) return reject(RejectReason::AudienceMismatch);

  auto exp = parsed->claims.find("exp");
  if (exp == parsed->claims.end() || !exp->is_number_integer())
    return reject(RejectReason::BadFormat);
  if (to_unix(now) >= exp->get<int64_t>()) return reject(RejectReason::Expired);

  auto email = parsed->claims.find("email");
  if (email == parsed->claims.end() || !email->is_string())
    return reject(RejectReason::BadFormat);
  const UserEntries* entries = store.find(claimed_user);
  if (!entries) return reject(RejectReason::UnknownUser);
  OidcIdentity presented{expected_issuer, email->get<std::string>()};
  bool authorized = std::any_of(entries->oidc.begin(), entries->oidc.end(),
                                [&](const OidcIdentity& o) { return o == presented; });
  if (!authorized) return reject(RejectReason::IdentityNotAuthorized);

  return AuthDecision::accept(claimed_user);
}

AuthDecision authenticate(const std::optional<std::string>& authorization,
                          const std::string& claimed_user, const IdentityStore& store,
                          const ConversationId& sid, TimePoint now,
                          const std::vector<std::string>& enabled_schemes,
                          const OidcVerifier* oidc) {
  count_verification();
  auto schemes = [&] { return store.advertised_schemes(claimed_user, enabled_schemes); };

  if (!authorization || authorization->empty())
    return AuthDecision::reject(RejectReason::MissingCredentials, enabled_schemes);

  auto enabled = [&](const char* s) {
    return std::find(enabled_schemes.begin(), enabled_schemes.end(), s) !=
           enabled_schemes.end();
  };

  if (scheme_param(*authorization, "Basic")) {
    if (!enabled("Basic"))
      return AuthDecision::reject(RejectReason::UnsupportedScheme, enabled_schemes);
    return verify_basic(*authorization, store, claimed_user);
  }

  if (auto bearer = scheme_param(*authorization, "Bearer")) {
    if (!enabled("Bearer"))
      return AuthDecision::reject(RejectReason::UnsupportedScheme, enabled_schemes);
    auto parsed = jwt::parse(*bearer);
    if (!parsed) return AuthDecision::reject(RejectReason::BadFormat, schemes());

    // Session-bound tokens carry the fixed protocol audience; everything
    // else is treated as an OIDC ID token.
    auto aud = parsed->claims.find("aud");
    bool is_pubkey = aud != parsed->claims.end() && aud->is_string() &&
                     aud->get<std::string>() == kPubkeyJwtAudience;
    if (is_pubkey) return verify_pubkey_jwt(*bearer, store, claimed_user, sid, now);

    if (!oidc) return AuthDecision::reject(RejectReason::UnsupportedScheme, schemes());
    auto iss = parsed->claims.find("iss");
    if (iss == parsed->claims.end() || !iss->is_string())
      return AuthDecision::reject(RejectReason::BadFormat, schemes());
    std::string issuer = iss->get<std::string>();

    // The issuer must be one the claimed user is configured for; this also
    // pins the JWKS endpoint we are willing to contact.
    const UserEntries* entries = store.find(claimed_user);
    bool issuer_known =
        entries && std::any_of(entries->oidc.begin(), entries->oidc.end(),
                               [&](const OidcIdentity& o) { return o.issuer == issuer; });
    if (!issuer_known)
      return AuthDecision::reject(RejectReason::IdentityNotAuthorized, schemes());

    auto keys = oidc->fetch_keys(issuer);
    if (!keys) return AuthDecision::reject(RejectReason::ProviderUnreachable, schemes());
    return verify_oidc_token(*bearer, *keys, issuer, oidc->expected_audience, store,
                             claimed_user, now);
  }

  return AuthDecision::reject(RejectReason::UnsupportedScheme, enabled_schemes);
}

}  // namespace quicshell::auth
