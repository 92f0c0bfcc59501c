// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <chrono>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "quicshell/bytes.hpp"
#include "quicshell/keys.hpp"

namespace quicshell::auth {

using TimePoint = std::chrono::system_clock::time_point;
using Clock = std::function<TimePoint()>;

inline TimePoint system_now() { return std::chrono::system_clock::now(); }

inline int64_t to_unix(TimePoint t) {
  return std::chrono::duration_cast<std::chrono::seconds>(t.time_since_epoch()).count();
}

// --- conversation identifier -------------------------------------------------

inline constexpr size_t kConversationIdLen = 32;
inline constexpr const char* kExporterLabel = "EXPORTER-SSH3";

struct ConversationId {
  std::array<uint8_t, kConversationIdLen> bytes{};

  bool operator==(const ConversationId&) const = default;
  ByteView view() const { return ByteView(bytes.data(), bytes.size()); }
  std::string b64() const { return base64_encode(view()); }
};

// Keying-material exporter bound to one TLS session.
using TlsExporter =
    std::function<Bytes(std::string_view label, ByteView context, size_t length)>;

// Both endpoints of a connection derive the same value; throws if the
// exporter is unavailable (handshake incomplete).
ConversationId derive_conversation_id(const TlsExporter& exporter);

// --- credentials --------------------------------------------------------------

struct PasswordCredential {
  std::string username;
  std::string password;
};

struct OidcTokenCredential {
  std::string raw_jwt;
};

struct PrivateKeyCredential {
  std::string username;
  keys::Key key;
  keys::SigAlg alg;
};

using Credential = std::variant<PasswordCredential, OidcTokenCredential, PrivateKeyCredential>;

// Session-bound token parameters.
inline constexpr const char* kPubkeyJwtAudience = "ssh3";
inline constexpr std::chrono::seconds kPubkeyJwtLifetime{10};

// Builds the Authorization header value for the CONNECT request. The
// private-key form signs over the conversation id, so `sid` is required
// there. Throws std::invalid_argument on unusable credentials (empty
// username, ':' in a Basic username).
std::string build_authorization_header(const Credential& credential,
                                       const std::optional<ConversationId>& sid,
                                       TimePoint now);

// --- identity store ------------------------------------------------------------

struct PasswordHash {
  std::string scheme_id;  // e.g. "scrypt-16384-8-1"
  Bytes salt;
  Bytes hash;
};

// Creates a salted hash entry with the builtin memory-hard scheme.
PasswordHash make_password_hash(std::string_view password);
bool verify_password(const PasswordHash& stored, std::string_view password);

std::string password_hash_to_string(const PasswordHash& h);
std::optional<PasswordHash> password_hash_from_string(std::string_view s);

struct OidcIdentity {
  std::string issuer;
  std::string email;
  bool operator==(const OidcIdentity&) const = default;
};

struct UserEntries {
  std::vector<PasswordHash> passwords;
  std::vector<keys::Key> pubkeys;
  std::vector<OidcIdentity> oidc;
};

class IdentityStore {
 public:
  // Section format:
  //   [user <name>]
  //   password-hash <scheme>:<b64 salt>:<b64 hash>
  //   pubkey <authorized-keys line>
  //   oidc <issuer-url> <email>
  // Unknown entry kinds are skipped with a warning; duplicate user sections
  // and malformed key material raise ParseError with the line number.
  struct ParseError : std::runtime_error {
    int line;
    ParseError(int line_, const std::string& msg)
        : std::runtime_error("line " + std::to_string(line_) + ": " + msg), line(line_) {}
  };

  static IdentityStore parse(std::string_view text);
  static IdentityStore from_file(const std::string& path);
  std::string serialize() const;

  bool has_user(const std::string& username) const;
  const UserEntries* find(const std::string& username) const;
  void add_user(const std::string& username, UserEntries entries);
  size_t user_count() const { return users_.size(); }

  // Scheme names of the user's entry kinds; `fallback` when the user is
  // unknown (a 401 always advertises at least one scheme).
  std::vector<std::string> advertised_schemes(const std::string& username,
                                              const std::vector<std::string>& fallback) const;

 private:
  std::map<std::string, UserEntries> users_;
};

// --- decisions ------------------------------------------------------------------

enum class RejectReason {
  None,
  MissingCredentials,
  UnsupportedScheme,
  BadFormat,
  UnknownUser,
  WrongPassword,
  UserMismatch,
  AlgNotAllowed,
  UnknownKey,
  UnknownKeyId,
  BadSignature,
  SessionMismatch,
  Expired,
  NotYetValid,
  IssuerMismatch,
  AudienceMismatch,
  IdentityNotAuthorized,
  ProviderUnreachable,
};

const char* reject_reason_code(RejectReason r);

struct AuthDecision {
  bool accepted = false;
  std::string username;                         // set when accepted
  std::vector<std::string> advertised_schemes;  // set when rejected
  RejectReason reason = RejectReason::None;

  static AuthDecision accept(std::string user);
  static AuthDecision reject(RejectReason reason, std::vector<std::string> schemes);
};

// --- scheme verification -----------------------------------------------------------

AuthDecision verify_basic(std::string_view header_value, const IdentityStore& store,
                          const std::string& claimed_user);

AuthDecision verify_pubkey_jwt(std::string_view token, const IdentityStore& store,
                               const std::string& claimed_user, const ConversationId& sid,
                               TimePoint now);

struct ProviderKey {
  std::string kid;
  keys::Key key;
};
using ProviderKeySet = std::vector<ProviderKey>;

AuthDecision verify_oidc_token(std::string_view token, const ProviderKeySet& provider_keys,
                               const std::string& expected_issuer,
                               const std::string& expected_audience,
                               const IdentityStore& store, const std::string& claimed_user,
                               TimePoint now);

// --- request-boundary dispatch ------------------------------------------------------

struct OidcVerifier {
  std::string expected_audience;
  // Resolves the signing keys for an issuer URL (JWKS, possibly cached);
  // nullopt means the provider is unreachable and no keys are cached.
  std::function<std::optional<ProviderKeySet>(const std::string& issuer)> fetch_keys;
};

// Dispatches on the Authorization scheme: Basic, or Bearer carrying either a
// session-bound public-key token (audience "ssh3") or an OIDC ID token.
AuthDecision authenticate(const std::optional<std::string>& authorization,
                          const std::string& claimed_user, const IdentityStore& store,
                          const ConversationId& sid, TimePoint now,
                          const std::vector<std::string>& enabled_schemes,
                          const OidcVerifier* oidc);

// Total number of verification attempts since process start. The request
// router must answer unknown paths without touching authorization at all;
// tests pin that with this counter.
uint64_t verification_count();

}  // namespace quicshell::auth
