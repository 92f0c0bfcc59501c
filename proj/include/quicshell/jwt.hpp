// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <json.hpp>

#include <optional>
#include <string>

#include "quicshell/bytes.hpp"
#include "quicshell/keys.hpp"

namespace quicshell::jwt {

// Compact serialization: base64url(header) "." base64url(claims) "." base64url(sig).
std::string mint(const keys::Key& key, keys::SigAlg alg, const nlohmann::json& claims,
                 const nlohmann::json& extra_header = nlohmann::json::object());

struct Parsed {
  nlohmann::json header;
  nlohmann::json claims;
  Bytes signature;
  std::string signing_input;  // "<b64 header>.<b64 claims>"

  std::optional<keys::SigAlg> alg() const;
  std::optional<std::string> kid() const;
};

std::optional<Parsed> parse(std::string_view token);

bool verify_signature(const Parsed& token, const keys::Key& public_key);

}  // namespace quicshell::jwt
