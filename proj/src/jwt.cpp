// SPDX-License-Identifier: Apache-2.0
#include "quicshell/jwt.hpp"

namespace quicshell::jwt {

using nlohmann::json;

std::string mint(const keys::Key& key, keys::SigAlg alg, const json& claims,
                 const json& extra_header) {
  json header = extra_header;
  header["alg"] = keys::sig_alg_name(alg);
  header["typ"] = "JWT";
  std::string input = base64url_encode(as_view(header.dump())) + "." +
                      base64url_encode(as_view(claims.dump()));
  Bytes sig = keys::sign(key, alg, as_view(input));
  return input + "." + base64url_encode(sig);
}

std::optional<Parsed> parse(std::string_view token) {
  size_t dot1 = token.find('.');
  if (dot1 == std::string_view::npos) return std::nullopt;
  size_t dot2 = token.find('.', dot1 + 1);
  if (dot2 == std::string_view::npos) return std::nullopt;
  if (token.find('.', dot2 + 1) != std::string_view::npos) return std::nullopt;

  auto header_bytes = base64url_decode(token.substr(0, dot1));
  auto claims_bytes = base64url_decode(token.substr(dot1 + 1, dot2 - dot1 - 1));
  auto sig_bytes = base64url_decode(token.substr(dot2 + 1));
  if (!header_bytes || !claims_bytes || !sig_bytes) return std::nullopt;

  Parsed p;
  p.header = json::parse(to_string(*header_bytes), nullptr, false);
  p.claims = json::parse(to_string(*claims_bytes), nullptr, false);
  if (p.header.is_discarded() || p.claims.is_discarded()) return std::nullopt;
  if (!p.header.is_object() || !p.claims.is_object()) return std::nullopt;
  p.signature = std::move(*sig_bytes);
  p.signing_input = std::string(token.substr(0, dot2));
  return p;
}

std::optional<keys::SigAlg> Parsed::alg() const {
  auto it = header.find("alg");
  if (it == header.end() || !it->is_string()) return std::nullopt;
  return keys::sig_alg_from_name(it->get<std::string>());
}

std::optional<std::string> Parsed::kid() const {
  auto it = header.find("kid");
  if (it == header.end() || !it->is_string()) return std::nullopt;
  return it->get<std::string>();
}

bool verify_signature(const Parsed& token, const keys::Key& public_key) {
  auto alg = token.alg();
  if (!alg) return false;
  return keys::verify(public_key, *alg, as_view(token.signing_input), token.signature);
}

}  // namespace quicshell::jwt
