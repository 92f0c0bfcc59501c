// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "quicshell/jwt.hpp"
#include "quicshell/keys.hpp"

using namespace quicshell;
using namespace quicshell::keys;

TEST_CASE("base64 codecs") {
  CHECK(base64_encode(as_view("user:pass")) == "dXNlcjpwYXNz");
  CHECK(to_string(*base64_decode("dXNlcjpwYXNz")) == "user:pass");
  CHECK(base64url_encode(as_view("{\"alg\"}")) == "eyJhbGcifQ");
  CHECK_FALSE(base64_decode("@@@@").has_value());
  // Unpadded input is tolerated for the standard alphabet.
  CHECK(to_string(*base64_decode("aGk")) == "hi");
  for (size_t n : {0u, 1u, 2u, 3u, 31u, 257u}) {
    Bytes data = random_bytes(n);
    CHECK(*base64_decode(base64_encode(data)) == data);
    CHECK(*base64url_decode(base64url_encode(data)) == data);
  }
}

TEST_CASE("authorized-keys line round-trips for both key families") {
  for (Key key : {Key::generate_ed25519(), Key::generate_rsa(2048)}) {
    std::string line = key.authorized_line();
    auto parsed = Key::from_authorized_line(line);
    REQUIRE(parsed.has_value());
    CHECK(parsed->authorized_line() == line);
    CHECK(key.same_public_key(*parsed));

    // Trailing comments are tolerated.
    auto with_comment = Key::from_authorized_line(line + " alice@laptop");
    REQUIRE(with_comment.has_value());
    CHECK(key.same_public_key(*with_comment));
  }
  CHECK_FALSE(Key::from_authorized_line("ssh-dss AAAA").has_value());
  CHECK_FALSE(Key::from_authorized_line("garbage").has_value());
}

TEST_CASE("private key PEM round-trip") {
  Key key = Key::generate_ed25519();
  Key loaded = Key::from_private_pem(key.private_pem());
  CHECK(loaded.has_private());
  CHECK(key.same_public_key(loaded));
}

TEST_CASE("sign/verify across algorithms") {
  Key ed = Key::generate_ed25519();
  Key rsa = Key::generate_rsa(2048);
  Bytes msg = to_bytes("attack at dawn");

  Bytes sig_ed = sign(ed, SigAlg::EdDSA, msg);
  CHECK(verify(ed, SigAlg::EdDSA, msg, sig_ed));
  Bytes tampered = msg;
  tampered[0] ^= 1;
  CHECK_FALSE(verify(ed, SigAlg::EdDSA, tampered, sig_ed));

  Bytes sig_rsa = sign(rsa, SigAlg::RS256, msg);
  CHECK(verify(rsa, SigAlg::RS256, msg, sig_rsa));
  CHECK_FALSE(verify(rsa, SigAlg::RS256, tampered, sig_rsa));

  // Algorithm/key-type confusion must fail, not crash.
  CHECK_FALSE(verify(ed, SigAlg::RS256, msg, sig_ed));
  CHECK_FALSE(verify(rsa, SigAlg::EdDSA, msg, sig_rsa));
}

TEST_CASE("jwt mint/parse/verify") {
  Key key = Key::generate_ed25519();
  nlohmann::json claims = {{"iss", "alice"}, {"exp", 1700000000}};
  std::string token = jwt::mint(key, SigAlg::EdDSA, claims, {{"kid", "k1"}});

  auto parsed = jwt::parse(token);
  REQUIRE(parsed.has_value());
  CHECK(parsed->claims["iss"] == "alice");
  CHECK(parsed->alg() == SigAlg::EdDSA);
  CHECK(parsed->kid() == "k1");
  CHECK(jwt::verify_signature(*parsed, key));

  Key other = Key::generate_ed25519();
  CHECK_FALSE(jwt::verify_signature(*parsed, other));

  CHECK_FALSE(jwt::parse("onlytwoparts.abc").has_value());
  CHECK_FALSE(jwt::parse("a.b.c.d").has_value());
  CHECK_FALSE(jwt::parse("!!.@@.##").has_value());
}

TEST_CASE("self-signed certificate generation and fingerprints") {
  auto cert = generate_self_signed("test.local");
  CHECK(cert.cert_pem.find("BEGIN CERTIFICATE") != std::string::npos);
  auto fp1 = cert_fingerprint_from_pem(cert.cert_pem);
  REQUIRE(fp1.has_value());
  CHECK(fp1->size() == 32);

  auto cert2 = generate_self_signed("test.local");
  auto fp2 = cert_fingerprint_from_pem(cert2.cert_pem);
  CHECK_FALSE(*fp1 == *fp2);
  CHECK_FALSE(cert_fingerprint_from_pem("not a pem").has_value());
}
