// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "quicshell/wire.hpp"
#include "testutil.hpp"

using namespace quicshell;
using namespace quicshell::wire;

static Bytes bytes_of(std::initializer_list<int> v) {
  Bytes out;
  for (int b : v) out.push_back(static_cast<uint8_t>(b));
  return out;
}

TEST_CASE("varint encodes published reference vectors") {
  // Vectors from the QUIC variable-length integer definition.
  CHECK(encode_varint(0) == bytes_of({0x00}));
  CHECK(encode_varint(37) == bytes_of({0x25}));
  CHECK(encode_varint(15293) == bytes_of({0x7b, 0xbd}));
  CHECK(encode_varint(494878333) == bytes_of({0x9d, 0x7f, 0x3e, 0x7d}));
  CHECK(encode_varint(151288809941952652ULL) ==
        bytes_of({0xc2, 0x19, 0x7c, 0x5e, 0xff, 0x14, 0xe8, 0x8c}));
}

TEST_CASE("varint decodes reference vectors and reports consumed length") {
  auto d = decode_varint(bytes_of({0x25}));
  REQUIRE(d.ok());
  CHECK(d.value == 37);
  CHECK(d.consumed == 1);

  d = decode_varint(bytes_of({0x00}));
  REQUIRE(d.ok());
  CHECK(d.value == 0);
  CHECK(d.consumed == 1);

  auto long_form = bytes_of({0xc2, 0x19, 0x7c, 0x5e, 0xff, 0x14, 0xe8, 0x8c});
  d = decode_varint(long_form);
  REQUIRE(d.ok());
  CHECK(d.value == 151288809941952652ULL);
  CHECK(d.consumed == 8);
}

TEST_CASE("varint truncation is need-more-bytes, not malformed") {
  CHECK(decode_varint({}).status == DecodeStatus::NeedMore);
  // 0x7b announces a 2-byte form.
  CHECK(decode_varint(bytes_of({0x7b})).status == DecodeStatus::NeedMore);
  CHECK(decode_varint(bytes_of({0xc2, 0x19, 0x7c})).status == DecodeStatus::NeedMore);
}

TEST_CASE("varint rejects out-of-range values and accepts non-minimal forms") {
  CHECK_THROWS_AS(encode_varint(uint64_t{1} << 62), std::invalid_argument);
  CHECK_NOTHROW(encode_varint(kVarIntMax));

  // Decoder accepts the non-minimal 2-byte form of 37.
  auto d = decode_varint(bytes_of({0x40, 0x25}));
  REQUIRE(d.ok());
  CHECK(d.value == 37);
  CHECK(d.consumed == 2);
}

TEST_CASE("varint round-trip and minimality over randomized values") {
  for (int i = 0; i < 10000; i++) {
    uint64_t v = testutil::random_varint_value();
    Bytes enc = encode_varint(v);
    CHECK(enc.size() == varint_size(v));
    // Minimal form: the next shorter width cannot hold the value.
    if (enc.size() == 2) CHECK(v >= 64);
    if (enc.size() == 4) CHECK(v >= 16384);
    if (enc.size() == 8) CHECK(v >= (uint64_t{1} << 30));
    auto d = decode_varint(enc);
    REQUIRE(d.ok());
    CHECK(d.value == v);
    CHECK(d.consumed == enc.size());
  }
}

TEST_CASE("message layout examples") {
  CHECK(encode_message(ExitStatus{0}) == bytes_of({0x20, 0x00}));
  CHECK(encode_message(Data{DataKind::Stdout, to_bytes("hi")}) ==
        bytes_of({0x10, 0x01, 0x02, 'h', 'i'}));
  CHECK(encode_message(ShellRequest{}) == bytes_of({0x02}));

  // PtyRequest: code, term, cols, rows.
  Bytes expected = bytes_of({0x01, 0x05, 'x', 't', 'e', 'r', 'm', 0x40, 0x50, 0x18});
  CHECK(encode_message(PtyRequest{"xterm", 80, 24}) == expected);
}

TEST_CASE("message round-trip for 10000 randomized messages") {
  for (int i = 0; i < 10000; i++) {
    Message m = testutil::random_message();
    Bytes enc = encode_message(m);
    auto d = decode_message(enc);
    REQUIRE(d.ok());
    CHECK(d.value == m);
    CHECK(d.consumed == enc.size());
  }
}

TEST_CASE("message invariants: data kind and payload bound") {
  CHECK_THROWS_AS(encode_message(Data{static_cast<DataKind>(3), {}}), std::invalid_argument);
  Bytes big(kMaxDataPayload + 1, 0xaa);
  CHECK_THROWS_AS(encode_message(Data{DataKind::Stdin, big}), std::invalid_argument);

  // Decoding a kind outside {0,1,2} is malformed.
  Bytes bad = bytes_of({0x10, 0x03, 0x00});
  CHECK(decode_message(bad).status == DecodeStatus::Malformed);
}

TEST_CASE("frame layer carries an outer length and skips unknown types") {
  Bytes frame = encode_frame(ExitStatus{0});
  CHECK(frame == bytes_of({0x02, 0x20, 0x00}));
  auto d = decode_frame(frame);
  REQUIRE(d.ok());
  CHECK(d.consumed == frame.size());

  // Unknown message code inside a well-formed frame: skippable.
  Bytes unknown = bytes_of({0x03, 0x3f, 0xde, 0xad});
  d = decode_frame(unknown);
  CHECK(d.status == DecodeStatus::UnknownType);
  CHECK(d.unknown_code == 0x3f);
  CHECK(d.consumed == unknown.size());

  // Partial frame: need more.
  Bytes partial(frame.begin(), frame.end() - 1);
  CHECK(decode_frame(partial).status == DecodeStatus::NeedMore);
}

TEST_CASE("preamble layout example and round-trips") {
  Bytes session = encode_preamble({ChannelType::Session, "", 0, 0});
  Bytes expected = bytes_of({0x07});
  append(expected, std::string_view("session"));
  CHECK(session == expected);

  ChannelPreamble udp{ChannelType::DirectUdp, "127.0.0.1", 5353, 4};
  auto d = decode_preamble(encode_preamble(udp));
  REQUIRE(d.ok());
  CHECK(d.value == udp);

  for (int i = 0; i < 2000; i++) {
    ChannelPreamble p = testutil::random_preamble();
    auto r = decode_preamble(encode_preamble(p));
    REQUIRE(r.ok());
    CHECK(r.value == p);
  }
}

TEST_CASE("preamble validation") {
  CHECK_THROWS_AS(encode_preamble({ChannelType::DirectTcp, "", 0, 0}), std::invalid_argument);

  // Hand-built direct-tcp preamble with port 0 is rejected at decode.
  Bytes raw;
  encode_string(raw, "direct-tcp");
  encode_string(raw, "h");
  encode_varint(raw, 0);
  CHECK(decode_preamble(raw).status == DecodeStatus::Malformed);

  // Unknown channel type is a semantic error carrying the offending string.
  Bytes odd;
  encode_string(odd, "direct-quic");
  auto d = decode_preamble(odd);
  CHECK(d.status == DecodeStatus::UnknownType);
  CHECK(d.detail.find("direct-quic") != std::string::npos);
}

TEST_CASE("udp frame layout examples") {
  CHECK(encode_udp_frame({4, bytes_of({0xaa, 0xbb, 0xcc})}) ==
        bytes_of({0x04, 0xaa, 0xbb, 0xcc}));
  CHECK(encode_udp_frame({4, {}}) == bytes_of({0x04}));

  auto d = decode_udp_frame(bytes_of({0x04}));
  REQUIRE(d.ok());
  CHECK(d.value.datagram_id == 4);
  CHECK(d.value.payload.empty());

  CHECK(decode_udp_frame({}).status == DecodeStatus::Malformed);

  for (int i = 0; i < 2000; i++) {
    UdpFrame f = testutil::random_udp_frame();
    auto r = decode_udp_frame(encode_udp_frame(f));
    REQUIRE(r.ok());
    CHECK(r.value == f);
  }
}

TEST_CASE("decoders never read past input or crash on noise") {
  std::uniform_int_distribution<size_t> len_dist(0, 64);
  std::uniform_int_distribution<int> byte(0, 255);
  for (int i = 0; i < 20000; i++) {
    Bytes noise(len_dist(testutil::rng()), 0);
    for (auto& b : noise) b = static_cast<uint8_t>(byte(testutil::rng()));
    auto m = decode_message(noise);
    if (m.ok()) CHECK(m.consumed <= noise.size());
    auto f = decode_frame(noise);
    if (f.ok()) CHECK(f.consumed <= noise.size());
    auto p = decode_preamble(noise);
    if (p.ok()) CHECK(p.consumed <= noise.size());
    auto u = decode_udp_frame(noise);
    if (u.ok()) CHECK(u.consumed <= noise.size());
    auto v = decode_varint(noise);
    if (v.ok()) CHECK(v.consumed <= noise.size());
  }
}

TEST_CASE("truncating any valid encoding yields need-more, never a crash") {
  for (int i = 0; i < 500; i++) {
    Bytes enc = encode_frame(testutil::random_message());
    for (size_t cut = 0; cut < enc.size(); cut++) {
      auto d = decode_frame(ByteView(enc).subspan(0, cut));
      CHECK(d.status == DecodeStatus::NeedMore);
    }
  }
}
