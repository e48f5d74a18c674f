#include <gtest/gtest.h>

#include "fedmq/codec.hpp"
#include "support/packet_gen.hpp"

using namespace fedmq;

namespace {

// Scalar decode loop straight from the MQTT varint definition; kept apart
// from the production decoder so the two can be compared.
std::uint64_t oracle_decode(const bytes& b) {
    std::uint64_t value = 0, multiplier = 1;
    for (auto byte : b) {
        value += (byte & 127u) * multiplier;
        multiplier *= 128;
    }
    return value;
}

// Control byte table from the MQTT 3.1.1 fixed header definition.
std::uint8_t oracle_control(packet_type t) {
    switch (t) {
    case packet_type::pubrel:
    case packet_type::subscribe:
    case packet_type::unsubscribe: return static_cast<std::uint8_t>((static_cast<int>(t) << 4) | 2);
    default: return static_cast<std::uint8_t>(static_cast<int>(t) << 4);
    }
}

codec_errc decode_error(const bytes& b) {
    try {
        decode_packet(b);
    } catch (const codec_error& e) {
        return e.code();
    }
    ADD_FAILURE() << "decoded";
    return codec_errc::value_too_large;
}

} // namespace

TEST(RemainingLength, Examples) {
    EXPECT_EQ(encode_remaining_length(0), (bytes{0x00}));
    EXPECT_EQ(encode_remaining_length(128), (bytes{0x80, 0x01}));
    EXPECT_EQ(encode_remaining_length(268'435'455), (bytes{0xFF, 0xFF, 0xFF, 0x7F}));
    EXPECT_EQ(oracle_decode({0x80, 0x01}), 128u);
    EXPECT_EQ(oracle_decode({0xFF, 0xFF, 0xFF, 0x7F}), 268'435'455u);
}

TEST(RemainingLength, TooLarge) {
    try {
        encode_remaining_length(268'435'456);
        FAIL();
    } catch (const codec_error& e) {
        EXPECT_EQ(e.code(), codec_errc::value_too_large);
    }
}

TEST(RemainingLength, DecodeExamples) {
    auto [n, used] = decode_remaining_length(bytes{0x7F});
    EXPECT_EQ(n, 127u);
    EXPECT_EQ(used, 1u);
    try {
        decode_remaining_length(bytes{0x80, 0x80, 0x80, 0x80, 0x01});
        FAIL();
    } catch (const codec_error& e) {
        EXPECT_EQ(e.code(), codec_errc::malformed);
    }
    try {
        decode_remaining_length(bytes{0x80});
        FAIL();
    } catch (const codec_error& e) {
        EXPECT_EQ(e.code(), codec_errc::incomplete);
    }
}

TEST(RemainingLength, AgreesWithOracleAcrossRange) {
    std::vector<std::uint64_t> values = {0, 1, 127, 128, 16'383, 16'384, 2'097'151, 2'097'152, 268'435'455};
    std::mt19937_64 rng(5);
    for (int i = 0; i < 20000; ++i) values.push_back(rng() % 268'435'456);
    for (auto v : values) {
        auto enc = encode_remaining_length(v);
        ASSERT_LE(enc.size(), 4u);
        ASSERT_EQ(enc.size(), remaining_length_size(static_cast<std::uint32_t>(v)));
        ASSERT_EQ(oracle_decode(enc), v);
        auto [n, used] = decode_remaining_length(enc);
        ASSERT_EQ(n, v);
        ASSERT_EQ(used, enc.size());
    }
}

TEST(RemainingLength, NonMinimalRejected) {
    EXPECT_THROW(decode_remaining_length(bytes{0x80, 0x00}), codec_error);
}

TEST(Codec, PingReqBytes) {
    EXPECT_EQ(encode_packet(pingreq_packet{}), (bytes{oracle_control(packet_type::pingreq), 0x00}));
    EXPECT_EQ(encode_packet(pingreq_packet{}), (bytes{0xC0, 0x00}));
    EXPECT_EQ(encode_packet(pingresp_packet{}), (bytes{0xD0, 0x00}));
    EXPECT_EQ(encode_packet(disconnect_packet{}), (bytes{0xE0, 0x00}));
}

TEST(Codec, ControlBytesMatchTable) {
    test_support::packet_generator gen(3);
    for (int i = 0; i < 2000; ++i) {
        auto p = gen.any();
        auto enc = encode_packet(p);
        if (type_of(p) == packet_type::publish) {
            const auto& pub = std::get<publish_packet>(p);
            EXPECT_EQ(enc[0] & 0xF0, 0x30);
            EXPECT_EQ((enc[0] >> 1) & 3, pub.qos);
        } else {
            EXPECT_EQ(enc[0], oracle_control(type_of(p)));
        }
    }
}

TEST(Codec, MinimalPublishOverheadIsTwoBytes) {
    publish_packet p;
    p.topic = "f/c/job_request";
    auto enc = encode_packet(p);
    EXPECT_EQ(enc.size() - (p.topic.size() + 2), 2u);
}

TEST(Codec, OversizedPublishRejected) {
    publish_packet p;
    p.topic = std::string(60'000, 't');
    p.payload = byte_buffer(bytes(268'435'400));
    try {
        encode_packet(p);
        FAIL();
    } catch (const codec_error& e) {
        EXPECT_EQ(e.code(), codec_errc::value_too_large);
    }
    EXPECT_THROW(encoded_size(p), codec_error);
}

TEST(Codec, ReservedTypeAndQos3) {
    EXPECT_EQ(decode_error({0xF0, 0x00}), codec_errc::malformed);
    EXPECT_EQ(decode_error({0x00, 0x00}), codec_errc::malformed);
    // publish with qos bits = 3
    EXPECT_EQ(decode_error({0x36, 0x05, 0x00, 0x01, 'a', 0x00, 0x01}), codec_errc::malformed);
}

TEST(Codec, MalformedBodies) {
    // reserved flag bits on PINGREQ
    EXPECT_EQ(decode_error({0xC1, 0x00}), codec_errc::malformed);
    // PUBREL without the mandatory 0x02 flags
    EXPECT_EQ(decode_error({0x60, 0x02, 0x00, 0x01}), codec_errc::malformed);
    // zero packet id
    EXPECT_EQ(decode_error({0x40, 0x02, 0x00, 0x00}), codec_errc::malformed);
    // invalid UTF-8 topic
    EXPECT_EQ(decode_error({0x30, 0x03, 0x00, 0x01, 0xFF}), codec_errc::malformed);
    // wildcard in publish topic
    EXPECT_EQ(decode_error({0x30, 0x03, 0x00, 0x01, '#'}), codec_errc::malformed);
    // subscribe with no filters
    EXPECT_EQ(decode_error({0x82, 0x02, 0x00, 0x01}), codec_errc::malformed);
    // field runs past the declared length
    EXPECT_EQ(decode_error({0x30, 0x02, 0x00, 0x05}), codec_errc::malformed);
}

TEST(Codec, WillAndUnknownPropertiesRejected) {
    connect_packet c;
    c.options.client_id = "a";
    auto enc = encode_packet(c);
    // flags byte sits after: ctrl, rl, 00 04 'MQTT', level
    const std::size_t flags_at = 2 + 6 + 1;
    auto with_will = enc;
    with_will[flags_at] |= 0x04;
    EXPECT_EQ(decode_error(with_will), codec_errc::malformed);
    auto bad_prop = enc;
    bad_prop[flags_at + 4] = 0x22; // topic alias maximum
    EXPECT_EQ(decode_error(bad_prop), codec_errc::malformed);
}

TEST(Codec, RoundTripAndPrefixesProperty) {
    test_support::packet_generator gen(1234);
    for (int i = 0; i < 5000; ++i) {
        auto p = gen.any();
        auto enc = encode_packet(p);
        ASSERT_EQ(enc.size(), encoded_size(p));
        auto [q, used] = decode_packet(enc);
        ASSERT_EQ(used, enc.size());
        ASSERT_TRUE(q == p) << "packet type " << static_cast<int>(type_of(p));
        for (std::size_t k = 0; k < enc.size(); ++k) {
            auto r = try_decode_packet(std::span<const std::uint8_t>(enc.data(), k));
            ASSERT_EQ(r.status, decode_status::incomplete) << "prefix " << k;
        }
    }
}

TEST(Codec, Level4ConnectCarriesDefaults) {
    connect_packet c;
    c.protocol_level = 4;
    c.options.client_id = "legacy";
    c.options.username = "u";
    c.options.secret = to_bytes("pw");
    auto [q, used] = decode_packet(encode_packet(c));
    const auto& d = std::get<connect_packet>(q);
    EXPECT_EQ(d.options.receive_maximum, 65535);
    EXPECT_EQ(d.options.max_packet_size, max_remaining_length);
    EXPECT_EQ(d, c);
}

TEST(StreamDecoder, SplitsConcatenatedStream) {
    test_support::packet_generator gen(99);
    std::vector<packet> sent;
    bytes stream;
    for (int i = 0; i < 200; ++i) {
        sent.push_back(gen.any());
        auto enc = encode_packet(sent.back());
        stream.insert(stream.end(), enc.begin(), enc.end());
    }
    stream_decoder dec;
    std::vector<packet> got;
    std::mt19937_64 rng(1);
    std::size_t pos = 0;
    while (pos < stream.size()) {
        std::size_t n = std::min<std::size_t>(1 + rng() % 37, stream.size() - pos);
        dec.feed(std::span<const std::uint8_t>(stream.data() + pos, n));
        pos += n;
        while (auto p = dec.next()) got.push_back(std::move(*p));
    }
    ASSERT_EQ(got.size(), sent.size());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_TRUE(got[i] == sent[i]);
    EXPECT_EQ(dec.buffered(), 0u);
}

TEST(StreamDecoder, RejectsPacketsOverLimit) {
    stream_decoder dec(16);
    publish_packet p;
    p.topic = "t";
    p.payload = byte_buffer(bytes(100));
    dec.feed(encode_packet(p));
    EXPECT_THROW(dec.next(), codec_error);
}

TEST(Codec, SharedDecodeSlicesPayload) {
    publish_packet p;
    p.qos = 1;
    p.packet_id = 9;
    p.topic = "a/b";
    p.payload = byte_buffer(to_bytes("hello"));
    auto storage = std::make_shared<const bytes>(encode_packet(p));
    auto r = try_decode_packet(storage);
    ASSERT_EQ(r.status, decode_status::ok);
    const auto& q = std::get<publish_packet>(*r.pkt);
    EXPECT_EQ(q, p);
    EXPECT_EQ(q.payload.span().data(), storage->data() + storage->size() - 5);
}
