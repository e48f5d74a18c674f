#ifndef FEDMQ_CODEC_HPP
#define FEDMQ_CODEC_HPP

// Encoder/decoder for the MQTT subset spoken by the platform: 3.1.1 framing,
// CONNECT optionally at protocol level 5 with exactly two properties (Receive
// Maximum, Maximum Packet Size), and reason codes on CONNACK/SUBACK/UNSUBACK.
// Will messages and AUTH are refused as malformed.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "fedmq/bytes.hpp"
#include "fedmq/errors.hpp"

namespace fedmq {

inline constexpr std::uint32_t max_remaining_length = 268'435'455;

enum class packet_type : std::uint8_t {
    connect = 1,
    connack = 2,
    publish = 3,
    puback = 4,
    pubrec = 5,
    pubrel = 6,
    pubcomp = 7,
    subscribe = 8,
    suback = 9,
    unsubscribe = 10,
    unsuback = 11,
    pingreq = 12,
    pingresp = 13,
    disconnect = 14,
};

namespace reason {
inline constexpr std::uint8_t success = 0x00;
inline constexpr std::uint8_t granted_qos0 = 0x00;
inline constexpr std::uint8_t no_subscription_existed = 0x11;
inline constexpr std::uint8_t unspecified_error = 0x80;
inline constexpr std::uint8_t protocol_error = 0x82;
inline constexpr std::uint8_t client_identifier_not_valid = 0x85;
inline constexpr std::uint8_t bad_user_name_or_password = 0x86;
inline constexpr std::uint8_t not_authorized = 0x87;
inline constexpr std::uint8_t banned = 0x8A;
inline constexpr std::uint8_t session_taken_over = 0x8E;
inline constexpr std::uint8_t topic_filter_invalid = 0x8F;
inline constexpr std::uint8_t packet_identifier_not_found = 0x92;
inline constexpr std::uint8_t packet_too_large = 0x95;
inline constexpr std::uint8_t unsupported_protocol_version = 0x84;
} // namespace reason

struct connect_options {
    std::string client_id;
    std::optional<std::string> username;
    std::optional<bytes> secret;
    std::uint16_t keep_alive = 60;
    std::uint16_t receive_maximum = 65535;
    std::uint32_t max_packet_size = max_remaining_length;

    friend bool operator==(const connect_options&, const connect_options&) = default;
};

struct connect_packet {
    /// 4 = MQTT 3.1.1 (flow-control knobs take their defaults), 5 = with properties.
    std::uint8_t protocol_level = 5;
    bool clean_session = true;
    connect_options options;

    friend bool operator==(const connect_packet&, const connect_packet&) = default;
};

struct connack_packet {
    bool session_present = false;
    std::uint8_t reason_code = reason::success;

    friend bool operator==(const connack_packet&, const connack_packet&) = default;
};

struct publish_packet {
    bool dup = false;
    std::uint8_t qos = 0;
    bool retain = false;
    std::string topic;
    std::optional<std::uint16_t> packet_id;
    byte_buffer payload;

    friend bool operator==(const publish_packet&, const publish_packet&) = default;
};

/// PUBACK, PUBREC, PUBREL and PUBCOMP share one shape.
template <packet_type Type>
struct ack_packet {
    static constexpr packet_type type = Type;
    std::uint16_t packet_id = 1;

    friend bool operator==(const ack_packet&, const ack_packet&) = default;
};

using puback_packet = ack_packet<packet_type::puback>;
using pubrec_packet = ack_packet<packet_type::pubrec>;
using pubrel_packet = ack_packet<packet_type::pubrel>;
using pubcomp_packet = ack_packet<packet_type::pubcomp>;

struct subscription_request {
    std::string filter;
    std::uint8_t qos = 0;

    friend bool operator==(const subscription_request&, const subscription_request&) = default;
};

struct subscribe_packet {
    std::uint16_t packet_id = 1;
    std::vector<subscription_request> filters;

    friend bool operator==(const subscribe_packet&, const subscribe_packet&) = default;
};

struct suback_packet {
    std::uint16_t packet_id = 1;
    std::vector<std::uint8_t> reason_codes;

    friend bool operator==(const suback_packet&, const suback_packet&) = default;
};

struct unsubscribe_packet {
    std::uint16_t packet_id = 1;
    std::vector<std::string> filters;

    friend bool operator==(const unsubscribe_packet&, const unsubscribe_packet&) = default;
};

/// Reason codes are omitted on the wire when empty (3.1.1 shape).
struct unsuback_packet {
    std::uint16_t packet_id = 1;
    std::vector<std::uint8_t> reason_codes;

    friend bool operator==(const unsuback_packet&, const unsuback_packet&) = default;
};

template <packet_type Type>
struct empty_packet {
    static constexpr packet_type type = Type;
    friend bool operator==(const empty_packet&, const empty_packet&) = default;
};

using pingreq_packet = empty_packet<packet_type::pingreq>;
using pingresp_packet = empty_packet<packet_type::pingresp>;

struct disconnect_packet {
    std::optional<std::uint8_t> reason_code;

    friend bool operator==(const disconnect_packet&, const disconnect_packet&) = default;
};

using packet = std::variant<connect_packet, connack_packet, publish_packet, puback_packet, pubrec_packet,
                            pubrel_packet, pubcomp_packet, subscribe_packet, suback_packet, unsubscribe_packet,
                            unsuback_packet, pingreq_packet, pingresp_packet, disconnect_packet>;

inline packet_type type_of(const packet& p) noexcept {
    // variant alternatives are declared in control-type order
    return static_cast<packet_type>(p.index() + 1);
}

// ---------------------------------------------------------------------------
// Remaining Length varint

inline std::size_t remaining_length_size(std::uint32_t n) noexcept {
    if (n < 128) return 1;
    if (n < 16'384) return 2;
    if (n < 2'097'152) return 3;
    return 4;
}

inline void append_remaining_length(bytes& out, std::uint64_t n) {
    if (n > max_remaining_length)
        throw codec_error(codec_errc::value_too_large, "remaining length " + std::to_string(n) + " exceeds cap");
    do {
        auto digit = static_cast<std::uint8_t>(n % 128);
        n /= 128;
        if (n > 0) digit |= 0x80;
        out.push_back(digit);
    } while (n > 0);
}

inline bytes encode_remaining_length(std::uint64_t n) {
    bytes out;
    append_remaining_length(out, n);
    return out;
}

enum class decode_status { ok, incomplete, malformed };

struct varint_result {
    decode_status status = decode_status::incomplete;
    std::uint32_t value = 0;
    std::size_t consumed = 0;
};

inline varint_result try_decode_remaining_length(std::span<const std::uint8_t> in) noexcept {
    std::uint32_t value = 0;
    std::uint32_t multiplier = 1;
    for (std::size_t i = 0; i < 4; ++i) {
        if (i >= in.size()) return {decode_status::incomplete, 0, 0};
        std::uint8_t b = in[i];
        value += (b & 0x7Fu) * multiplier;
        if ((b & 0x80) == 0) {
            // non-minimal encodings (e.g. 0x80 0x00) are rejected
            if (i > 0 && b == 0) return {decode_status::malformed, 0, 0};
            return {decode_status::ok, value, i + 1};
        }
        multiplier *= 128;
    }
    return {decode_status::malformed, 0, 0};
}

/// Throws codec_error{incomplete|malformed}.
inline std::pair<std::uint32_t, std::size_t> decode_remaining_length(std::span<const std::uint8_t> in) {
    auto r = try_decode_remaining_length(in);
    if (r.status == decode_status::incomplete)
        throw codec_error(codec_errc::incomplete, "remaining length needs more bytes");
    if (r.status == decode_status::malformed) throw codec_error(codec_errc::malformed, "malformed remaining length");
    return {r.value, r.consumed};
}

// ---------------------------------------------------------------------------
// Encoding

namespace detail {

inline void put_string(byte_writer& w, std::string_view s) {
    if (s.size() > 0xFFFF) throw codec_error(codec_errc::value_too_large, "string longer than 65535 bytes");
    w.u16(static_cast<std::uint16_t>(s.size()));
    w.raw(s);
}

inline void put_binary(byte_writer& w, std::span<const std::uint8_t> s) {
    if (s.size() > 0xFFFF) throw codec_error(codec_errc::value_too_large, "binary field longer than 65535 bytes");
    w.u16(static_cast<std::uint16_t>(s.size()));
    w.raw(s);
}

inline std::uint8_t control_byte(const packet& p) {
    auto t = static_cast<std::uint8_t>(type_of(p)) << 4;
    if (auto* pub = std::get_if<publish_packet>(&p)) {
        return static_cast<std::uint8_t>(t | (pub->dup ? 0x08 : 0) | (pub->qos << 1) | (pub->retain ? 0x01 : 0));
    }
    switch (type_of(p)) {
    case packet_type::pubrel:
    case packet_type::subscribe:
    case packet_type::unsubscribe: return static_cast<std::uint8_t>(t | 0x02);
    default: return static_cast<std::uint8_t>(t);
    }
}

inline void check_packet_id(std::uint16_t id) {
    if (id == 0) throw codec_error(codec_errc::malformed, "packet identifier must be non-zero");
}

/// Variable header + payload, excluding a publish's application payload.
inline bytes encode_body(const packet& p) {
    bytes body;
    byte_writer w(body);
    std::visit(
        [&](const auto& pk) {
            using T = std::decay_t<decltype(pk)>;
            if constexpr (std::is_same_v<T, connect_packet>) {
                const auto& o = pk.options;
                if (pk.protocol_level != 4 && pk.protocol_level != 5)
                    throw codec_error(codec_errc::malformed, "unsupported protocol level");
                put_string(w, "MQTT");
                w.u8(pk.protocol_level);
                std::uint8_t flags = 0;
                if (o.username) flags |= 0x80;
                if (o.secret) flags |= 0x40;
                if (pk.clean_session) flags |= 0x02;
                w.u8(flags);
                w.u16(o.keep_alive);
                if (pk.protocol_level == 5) {
                    if (o.receive_maximum == 0) throw codec_error(codec_errc::malformed, "receive maximum must be >= 1");
                    if (o.max_packet_size == 0 || o.max_packet_size > max_remaining_length)
                        throw codec_error(codec_errc::malformed, "maximum packet size out of range");
                    w.u8(8); // property length: 1+2 + 1+4
                    w.u8(0x21);
                    w.u16(o.receive_maximum);
                    w.u8(0x27);
                    w.u32(o.max_packet_size);
                }
                put_string(w, o.client_id);
                if (o.username) put_string(w, *o.username);
                if (o.secret) put_binary(w, *o.secret);
            } else if constexpr (std::is_same_v<T, connack_packet>) {
                w.u8(pk.session_present ? 1 : 0);
                w.u8(pk.reason_code);
            } else if constexpr (std::is_same_v<T, publish_packet>) {
                if (pk.qos > 2) throw codec_error(codec_errc::malformed, "qos must be 0, 1 or 2");
                if ((pk.qos > 0) != pk.packet_id.has_value())
                    throw codec_error(codec_errc::malformed, "packet identifier presence must follow qos");
                if (pk.qos == 0 && pk.dup) throw codec_error(codec_errc::malformed, "dup set on qos 0 publish");
                put_string(w, pk.topic);
                if (pk.packet_id) {
                    check_packet_id(*pk.packet_id);
                    w.u16(*pk.packet_id);
                }
            } else if constexpr (std::is_same_v<T, puback_packet> || std::is_same_v<T, pubrec_packet> ||
                                 std::is_same_v<T, pubrel_packet> || std::is_same_v<T, pubcomp_packet>) {
                check_packet_id(pk.packet_id);
                w.u16(pk.packet_id);
            } else if constexpr (std::is_same_v<T, subscribe_packet>) {
                check_packet_id(pk.packet_id);
                if (pk.filters.empty()) throw codec_error(codec_errc::malformed, "subscribe without filters");
                w.u16(pk.packet_id);
                for (const auto& f : pk.filters) {
                    if (f.qos > 2) throw codec_error(codec_errc::malformed, "qos must be 0, 1 or 2");
                    put_string(w, f.filter);
                    w.u8(f.qos);
                }
            } else if constexpr (std::is_same_v<T, suback_packet>) {
                check_packet_id(pk.packet_id);
                if (pk.reason_codes.empty()) throw codec_error(codec_errc::malformed, "suback without reason codes");
                w.u16(pk.packet_id);
                for (auto c : pk.reason_codes) w.u8(c);
            } else if constexpr (std::is_same_v<T, unsubscribe_packet>) {
                check_packet_id(pk.packet_id);
                if (pk.filters.empty()) throw codec_error(codec_errc::malformed, "unsubscribe without filters");
                w.u16(pk.packet_id);
                for (const auto& f : pk.filters) put_string(w, f);
            } else if constexpr (std::is_same_v<T, unsuback_packet>) {
                check_packet_id(pk.packet_id);
                w.u16(pk.packet_id);
                for (auto c : pk.reason_codes) w.u8(c);
            } else if constexpr (std::is_same_v<T, disconnect_packet>) {
                if (pk.reason_code) w.u8(*pk.reason_code);
            }
        },
        p);
    return body;
}

} // namespace detail

/// Bytes on the wire for `p`. Throws codec_error{value_too_large} when the
/// Remaining Length would exceed 268,435,455 and {malformed} when `p`
/// violates a packet invariant.
inline std::size_t encoded_size(const packet& p) {
    auto body = detail::encode_body(p);
    std::uint64_t rl = body.size();
    if (auto* pub = std::get_if<publish_packet>(&p)) rl += pub->payload.size();
    if (rl > max_remaining_length)
        throw codec_error(codec_errc::value_too_large, "remaining length " + std::to_string(rl) + " exceeds cap");
    return 1 + remaining_length_size(static_cast<std::uint32_t>(rl)) + static_cast<std::size_t>(rl);
}

inline bytes encode_packet(const packet& p) {
    auto body = detail::encode_body(p);
    const publish_packet* pub = std::get_if<publish_packet>(&p);
    std::uint64_t rl = body.size() + (pub ? pub->payload.size() : 0);
    bytes out;
    out.reserve(static_cast<std::size_t>(1 + 4 + rl));
    out.push_back(detail::control_byte(p));
    append_remaining_length(out, rl);
    out.insert(out.end(), body.begin(), body.end());
    if (pub) {
        auto s = pub->payload.span();
        out.insert(out.end(), s.begin(), s.end());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Decoding

struct decode_result {
    decode_status status = decode_status::incomplete;
    std::optional<packet> pkt;
    std::size_t consumed = 0;
    std::string error;
};

namespace detail {

struct malformed : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::string get_utf8(byte_reader& r) {
    auto len = r.u16();
    auto raw = r.raw(len);
    if (!is_mqtt_utf8(raw)) throw malformed("invalid UTF-8 string");
    return to_string(raw);
}

inline std::uint16_t get_packet_id(byte_reader& r) {
    auto id = r.u16();
    if (id == 0) throw malformed("zero packet identifier");
    return id;
}

inline std::uint32_t read_varint(byte_reader& r) {
    std::uint32_t value = 0;
    std::uint32_t multiplier = 1;
    for (int i = 0; i < 4; ++i) {
        std::uint8_t b = r.u8();
        value += (b & 0x7Fu) * multiplier;
        if ((b & 0x80) == 0) {
            if (i > 0 && b == 0) throw malformed("non-minimal varint");
            return value;
        }
        multiplier *= 128;
    }
    throw malformed("varint longer than 4 bytes");
}

inline bool has_wildcard(std::string_view s) { return s.find_first_of("+#") != std::string_view::npos; }

inline connect_packet decode_connect(byte_reader& r) {
    connect_packet c;
    if (r.u16() != 4 || r.str(4) != "MQTT") throw malformed("bad protocol name");
    c.protocol_level = r.u8();
    if (c.protocol_level != 4 && c.protocol_level != 5) throw malformed("unsupported protocol level");
    std::uint8_t flags = r.u8();
    if (flags & 0x01) throw malformed("reserved connect flag set");
    if (flags & 0x04) throw malformed("will messages are not supported");
    if (flags & 0x38) throw malformed("will qos/retain without will");
    c.clean_session = (flags & 0x02) != 0;
    bool has_user = flags & 0x80;
    bool has_pass = flags & 0x40;
    if (c.protocol_level == 4 && has_pass && !has_user) throw malformed("password without username");
    c.options.keep_alive = r.u16();
    if (c.protocol_level == 5) {
        std::uint32_t plen = read_varint(r);
        if (plen > r.remaining()) throw malformed("property block overruns packet");
        byte_reader props(r.raw(plen));
        bool seen_rm = false, seen_mps = false;
        while (!props.at_end()) {
            switch (props.u8()) {
            case 0x21:
                if (seen_rm) throw malformed("duplicate receive maximum");
                seen_rm = true;
                c.options.receive_maximum = props.u16();
                if (c.options.receive_maximum == 0) throw malformed("receive maximum of zero");
                break;
            case 0x27:
                if (seen_mps) throw malformed("duplicate maximum packet size");
                seen_mps = true;
                c.options.max_packet_size = props.u32();
                if (c.options.max_packet_size == 0 || c.options.max_packet_size > max_remaining_length)
                    throw malformed("maximum packet size out of range");
                break;
            default: throw malformed("unsupported connect property");
            }
        }
    }
    c.options.client_id = get_utf8(r);
    if (has_user) c.options.username = get_utf8(r);
    if (has_pass) {
        auto len = r.u16();
        auto raw = r.raw(len);
        c.options.secret = bytes(raw.begin(), raw.end());
    }
    return c;
}

} // namespace detail

namespace detail {

template <typename MakePayload>
decode_result decode_impl(std::span<const std::uint8_t> in, MakePayload&& make_payload) {
    decode_result res;
    if (in.empty()) return res;
    auto rl = try_decode_remaining_length(in.subspan(1));
    if (rl.status == decode_status::incomplete) return res;
    if (rl.status == decode_status::malformed) {
        res.status = decode_status::malformed;
        res.error = "malformed remaining length";
        return res;
    }
    const std::size_t header = 1 + rl.consumed;
    const std::size_t total = header + rl.value;
    // a control byte alone can be judged before the body arrives
    const std::uint8_t ctrl = in[0];
    const std::uint8_t type = ctrl >> 4;
    const std::uint8_t flags = ctrl & 0x0F;
    auto fail = [&](std::string why) {
        decode_result bad;
        bad.status = decode_status::malformed;
        bad.error = std::move(why);
        return bad;
    };
    if (type == 0 || type == 15) return fail("reserved packet type");
    if (type == static_cast<std::uint8_t>(packet_type::publish)) {
        if (((flags >> 1) & 0x03) == 3) return fail("publish qos 3");
    } else {
        const bool wants_two = type == 6 || type == 8 || type == 10;
        if (flags != (wants_two ? 0x02 : 0x00)) return fail("reserved fixed-header flags");
    }
    if (in.size() < total) return res;

    byte_reader r(in.subspan(header, rl.value));
    try {
        packet p;
        switch (static_cast<packet_type>(type)) {
        case packet_type::connect: p = decode_connect(r); break;
        case packet_type::connack: {
            connack_packet c;
            auto ack_flags = r.u8();
            if (ack_flags & 0xFE) throw malformed("reserved connack flags");
            c.session_present = ack_flags & 0x01;
            c.reason_code = r.u8();
            p = c;
            break;
        }
        case packet_type::publish: {
            publish_packet pub;
            pub.dup = flags & 0x08;
            pub.qos = (flags >> 1) & 0x03;
            pub.retain = flags & 0x01;
            if (pub.qos == 0 && pub.dup) throw malformed("dup set on qos 0 publish");
            pub.topic = get_utf8(r);
            if (pub.topic.empty() || has_wildcard(pub.topic)) throw malformed("publish topic must be literal");
            if (pub.qos > 0) pub.packet_id = get_packet_id(r);
            pub.payload = make_payload(header + r.position(), r.remaining());
            r.raw(r.remaining());
            p = std::move(pub);
            break;
        }
        case packet_type::puback: p = puback_packet{get_packet_id(r)}; break;
        case packet_type::pubrec: p = pubrec_packet{get_packet_id(r)}; break;
        case packet_type::pubrel: p = pubrel_packet{get_packet_id(r)}; break;
        case packet_type::pubcomp: p = pubcomp_packet{get_packet_id(r)}; break;
        case packet_type::subscribe: {
            subscribe_packet s;
            s.packet_id = get_packet_id(r);
            while (!r.at_end()) {
                subscription_request req;
                req.filter = get_utf8(r);
                auto opts = r.u8();
                if (opts & 0xFC) throw malformed("reserved subscription option bits");
                req.qos = opts & 0x03;
                if (req.qos == 3) throw malformed("subscription qos 3");
                s.filters.push_back(std::move(req));
            }
            if (s.filters.empty()) throw malformed("subscribe without filters");
            p = std::move(s);
            break;
        }
        case packet_type::suback: {
            suback_packet s;
            s.packet_id = get_packet_id(r);
            while (!r.at_end()) s.reason_codes.push_back(r.u8());
            if (s.reason_codes.empty()) throw malformed("suback without reason codes");
            p = std::move(s);
            break;
        }
        case packet_type::unsubscribe: {
            unsubscribe_packet u;
            u.packet_id = get_packet_id(r);
            while (!r.at_end()) u.filters.push_back(get_utf8(r));
            if (u.filters.empty()) throw malformed("unsubscribe without filters");
            p = std::move(u);
            break;
        }
        case packet_type::unsuback: {
            unsuback_packet u;
            u.packet_id = get_packet_id(r);
            while (!r.at_end()) u.reason_codes.push_back(r.u8());
            p = std::move(u);
            break;
        }
        case packet_type::pingreq: p = pingreq_packet{}; break;
        case packet_type::pingresp: p = pingresp_packet{}; break;
        case packet_type::disconnect: {
            disconnect_packet d;
            if (!r.at_end()) d.reason_code = r.u8();
            p = d;
            break;
        }
        }
        if (!r.at_end()) throw malformed("trailing bytes in packet");
        res.status = decode_status::ok;
        res.pkt = std::move(p);
        res.consumed = total;
        return res;
    } catch (const malformed& e) {
        return fail(e.what());
    } catch (const buffer_underflow&) {
        // the frame is complete, so running short inside it is a framing lie
        return fail("packet body shorter than its fields");
    }
}

} // namespace detail

/// Decodes one packet from the front of `in`, copying any publish payload.
/// Never throws on bad input; status distinguishes incomplete from malformed.
inline decode_result try_decode_packet(std::span<const std::uint8_t> in) {
    return detail::decode_impl(in, [&](std::size_t off, std::size_t len) {
        auto s = in.subspan(off, len);
        return byte_buffer(bytes(s.begin(), s.end()));
    });
}

/// As above, but a publish payload is a slice of `storage` rather than a copy.
inline decode_result try_decode_packet(const std::shared_ptr<const bytes>& storage) {
    return detail::decode_impl(std::span<const std::uint8_t>(*storage), [&](std::size_t off, std::size_t len) {
        return byte_buffer(storage, off, len);
    });
}

/// Throwing form: codec_error{incomplete} or codec_error{malformed}.
inline std::pair<packet, std::size_t> decode_packet(std::span<const std::uint8_t> in) {
    auto r = try_decode_packet(in);
    if (r.status == decode_status::incomplete) throw codec_error(codec_errc::incomplete, "need more bytes");
    if (r.status == decode_status::malformed) throw codec_error(codec_errc::malformed, r.error);
    return {std::move(*r.pkt), r.consumed};
}

/// Incremental decoder for a byte stream. Owned by one connection reader.
class stream_decoder {
public:
    explicit stream_decoder(std::size_t max_packet = 1 + 4 + max_remaining_length) : max_packet_(max_packet) {}

    void feed(std::span<const std::uint8_t> chunk) { buf_.insert(buf_.end(), chunk.begin(), chunk.end()); }

    /// Next complete packet, std::nullopt when more bytes are needed.
    /// Throws codec_error{malformed} on a protocol violation; the stream is
    /// unusable afterwards.
    std::optional<packet> next() {
        auto avail = std::span<const std::uint8_t>(buf_).subspan(start_);
        if (avail.empty()) return std::nullopt;
        if (avail.size() >= 2) {
            auto rl = try_decode_remaining_length(avail.subspan(1));
            if (rl.status == decode_status::ok && 1 + rl.consumed + rl.value > max_packet_)
                throw codec_error(codec_errc::malformed, "packet exceeds maximum packet size");
        }
        auto r = try_decode_packet(avail);
        if (r.status == decode_status::incomplete) {
            compact();
            return std::nullopt;
        }
        if (r.status == decode_status::malformed) throw codec_error(codec_errc::malformed, r.error);
        start_ += r.consumed;
        if (start_ == buf_.size()) {
            buf_.clear();
            start_ = 0;
        }
        return std::move(r.pkt);
    }

    std::size_t buffered() const noexcept { return buf_.size() - start_; }

private:
    void compact() {
        if (start_ > 0) {
            buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(start_));
            start_ = 0;
        }
    }

    bytes buf_;
    std::size_t start_ = 0;
    std::size_t max_packet_;
};

} // namespace fedmq

#endif // FEDMQ_CODEC_HPP
