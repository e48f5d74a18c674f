#ifndef FEDMQ_PAYLOAD_HPP
#define FEDMQ_PAYLOAD_HPP

// Data-plane envelope carried in every publish payload. Byte layout (all
// integers big-endian), documented with golden vectors in docs/wire-format.md:
//
//   magic "FLMQ" | version u8 | kind u8 | flags u8 |
//   fed u8-len+bytes | cep u8-len+bytes | client u8-len+bytes |
//   round u32 | model_version u32 | body u32-len+bytes
//
// flags bit0: body is zlib-compressed. Other bits must be zero.

#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "fedmq/bytes.hpp"
#include "fedmq/codec.hpp"
#include "fedmq/compress.hpp"
#include "fedmq/crypto.hpp"
#include "fedmq/errors.hpp"
#include "fedmq/topic.hpp"

namespace fedmq {

inline constexpr std::array<std::uint8_t, 4> envelope_magic = {'F', 'L', 'M', 'Q'};
inline constexpr std::uint8_t envelope_format_version = 1;
inline constexpr std::uint8_t envelope_flag_compressed = 0x01;

enum class envelope_kind : std::uint8_t {
    model_template = 1,
    global_model = 2,
    local_update = 3,
    model_list_request = 4,
    model_list_reply = 5,
    model_download_request = 6,
    model_download_reply = 7,
};

inline bool is_known_kind(std::uint8_t k) noexcept { return k >= 1 && k <= 7; }

struct envelope {
    envelope_kind kind = envelope_kind::model_template;
    bool compressed = false;
    std::string fed;
    std::string cep;
    std::string client; // empty where not applicable
    std::uint32_t round = 0;
    std::uint32_t model_version = 0;
    bytes body; // always the uncompressed body

    friend bool operator==(const envelope&, const envelope&) = default;
};

namespace detail {

inline void check_envelope_ids(const envelope& e) {
    if (!is_valid_identifier(e.fed) || !is_valid_identifier(e.cep) ||
        (!e.client.empty() && !is_valid_identifier(e.client)))
        throw payload_error(payload_errc::invalid_identifier, "envelope identifiers must be valid");
}

template <typename F>
auto reading(payload_errc on_short, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const buffer_underflow&) {
        throw payload_error(on_short, "input ends early");
    }
}

} // namespace detail

/// Bytes an envelope adds around its body.
inline std::size_t envelope_overhead(const envelope& e) noexcept {
    return 4 + 1 + 1 + 1 + 3 + e.fed.size() + e.cep.size() + e.client.size() + 4 + 4 + 4;
}

inline bytes encode_envelope(const envelope& e) {
    detail::check_envelope_ids(e);
    bytes wire_body = e.compressed ? zlib_compress(e.body) : e.body;
    if (wire_body.size() > max_remaining_length)
        throw payload_error(payload_errc::too_large, "envelope body exceeds the packet cap");
    bytes out;
    out.reserve(envelope_overhead(e) + wire_body.size());
    byte_writer w(out);
    w.raw(envelope_magic);
    w.u8(envelope_format_version);
    w.u8(static_cast<std::uint8_t>(e.kind));
    w.u8(e.compressed ? envelope_flag_compressed : 0);
    for (const auto* s : {&e.fed, &e.cep, &e.client}) {
        w.u8(static_cast<std::uint8_t>(s->size()));
        w.raw(*s);
    }
    w.u32(e.round);
    w.u32(e.model_version);
    w.u32(static_cast<std::uint32_t>(wire_body.size()));
    w.raw(wire_body);
    return out;
}

inline envelope decode_envelope(std::span<const std::uint8_t> in) {
    byte_reader r(in);
    envelope e;
    detail::reading(payload_errc::truncated_body, [&] {
        auto magic = r.raw(4);
        if (!std::equal(magic.begin(), magic.end(), envelope_magic.begin()))
            throw payload_error(payload_errc::bad_magic, "bad envelope magic");
        if (r.u8() != envelope_format_version)
            throw payload_error(payload_errc::unsupported_version, "unsupported envelope version");
        auto kind = r.u8();
        if (!is_known_kind(kind)) throw payload_error(payload_errc::unknown_kind, "unknown envelope kind");
        e.kind = static_cast<envelope_kind>(kind);
        auto flags = r.u8();
        if (flags & ~envelope_flag_compressed) throw payload_error(payload_errc::unknown_flags, "unknown envelope flags");
        e.compressed = flags & envelope_flag_compressed;
        for (auto* s : {&e.fed, &e.cep, &e.client}) *s = r.str(r.u8());
        e.round = r.u32();
        e.model_version = r.u32();
        auto len = r.u32();
        auto body = r.raw(len);
        if (!r.at_end()) throw payload_error(payload_errc::truncated_body, "bytes after envelope body");
        e.body = e.compressed ? zlib_decompress(body, max_remaining_length) : bytes(body.begin(), body.end());
        return 0;
    });
    detail::check_envelope_ids(e);
    return e;
}

// ---------------------------------------------------------------------------
// Parameter sets

struct layout_entry {
    std::string name;
    std::uint32_t length = 0;

    friend bool operator==(const layout_entry&, const layout_entry&) = default;
};

/// Flat model parameters plus the sample count that weights them.
struct parameter_set {
    std::vector<layout_entry> layout;
    std::vector<double> values;
    std::uint64_t num_samples = 0;

    std::size_t layout_total() const {
        return std::accumulate(layout.begin(), layout.end(), std::size_t{0},
                               [](std::size_t acc, const layout_entry& l) { return acc + l.length; });
    }

    friend bool operator==(const parameter_set&, const parameter_set&) = default;
};

inline bytes encode_parameters(const parameter_set& p) {
    if (p.layout_total() != p.values.size())
        throw payload_error(payload_errc::layout_mismatch, "layout does not describe the value vector");
    for (double v : p.values)
        if (!std::isfinite(v)) throw payload_error(payload_errc::non_finite_value, "non-finite parameter");
    bytes out;
    out.reserve(16 + p.layout.size() * 16 + p.values.size() * 8);
    byte_writer w(out);
    w.u32(static_cast<std::uint32_t>(p.layout.size()));
    for (const auto& l : p.layout) {
        if (l.name.size() > 0xFFFF) throw payload_error(payload_errc::layout_mismatch, "layout name too long");
        w.u16(static_cast<std::uint16_t>(l.name.size()));
        w.raw(l.name);
        w.u32(l.length);
    }
    w.u64(p.num_samples);
    w.u32(static_cast<std::uint32_t>(p.values.size()));
    for (double v : p.values) w.f64(v);
    return out;
}

inline parameter_set decode_parameters(std::span<const std::uint8_t> in) {
    byte_reader r(in);
    parameter_set p;
    detail::reading(payload_errc::layout_mismatch, [&] {
        auto entries = r.u32();
        for (std::uint32_t i = 0; i < entries; ++i) {
            layout_entry l;
            l.name = r.str(r.u16());
            l.length = r.u32();
            p.layout.push_back(std::move(l));
        }
        p.num_samples = r.u64();
        auto count = r.u32();
        if (count != p.layout_total())
            throw payload_error(payload_errc::layout_mismatch, "layout total differs from value count");
        if (r.remaining() != std::size_t{count} * 8)
            throw payload_error(payload_errc::layout_mismatch, "value array length differs from declared count");
        p.values.resize(count);
        for (auto& v : p.values) {
            v = r.f64();
            if (!std::isfinite(v)) throw payload_error(payload_errc::non_finite_value, "non-finite parameter");
        }
        return 0;
    });
    return p;
}

// ---------------------------------------------------------------------------
// Model channel bodies

/// Status byte leading every ModelListReply / ModelDownloadReply body.
enum class reply_status : std::uint8_t {
    ok = 0,
    unknown_version = 1,
    malformed_request = 2,
    too_large = 3,
    integrity_failure = 4,
    internal_error = 5,
};

struct model_list_entry {
    std::uint32_t model_version = 0;
    std::uint32_t round = 0;
    std::uint64_t created_at = 0;
    std::vector<std::string> contributors;
    digest256 digest{};

    friend bool operator==(const model_list_entry&, const model_list_entry&) = default;
};

struct model_list_reply {
    reply_status status = reply_status::ok;
    std::vector<model_list_entry> entries;

    friend bool operator==(const model_list_reply&, const model_list_reply&) = default;
};

struct model_download_reply {
    reply_status status = reply_status::ok;
    bytes model; // encoded parameter_set, exactly as stored

    friend bool operator==(const model_download_reply&, const model_download_reply&) = default;
};

inline bytes encode_model_list_reply(const model_list_reply& m) {
    bytes out;
    byte_writer w(out);
    w.u8(static_cast<std::uint8_t>(m.status));
    w.u32(static_cast<std::uint32_t>(m.entries.size()));
    for (const auto& e : m.entries) {
        w.u32(e.model_version);
        w.u32(e.round);
        w.u64(e.created_at);
        w.u16(static_cast<std::uint16_t>(e.contributors.size()));
        for (const auto& c : e.contributors) {
            w.u8(static_cast<std::uint8_t>(c.size()));
            w.raw(c);
        }
        w.raw(e.digest);
    }
    return out;
}

inline model_list_reply decode_model_list_reply(std::span<const std::uint8_t> in) {
    byte_reader r(in);
    model_list_reply m;
    detail::reading(payload_errc::truncated_body, [&] {
        m.status = static_cast<reply_status>(r.u8());
        auto n = r.u32();
        for (std::uint32_t i = 0; i < n; ++i) {
            model_list_entry e;
            e.model_version = r.u32();
            e.round = r.u32();
            e.created_at = r.u64();
            auto k = r.u16();
            for (std::uint16_t j = 0; j < k; ++j) e.contributors.push_back(r.str(r.u8()));
            auto d = r.raw(32);
            std::copy(d.begin(), d.end(), e.digest.begin());
            m.entries.push_back(std::move(e));
        }
        if (!r.at_end()) throw payload_error(payload_errc::truncated_body, "bytes after model list");
        return 0;
    });
    return m;
}

inline bytes encode_download_request(std::uint32_t version) {
    bytes out;
    byte_writer(out).u32(version);
    return out;
}

/// Throws payload_error{truncated_body} unless the body is exactly 4 bytes.
inline std::uint32_t decode_download_request(std::span<const std::uint8_t> in) {
    if (in.size() != 4) throw payload_error(payload_errc::truncated_body, "download request body must be 4 bytes");
    return byte_reader(in).u32();
}

inline bytes encode_download_reply(const model_download_reply& d) {
    bytes out;
    out.reserve(1 + d.model.size());
    out.push_back(static_cast<std::uint8_t>(d.status));
    out.insert(out.end(), d.model.begin(), d.model.end());
    return out;
}

inline model_download_reply decode_download_reply(std::span<const std::uint8_t> in) {
    if (in.empty()) throw payload_error(payload_errc::truncated_body, "empty download reply");
    return {static_cast<reply_status>(in[0]), bytes(in.begin() + 1, in.end())};
}

} // namespace fedmq

#endif // FEDMQ_PAYLOAD_HPP
