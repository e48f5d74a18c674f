#ifndef FEDMQ_BYTES_HPP
#define FEDMQ_BYTES_HPP

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace fedmq {

using bytes = std::vector<std::uint8_t>;

inline bytes to_bytes(std::string_view s) { return bytes(s.begin(), s.end()); }

inline std::string to_string(std::span<const std::uint8_t> b) {
    return std::string(b.begin(), b.end());
}

/// Immutable, reference-counted view over a byte vector.
///
/// Copies share storage, so one publish payload fanned out to many sessions
/// is held once. Equality compares contents, not identity.
class byte_buffer {
public:
    byte_buffer() = default;

    explicit byte_buffer(bytes data)
        : data_(std::make_shared<const bytes>(std::move(data))), offset_(0), size_(data_->size()) {}

    byte_buffer(std::shared_ptr<const bytes> data, std::size_t offset, std::size_t size)
        : data_(std::move(data)), offset_(offset), size_(size) {
        if (size_ != 0 && (!data_ || offset_ + size_ > data_->size()))
            throw std::out_of_range("byte_buffer slice out of range");
    }

    std::span<const std::uint8_t> span() const noexcept {
        if (size_ == 0) return {};
        return {data_->data() + offset_, size_};
    }

    std::size_t size() const noexcept { return size_; }
    bool empty() const noexcept { return size_ == 0; }

    bytes to_vector() const {
        auto s = span();
        return bytes(s.begin(), s.end());
    }

    friend bool operator==(const byte_buffer& a, const byte_buffer& b) {
        auto x = a.span();
        auto y = b.span();
        return std::equal(x.begin(), x.end(), y.begin(), y.end());
    }

private:
    std::shared_ptr<const bytes> data_;
    std::size_t offset_ = 0;
    std::size_t size_ = 0;
};

/// Thrown by byte_reader when a read runs past the end of its input.
struct buffer_underflow : std::runtime_error {
    buffer_underflow() : std::runtime_error("buffer underflow") {}
};

/// Appends big-endian integers and raw bytes to a vector.
class byte_writer {
public:
    explicit byte_writer(bytes& out) : out_(out) {}

    void u8(std::uint8_t v) { out_.push_back(v); }

    void u16(std::uint16_t v) {
        out_.push_back(static_cast<std::uint8_t>(v >> 8));
        out_.push_back(static_cast<std::uint8_t>(v));
    }

    void u32(std::uint32_t v) {
        for (int shift = 24; shift >= 0; shift -= 8) out_.push_back(static_cast<std::uint8_t>(v >> shift));
    }

    void u64(std::uint64_t v) {
        for (int shift = 56; shift >= 0; shift -= 8) out_.push_back(static_cast<std::uint8_t>(v >> shift));
    }

    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

    void raw(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
    void raw(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }

private:
    bytes& out_;
};

/// Reads big-endian integers from a span; throws buffer_underflow on overrun.
class byte_reader {
public:
    explicit byte_reader(std::span<const std::uint8_t> in) : in_(in) {}

    std::size_t position() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return in_.size() - pos_; }
    bool at_end() const noexcept { return pos_ == in_.size(); }

    std::uint8_t u8() {
        need(1);
        return in_[pos_++];
    }

    std::uint16_t u16() {
        need(2);
        auto v = static_cast<std::uint16_t>((in_[pos_] << 8) | in_[pos_ + 1]);
        pos_ += 2;
        return v;
    }

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v = (v << 8) | in_[pos_ + i];
        pos_ += 4;
        return v;
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v = (v << 8) | in_[pos_ + i];
        pos_ += 8;
        return v;
    }

    double f64() { return std::bit_cast<double>(u64()); }

    std::span<const std::uint8_t> raw(std::size_t n) {
        need(n);
        auto s = in_.subspan(pos_, n);
        pos_ += n;
        return s;
    }

    std::string str(std::size_t n) { return to_string(raw(n)); }

private:
    void need(std::size_t n) const {
        if (n > remaining()) throw buffer_underflow{};
    }

    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
};

inline std::string to_hex(std::span<const std::uint8_t> b) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    out.reserve(b.size() * 2);
    for (auto c : b) {
        out.push_back(digits[c >> 4]);
        out.push_back(digits[c & 0x0f]);
    }
    return out;
}

inline bytes from_hex(std::string_view s) {
    auto nibble = [](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        if (c >= 'A' && c <= 'F') return c - 'A' + 10;
        return -1;
    };
    if (s.size() % 2 != 0) throw std::invalid_argument("odd-length hex string");
    bytes out(s.size() / 2);
    for (std::size_t i = 0; i < out.size(); ++i) {
        int hi = nibble(s[2 * i]);
        int lo = nibble(s[2 * i + 1]);
        if (hi < 0 || lo < 0) throw std::invalid_argument("invalid hex digit");
        out[i] = static_cast<std::uint8_t>((hi << 4) | lo);
    }
    return out;
}

/// Well-formed UTF-8 without U+0000 or surrogate code points, as MQTT
/// requires for strings on the wire.
inline bool is_mqtt_utf8(std::span<const std::uint8_t> s) {
    std::size_t i = 0;
    while (i < s.size()) {
        std::uint8_t c = s[i];
        if (c == 0) return false;
        if (c < 0x80) {
            ++i;
            continue;
        }
        std::size_t len;
        std::uint32_t cp;
        if ((c & 0xE0) == 0xC0) {
            len = 2;
            cp = c & 0x1F;
        } else if ((c & 0xF0) == 0xE0) {
            len = 3;
            cp = c & 0x0F;
        } else if ((c & 0xF8) == 0xF0) {
            len = 4;
            cp = c & 0x07;
        } else {
            return false;
        }
        if (i + len > s.size()) return false;
        for (std::size_t k = 1; k < len; ++k) {
            if ((s[i + k] & 0xC0) != 0x80) return false;
            cp = (cp << 6) | (s[i + k] & 0x3F);
        }
        static constexpr std::uint32_t min_for_len[] = {0, 0, 0x80, 0x800, 0x10000};
        if (cp < min_for_len[len] || cp > 0x10FFFF) return false;
        if (cp >= 0xD800 && cp <= 0xDFFF) return false;
        i += len;
    }
    return true;
}

inline bool is_mqtt_utf8(std::string_view s) {
    return is_mqtt_utf8(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

} // namespace fedmq

#endif // FEDMQ_BYTES_HPP
