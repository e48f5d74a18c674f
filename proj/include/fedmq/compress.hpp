#ifndef FEDMQ_COMPRESS_HPP
#define FEDMQ_COMPRESS_HPP

// zlib stream format (RFC 1950 wrapper around DEFLATE, RFC 1951).

#include <span>

#include <zlib.h>

#include "fedmq/bytes.hpp"
#include "fedmq/errors.hpp"

namespace fedmq {

inline bytes zlib_compress(std::span<const std::uint8_t> in, int level = Z_BEST_COMPRESSION) {
    uLongf bound = compressBound(static_cast<uLong>(in.size()));
    bytes out(bound);
    if (compress2(out.data(), &bound, in.data(), static_cast<uLong>(in.size()), level) != Z_OK)
        throw payload_error(payload_errc::decompression_failure, "zlib compression failed");
    out.resize(bound);
    return out;
}

/// Inflates at most `limit` bytes; anything larger is rejected rather than
/// allocated.
inline bytes zlib_decompress(std::span<const std::uint8_t> in, std::size_t limit) {
    z_stream zs{};
    if (inflateInit(&zs) != Z_OK) throw payload_error(payload_errc::decompression_failure, "inflateInit failed");
    zs.next_in = const_cast<Bytef*>(in.data());
    zs.avail_in = static_cast<uInt>(in.size());
    bytes out;
    std::uint8_t chunk[16384];
    int rc = Z_OK;
    while (rc != Z_STREAM_END) {
        zs.next_out = chunk;
        zs.avail_out = sizeof(chunk);
        rc = inflate(&zs, Z_NO_FLUSH);
        if (rc != Z_OK && rc != Z_STREAM_END) {
            inflateEnd(&zs);
            throw payload_error(payload_errc::decompression_failure, "corrupt zlib stream");
        }
        std::size_t produced = sizeof(chunk) - zs.avail_out;
        if (out.size() + produced > limit) {
            inflateEnd(&zs);
            throw payload_error(payload_errc::decompression_failure, "decompressed body exceeds limit");
        }
        out.insert(out.end(), chunk, chunk + produced);
        if (rc == Z_OK && produced == 0 && zs.avail_in == 0) {
            inflateEnd(&zs);
            throw payload_error(payload_errc::decompression_failure, "truncated zlib stream");
        }
    }
    bool trailing = zs.avail_in != 0;
    inflateEnd(&zs);
    if (trailing) throw payload_error(payload_errc::decompression_failure, "bytes after zlib stream");
    return out;
}

} // namespace fedmq

#endif // FEDMQ_COMPRESS_HPP
