#ifndef FEDMQ_CRYPTO_HPP
#define FEDMQ_CRYPTO_HPP

// Thin wrappers over OpenSSL: SHA-256 content digests, PBKDF2-HMAC-SHA256
// secret hashing and a CSPRNG.

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string_view>

#include <openssl/crypto.h>
#include <openssl/evp.h>
#include <openssl/rand.h>

#include "fedmq/bytes.hpp"

namespace fedmq {

using digest256 = std::array<std::uint8_t, 32>;

inline digest256 sha256(std::span<const std::uint8_t> data) {
    digest256 out{};
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 || len != out.size())
        throw std::runtime_error("SHA-256 failed");
    return out;
}

inline digest256 sha256(std::string_view s) {
    return sha256(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

inline constexpr int default_kdf_iterations = 20'000;

inline bytes pbkdf2_sha256(std::span<const std::uint8_t> secret, std::span<const std::uint8_t> salt,
                           int iterations = default_kdf_iterations) {
    bytes out(32);
    if (PKCS5_PBKDF2_HMAC(reinterpret_cast<const char*>(secret.data()), static_cast<int>(secret.size()), salt.data(),
                          static_cast<int>(salt.size()), iterations, EVP_sha256(), static_cast<int>(out.size()),
                          out.data()) != 1)
        throw std::runtime_error("PBKDF2 failed");
    return out;
}

inline bytes random_bytes(std::size_t n) {
    bytes out(n);
    if (n > 0 && RAND_bytes(out.data(), static_cast<int>(n)) != 1) throw std::runtime_error("RAND_bytes failed");
    return out;
}

inline bool constant_time_equal(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
    return a.size() == b.size() && CRYPTO_memcmp(a.data(), b.data(), a.size()) == 0;
}

} // namespace fedmq

#endif // FEDMQ_CRYPTO_HPP
