#ifndef FEDMQ_ERRORS_HPP
#define FEDMQ_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace fedmq {

/// Exception carrying a module-specific error code enum.
template <typename Errc>
class coded_error : public std::runtime_error {
public:
    coded_error(Errc code, const std::string& what)
        : std::runtime_error(what), code_(code) {}

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

enum class topic_errc { malformed_topic, malformed_filter, invalid_identifier };
using topic_error = coded_error<topic_errc>;

enum class codec_errc { malformed, incomplete, value_too_large };
using codec_error = coded_error<codec_errc>;

enum class payload_errc {
    bad_magic,
    unsupported_version,
    unknown_kind,
    unknown_flags,
    truncated_body,
    decompression_failure,
    invalid_identifier,
    layout_mismatch,
    non_finite_value,
    too_large,
};
using payload_error = coded_error<payload_errc>;

enum class fl_errc { layout_mismatch, zero_total_weight, empty_update_set, empty_dataset };
using fl_error = coded_error<fl_errc>;

enum class store_errc { storage_failure, corrupt_body, unknown_version, integrity_failure };
using store_error = coded_error<store_errc>;

enum class credentials_errc { parse_error, duplicate_client, unknown_client, io_error };
using credentials_error = coded_error<credentials_errc>;

enum class config_errc { parse_error, missing_key, invalid_value };
using config_error = coded_error<config_errc>;

} // namespace fedmq

#endif // FEDMQ_ERRORS_HPP
