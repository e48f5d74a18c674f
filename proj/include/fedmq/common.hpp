#ifndef FEDMQ_COMMON_HPP
#define FEDMQ_COMMON_HPP

#include <chrono>
#include <functional>
#include <string>

namespace fedmq {

/// Time as seen by the event-driven cores: milliseconds on some monotonic
/// clock (virtual in the simulator, steady_clock in daemons).
using millis = std::chrono::milliseconds;

enum class log_level { debug, info, warn, error };

using log_sink = std::function<void(log_level, const std::string&)>;

inline const char* level_name(log_level l) {
    switch (l) {
    case log_level::debug: return "debug";
    case log_level::info: return "info";
    case log_level::warn: return "warn";
    case log_level::error: return "error";
    }
    return "?";
}

} // namespace fedmq

#endif // FEDMQ_COMMON_HPP
