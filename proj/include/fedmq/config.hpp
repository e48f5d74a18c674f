#ifndef FEDMQ_CONFIG_HPP
#define FEDMQ_CONFIG_HPP

// INI-style configuration (grammar in docs/file-formats.md) with layered
// overrides: command-line flags beat FEDMQ_<SECTION>_<KEY> environment
// variables, which beat the file.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cctype>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fedmq/broker.hpp"
#include "fedmq/common.hpp"
#include "fedmq/errors.hpp"
#include "fedmq/fl.hpp"
#include "fedmq/rounds.hpp"
#include "fedmq/topic.hpp"

extern char** environ;

namespace fedmq {

/// Flat "section.key" -> value view of an INI file plus overrides.
class settings {
public:
    settings() = default;

    static settings from_file(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw config_error(config_errc::parse_error, "cannot read " + path.string());
        return from_stream(in, path.string());
    }

    static settings from_string(const std::string& text, const std::string& origin = "<string>") {
        std::istringstream in(text);
        return from_stream(in, origin);
    }

    /// Applies FEDMQ_<SECTION>_<KEY> variables, e.g. FEDMQ_NODE_SECRET.
    void apply_environment(char** env = environ) {
        if (!env) return;
        for (char** e = env; *e; ++e) {
            std::string_view kv(*e);
            if (kv.rfind("FEDMQ_", 0) != 0) continue;
            auto eq = kv.find('=');
            if (eq == std::string_view::npos) continue;
            auto name = lower(kv.substr(6, eq - 6));
            auto us = name.find('_');
            if (us == std::string::npos || us == 0 || us + 1 == name.size()) continue;
            set(name.substr(0, us), name.substr(us + 1), std::string(kv.substr(eq + 1)));
        }
    }

    void set(const std::string& section, const std::string& key, std::string value) {
        values_[section + "." + key] = std::move(value);
    }

    bool has(const std::string& section, const std::string& key) const {
        return values_.count(section + "." + key) > 0;
    }

    std::string str(const std::string& section, const std::string& key) const {
        auto it = values_.find(section + "." + key);
        if (it == values_.end())
            throw config_error(config_errc::missing_key, "missing [" + section + "] " + key);
        return it->second;
    }

    std::string str(const std::string& section, const std::string& key, const std::string& fallback) const {
        return has(section, key) ? str(section, key) : fallback;
    }

    template <typename T>
    T number(const std::string& section, const std::string& key, std::optional<T> fallback = std::nullopt,
             T lo = std::numeric_limits<T>::lowest(), T hi = std::numeric_limits<T>::max()) const {
        if (!has(section, key)) {
            if (fallback) return *fallback;
            throw config_error(config_errc::missing_key, "missing [" + section + "] " + key);
        }
        auto text = str(section, key);
        T v{};
        auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
        if (ec != std::errc{} || end != text.data() + text.size())
            throw invalid(section, key, "'" + text + "' is not a number");
        if (v < lo || v > hi)
            throw invalid(section, key, "'" + text + "' out of range [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
        return v;
    }

    bool boolean(const std::string& section, const std::string& key, bool fallback) const {
        if (!has(section, key)) return fallback;
        auto v = lower(str(section, key));
        if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
        if (v == "0" || v == "false" || v == "no" || v == "off") return false;
        throw invalid(section, key, "'" + v + "' is not a boolean");
    }

    static config_error invalid(const std::string& section, const std::string& key, const std::string& why) {
        return config_error(config_errc::invalid_value, "[" + section + "] " + key + ": " + why);
    }

    const std::map<std::string, std::string>& values() const noexcept { return values_; }

private:
    static std::string lower(std::string_view s) {
        std::string out(s);
        for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        return out;
    }

    static settings from_stream(std::istream& in, const std::string& origin) {
        boost::property_tree::ptree tree;
        try {
            boost::property_tree::ini_parser::read_ini(in, tree);
        } catch (const boost::property_tree::ini_parser_error& e) {
            throw config_error(config_errc::parse_error, origin + ":" + std::to_string(e.line()) + ": " + e.message());
        }
        settings s;
        for (const auto& [section, body] : tree) {
            if (body.empty()) {
                throw config_error(config_errc::parse_error, origin + ": key '" + section + "' outside any section");
            }
            for (const auto& [key, value] : body) s.set(section, key, value.data());
        }
        return s;
    }

    std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Typed views

/// "fed/cep, fed2/cep2"
inline std::vector<federation_ref> parse_federations(const std::string& text) {
    std::vector<federation_ref> out;
    std::string item;
    std::istringstream ss(text);
    while (std::getline(ss, item, ',')) {
        auto b = item.find_first_not_of(" \t");
        auto e = item.find_last_not_of(" \t");
        if (b == std::string::npos) continue;
        item = item.substr(b, e - b + 1);
        auto slash = item.find('/');
        auto fed = identifier::make(item.substr(0, slash));
        auto cep = slash == std::string::npos ? std::nullopt : identifier::make(item.substr(slash + 1));
        if (!fed || !cep)
            throw config_error(config_errc::invalid_value, "federation '" + item + "' must be <fed>/<cep>");
        out.push_back({*fed, *cep});
    }
    if (out.empty()) throw config_error(config_errc::invalid_value, "no federations listed");
    return out;
}

inline log_level parse_log_level(const std::string& s) {
    if (s == "debug") return log_level::debug;
    if (s == "info") return log_level::info;
    if (s == "warn" || s == "warning") return log_level::warn;
    if (s == "error") return log_level::error;
    throw config_error(config_errc::invalid_value, "log level '" + s + "' must be debug, info, warn or error");
}

struct endpoint_address {
    std::string host = "127.0.0.1";
    std::uint16_t port = 1883;
};

inline endpoint_address parse_address(const std::string& s) {
    endpoint_address a;
    auto colon = s.rfind(':');
    if (colon == std::string::npos) {
        a.host = s;
        return a;
    }
    a.host = s.substr(0, colon);
    auto port = s.substr(colon + 1);
    unsigned v = 0;
    auto [end, ec] = std::from_chars(port.data(), port.data() + port.size(), v);
    if (ec != std::errc{} || end != port.data() + port.size() || v == 0 || v > 65535)
        throw config_error(config_errc::invalid_value, "bad port in address '" + s + "'");
    a.port = static_cast<std::uint16_t>(v);
    if (a.host.empty()) a.host = "127.0.0.1";
    return a;
}

/// Connection identity shared by PS and agent configs.
struct node_config {
    std::string client_id;
    std::string username;
    bytes secret;
    endpoint_address broker;
    std::vector<federation_ref> federations;
    log_level level = log_level::info;
    std::uint16_t keep_alive = 30;

    static node_config from(const settings& s) {
        node_config n;
        n.client_id = s.str("node", "client_id");
        if (!is_valid_identifier(n.client_id)) throw settings::invalid("node", "client_id", "invalid identifier");
        n.username = s.str("node", "username", n.client_id);
        if (s.has("node", "secret")) {
            n.secret = to_bytes(s.str("node", "secret"));
        } else if (s.has("node", "secret_file")) {
            std::ifstream in(s.str("node", "secret_file"));
            if (!in) throw settings::invalid("node", "secret_file", "cannot read " + s.str("node", "secret_file"));
            std::string line;
            std::getline(in, line);
            while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
            n.secret = to_bytes(line);
        } else {
            throw config_error(config_errc::missing_key, "missing [node] secret or secret_file");
        }
        n.broker = parse_address(s.str("node", "broker", "127.0.0.1:1883"));
        n.federations = parse_federations(s.str("node", "federations"));
        n.level = parse_log_level(s.str("node", "log_level", "info"));
        n.keep_alive = s.number<std::uint16_t>("node", "keep_alive", 30);
        return n;
    }

    connect_options connect() const {
        connect_options o;
        o.client_id = client_id;
        o.username = username;
        o.secret = secret;
        o.keep_alive = keep_alive;
        return o;
    }
};

inline round_config rounds_from(const settings& s) {
    round_config r;
    r.min_clients = s.number<std::uint32_t>("rounds", "min_clients", r.min_clients, 1);
    r.round_timeout = millis(s.number<std::int64_t>("rounds", "round_timeout_ms", r.round_timeout.count(), 1));
    r.max_rounds = s.number<std::uint32_t>("rounds", "max_rounds", r.max_rounds);
    r.qos = s.number<std::uint8_t>("rounds", "qos", r.qos, 0, 2);
    r.local_epochs = s.number<std::uint32_t>("training", "local_epochs", r.local_epochs);
    r.learning_rate = s.number<double>("training", "learning_rate", r.learning_rate);
    if (!(r.learning_rate > 0)) throw settings::invalid("training", "learning_rate", "must be positive");
    return r;
}

/// Synthetic local data for an agent: [data] seed, samples, dim, separation.
struct data_config {
    std::uint64_t seed = 1;
    std::size_t samples = 200;
    std::size_t dim = 8;
    double separation = 5.0;

    static data_config from(const settings& s) {
        data_config d;
        d.seed = s.number<std::uint64_t>("data", "seed", d.seed);
        d.samples = s.number<std::size_t>("data", "samples", d.samples, 1);
        d.dim = s.number<std::size_t>("data", "dim", d.dim, 1, 1'000'000);
        d.separation = s.number<double>("data", "separation", d.separation);
        return d;
    }

    dataset generate(std::uint64_t stream = 0) const { return synth_dataset(seed, samples, dim, separation, stream); }
};

struct broker_settings {
    std::string bind = "0.0.0.0";
    std::uint16_t port = 1883;
    std::filesystem::path credentials;
    std::filesystem::path acl;
    std::optional<std::filesystem::path> metrics_file;
    broker_config core;
    log_level level = log_level::info;

    static broker_settings from(const settings& s) {
        broker_settings b;
        b.bind = s.str("broker", "bind", b.bind);
        b.port = s.number<std::uint16_t>("broker", "port", b.port);
        b.credentials = s.str("broker", "credentials");
        b.acl = s.str("broker", "acl");
        if (s.has("broker", "metrics_file")) b.metrics_file = s.str("broker", "metrics_file");
        b.core.max_queue_per_client =
            s.number<std::size_t>("broker", "max_queue_per_client", b.core.max_queue_per_client, 1);
        b.core.max_packet_size =
            s.number<std::uint32_t>("broker", "max_packet_size", b.core.max_packet_size, 64, max_remaining_length);
        b.core.retry_interval =
            millis(s.number<std::int64_t>("broker", "retry_interval_ms", b.core.retry_interval.count(), 1));
        b.core.backlog_limit = s.number<std::size_t>("broker", "backlog_limit", b.core.backlog_limit, 1);
        b.level = parse_log_level(s.str("broker", "log_level", "info"));
        return b;
    }
};

} // namespace fedmq

#endif // FEDMQ_CONFIG_HPP
