#ifndef FEDMQ_TOPIC_HPP
#define FEDMQ_TOPIC_HPP

// Control-plane topic namespace:
//
//   {fed}/{cep}/job_request                  PS -> clients (templates, global models)
//   {fed}/{cep}/job_replies/{client}         client -> PS (local updates)
//   {fed}/{cep}/model_request/{client}       client -> PS (list / download requests)
//   {fed}/{cep}/model_reply/{client}         PS -> client
//
// plus wildcard filters and the access-control rules evaluated against them.

#include <algorithm>
#include <compare>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedmq/errors.hpp"

namespace fedmq {

inline constexpr std::size_t max_identifier_length = 64;

inline bool is_valid_identifier(std::string_view s) noexcept {
    if (s.empty() || s.size() > max_identifier_length) return false;
    return std::all_of(s.begin(), s.end(), [](char c) {
        return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '-' ||
               c == '_';
    });
}

/// Federation, CEP or client token. Always valid once constructed.
class identifier {
public:
    explicit identifier(std::string value) : value_(std::move(value)) {
        if (!is_valid_identifier(value_))
            throw topic_error(topic_errc::invalid_identifier, "invalid identifier '" + value_ + "'");
    }

    static std::optional<identifier> make(std::string_view value) {
        if (!is_valid_identifier(value)) return std::nullopt;
        return identifier(std::string(value));
    }

    const std::string& str() const noexcept { return value_; }

    friend auto operator<=>(const identifier&, const identifier&) = default;
    friend bool operator==(const identifier&, const identifier&) = default;

private:
    std::string value_;
};

/// One (federation, CEP) pair a node participates in.
struct federation_ref {
    identifier fed;
    identifier cep;

    friend auto operator<=>(const federation_ref&, const federation_ref&) = default;
    friend bool operator==(const federation_ref&, const federation_ref&) = default;
};

enum class channel { job_request, job_reply, model_request, model_reply };

inline std::string_view channel_word(channel c) noexcept {
    switch (c) {
    case channel::job_request: return "job_request";
    case channel::job_reply: return "job_replies";
    case channel::model_request: return "model_request";
    case channel::model_reply: return "model_reply";
    }
    return {};
}

inline std::optional<channel> channel_from_word(std::string_view w) noexcept {
    for (auto c : {channel::job_request, channel::job_reply, channel::model_request, channel::model_reply})
        if (channel_word(c) == w) return c;
    return std::nullopt;
}

class topic_path {
public:
    static topic_path job_request(identifier fed, identifier cep) {
        return topic_path(channel::job_request, std::move(fed), std::move(cep), std::nullopt);
    }

    static topic_path for_client(channel ch, identifier fed, identifier cep, identifier client) {
        if (ch == channel::job_request)
            throw topic_error(topic_errc::malformed_topic, "job_request topics carry no client id");
        return topic_path(ch, std::move(fed), std::move(cep), std::move(client));
    }

    static topic_path job_request(const federation_ref& f) { return job_request(f.fed, f.cep); }
    static topic_path for_client(channel ch, const federation_ref& f, identifier client) {
        return for_client(ch, f.fed, f.cep, std::move(client));
    }

    channel chan() const noexcept { return channel_; }
    const identifier& fed() const noexcept { return fed_; }
    const identifier& cep() const noexcept { return cep_; }
    const std::optional<identifier>& client() const noexcept { return client_; }
    federation_ref federation() const { return {fed_, cep_}; }

    friend bool operator==(const topic_path&, const topic_path&) = default;

private:
    topic_path(channel ch, identifier fed, identifier cep, std::optional<identifier> client)
        : channel_(ch), fed_(std::move(fed)), cep_(std::move(cep)), client_(std::move(client)) {}

    channel channel_;
    identifier fed_;
    identifier cep_;
    std::optional<identifier> client_;
};

inline std::vector<std::string_view> split_topic(std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        auto pos = s.find('/', start);
        if (pos == std::string_view::npos) {
            out.push_back(s.substr(start));
            return out;
        }
        out.push_back(s.substr(start, pos - start));
        start = pos + 1;
    }
}

inline std::string render(const topic_path& p) {
    std::string out = p.fed().str();
    out += '/';
    out += p.cep().str();
    out += '/';
    out += channel_word(p.chan());
    if (p.client()) {
        out += '/';
        out += p.client()->str();
    }
    return out;
}

inline topic_path parse_topic(std::string_view text) {
    auto fail = [&](const char* why) {
        return topic_error(topic_errc::malformed_topic, std::string(why) + ": '" + std::string(text) + "'");
    };
    auto seg = split_topic(text);
    if (seg.size() != 3 && seg.size() != 4) throw fail("wrong segment count");
    auto ch = channel_from_word(seg[2]);
    if (!ch) throw fail("unknown channel");
    bool wants_client = *ch != channel::job_request;
    if (wants_client != (seg.size() == 4)) throw fail("wrong segment count for channel");
    auto fed = identifier::make(seg[0]);
    auto cep = identifier::make(seg[1]);
    if (!fed || !cep) throw fail("invalid identifier");
    if (!wants_client) return topic_path::job_request(*fed, *cep);
    auto client = identifier::make(seg[3]);
    if (!client) throw fail("invalid identifier");
    return topic_path::for_client(*ch, *fed, *cep, *client);
}

inline std::optional<topic_path> try_parse_topic(std::string_view text) {
    try {
        return parse_topic(text);
    } catch (const topic_error&) {
        return std::nullopt;
    }
}

/// Subscription pattern. Tokens are identifiers, `+` (one level) or a
/// trailing `#` (zero or more levels).
class topic_filter {
public:
    static topic_filter parse(std::string_view text) {
        auto fail = [&](const char* why) {
            return topic_error(topic_errc::malformed_filter, std::string(why) + ": '" + std::string(text) + "'");
        };
        if (text.empty()) throw fail("empty filter");
        auto seg = split_topic(text);
        topic_filter f;
        for (std::size_t i = 0; i < seg.size(); ++i) {
            auto s = seg[i];
            if (s == "#") {
                if (i + 1 != seg.size()) throw fail("'#' must be the last segment");
            } else if (s != "+" && !is_valid_identifier(s)) {
                throw fail("invalid segment");
            }
            f.segments_.emplace_back(s);
        }
        return f;
    }

    static std::optional<topic_filter> try_parse(std::string_view text) {
        try {
            return parse(text);
        } catch (const topic_error&) {
            return std::nullopt;
        }
    }

    static topic_filter exact(const topic_path& p) { return parse(render(p)); }

    const std::vector<std::string>& segments() const noexcept { return segments_; }

    bool has_wildcards() const noexcept {
        return std::any_of(segments_.begin(), segments_.end(),
                           [](const std::string& s) { return s == "+" || s == "#"; });
    }

    std::string str() const {
        std::string out;
        for (std::size_t i = 0; i < segments_.size(); ++i) {
            if (i) out += '/';
            out += segments_[i];
        }
        return out;
    }

    friend bool operator==(const topic_filter&, const topic_filter&) = default;

private:
    std::vector<std::string> segments_;
};

/// Filter-vs-literal-topic matching.
inline bool matches(const topic_filter& filter, std::string_view topic) {
    const auto& f = filter.segments();
    auto t = split_topic(topic);
    std::size_t i = 0;
    for (; i < f.size(); ++i) {
        if (f[i] == "#") return true;
        if (i >= t.size()) return false;
        if (f[i] != "+" && f[i] != t[i]) return false;
    }
    return i == t.size();
}

/// True when every topic matched by `requested` is also matched by `rule`.
/// Coincides with matches() when `requested` has no wildcards.
inline bool covers(const topic_filter& rule, const topic_filter& requested) {
    const auto& r = rule.segments();
    const auto& q = requested.segments();
    for (std::size_t i = 0; i < r.size(); ++i) {
        if (r[i] == "#") return true;
        if (i >= q.size()) return false;
        if (q[i] == "#") return false;
        if (r[i] == "+") continue;
        if (q[i] == "+" || q[i] != r[i]) return false;
    }
    return r.size() == q.size();
}

enum class acl_action { publish, subscribe };

struct acl_rule {
    acl_action action;
    topic_filter filter;

    friend bool operator==(const acl_rule&, const acl_rule&) = default;
};

/// Default-deny: true iff some rule for `action` matches the literal topic.
inline bool authorize(std::span<const acl_rule> rules, acl_action action, std::string_view topic) {
    return std::any_of(rules.begin(), rules.end(),
                       [&](const acl_rule& r) { return r.action == action && matches(r.filter, topic); });
}

/// Subscription check for a (possibly wildcarded) requested filter.
inline bool authorize_filter(std::span<const acl_rule> rules, acl_action action, const topic_filter& requested) {
    return std::any_of(rules.begin(), rules.end(),
                       [&](const acl_rule& r) { return r.action == action && covers(r.filter, requested); });
}

/// Permissions granted to a screened client for each federation it joined.
inline std::vector<acl_rule> canonical_client_acl(const identifier& client, std::span<const federation_ref> feds) {
    std::vector<acl_rule> out;
    for (const auto& f : feds) {
        out.push_back({acl_action::subscribe, topic_filter::exact(topic_path::job_request(f))});
        out.push_back({acl_action::publish,
                       topic_filter::exact(topic_path::for_client(channel::job_reply, f, client))});
        out.push_back({acl_action::publish,
                       topic_filter::exact(topic_path::for_client(channel::model_request, f, client))});
        out.push_back({acl_action::subscribe,
                       topic_filter::exact(topic_path::for_client(channel::model_reply, f, client))});
    }
    return out;
}

/// Permissions of the parameter server for the federations it drives.
inline std::vector<acl_rule> canonical_ps_acl(std::span<const federation_ref> feds) {
    std::vector<acl_rule> out;
    for (const auto& f : feds) {
        auto prefix = f.fed.str() + "/" + f.cep.str() + "/";
        out.push_back({acl_action::publish, topic_filter::parse(prefix + "job_request")});
        out.push_back({acl_action::subscribe, topic_filter::parse(prefix + "job_replies/#")});
        out.push_back({acl_action::subscribe, topic_filter::parse(prefix + "model_request/+")});
        out.push_back({acl_action::publish, topic_filter::parse(prefix + "model_reply/+")});
    }
    return out;
}

inline std::string_view action_word(acl_action a) noexcept {
    return a == acl_action::publish ? "publish" : "subscribe";
}

inline std::optional<acl_action> action_from_word(std::string_view w) noexcept {
    if (w == "publish") return acl_action::publish;
    if (w == "subscribe") return acl_action::subscribe;
    return std::nullopt;
}

} // namespace fedmq

#endif // FEDMQ_TOPIC_HPP
