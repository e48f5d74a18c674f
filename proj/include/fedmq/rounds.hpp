#ifndef FEDMQ_ROUNDS_HPP
#define FEDMQ_ROUNDS_HPP

// Event-driven round state machines. Neither machine performs I/O: each step
// returns the actions (publish, store, train, ...) the runtime must carry out.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "fedmq/common.hpp"
#include "fedmq/fl.hpp"
#include "fedmq/payload.hpp"
#include "fedmq/topic.hpp"

namespace fedmq {

struct round_config {
    std::uint32_t min_clients = 3;
    millis round_timeout{30'000};
    std::uint32_t max_rounds = 30;
    std::uint32_t local_epochs = 5;
    double learning_rate = 0.1;
    std::uint8_t qos = 0;

    void validate() const {
        if (min_clients < 1) throw std::invalid_argument("min_clients must be >= 1");
        if (round_timeout <= millis{0}) throw std::invalid_argument("round_timeout must be positive");
        if (!(learning_rate > 0)) throw std::invalid_argument("learning_rate must be positive");
        if (qos > 2) throw std::invalid_argument("qos must be 0, 1 or 2");
    }
};

// ---------------------------------------------------------------------------
// Actions shared by both machines

struct publish_action {
    std::string topic;
    envelope env;
    std::uint8_t qos = 0;
    bool retain = false;
};

struct store_action {
    std::uint32_t round = 0;
    std::uint32_t model_version = 0; // the version the store is expected to assign
    std::vector<std::string> contributors;
    parameter_set model;
};

struct log_action {
    enum class level { info, warn } lvl = level::info;
    std::string text;
};

struct train_action {
    std::uint32_t round = 0;
    parameter_set start;
};

struct unsubscribe_action {
    std::string filter;
};

struct halt_action {};

/// Bodies at or above this size are zlib-compressed before publishing.
inline constexpr std::size_t compress_threshold = 4096;

inline envelope make_envelope(envelope_kind kind, const federation_ref& fr, std::string client, std::uint32_t round,
                              std::uint32_t version, const parameter_set& p) {
    envelope e;
    e.kind = kind;
    e.fed = fr.fed.str();
    e.cep = fr.cep.str();
    e.client = std::move(client);
    e.round = round;
    e.model_version = version;
    e.body = encode_parameters(p);
    e.compressed = e.body.size() >= compress_threshold;
    return e;
}

// ---------------------------------------------------------------------------
// Parameter server

enum class ps_phase { idle, broadcasting, collecting, aggregating };

inline const char* phase_name(ps_phase p) {
    switch (p) {
    case ps_phase::idle: return "idle";
    case ps_phase::broadcasting: return "broadcasting";
    case ps_phase::collecting: return "collecting";
    case ps_phase::aggregating: return "aggregating";
    }
    return "?";
}

struct ps_start {};
struct ps_update {
    std::string client;
    std::uint32_t round = 0;
    parameter_set params;
};
struct ps_timeout {};
struct ps_tick {};
using ps_event = std::variant<ps_start, ps_update, ps_timeout, ps_tick>;

using ps_action = std::variant<publish_action, store_action, log_action>;

struct ps_counters {
    std::uint64_t duplicate_updates = 0;
    std::uint64_t discarded_updates = 0;
    std::uint64_t stalls = 0;
};

/// One PS round loop for a single (fed, cep). Rounds and model versions are
/// 1-based; the template for round r carries model_version = last stored.
class ps_machine {
public:
    ps_machine(federation_ref fr, round_config cfg, parameter_set initial, std::uint32_t last_version = 0,
               std::shared_ptr<const aggregation_policy> policy = std::make_shared<federated_averaging>())
        : fed_(std::move(fr)), cfg_(cfg), global_(std::move(initial)), version_(last_version),
          policy_(std::move(policy)) {
        cfg_.validate();
    }

    std::vector<ps_action> step(const ps_event& ev, millis now) {
        std::vector<ps_action> out;
        std::visit([&](const auto& e) { on(e, now, out); }, ev);
        return out;
    }

    ps_phase phase() const noexcept { return phase_; }
    std::uint32_t round() const noexcept { return round_; }
    std::uint32_t model_version() const noexcept { return version_; }
    const parameter_set& current_global() const noexcept { return global_; }
    const std::map<std::string, parameter_set>& received() const noexcept { return received_; }
    const ps_counters& counters() const noexcept { return counters_; }
    const federation_ref& federation() const noexcept { return fed_; }
    const round_config& config() const noexcept { return cfg_; }
    std::optional<millis> deadline() const noexcept { return deadline_; }
    bool finished() const noexcept { return phase_ == ps_phase::idle && round_ >= cfg_.max_rounds && round_ > 0; }

private:
    static bool allowed(ps_phase from, ps_phase to) {
        using enum ps_phase;
        return (from == idle && to == broadcasting) || (from == broadcasting && to == collecting) ||
               (from == collecting && to == aggregating) || (from == aggregating && to == broadcasting) ||
               (from == aggregating && to == idle);
    }

    void enter(ps_phase next) {
        if (!allowed(phase_, next))
            throw std::logic_error(std::string("illegal PS transition ") + phase_name(phase_) + " -> " +
                                   phase_name(next));
        phase_ = next;
    }

    std::string topic() const { return render(topic_path::job_request(fed_)); }

    void broadcast(envelope_kind kind, millis now, std::vector<ps_action>& out) {
        out.push_back(publish_action{topic(), make_envelope(kind, fed_, "", round_, version_, global_), cfg_.qos, true});
        deadline_ = now + cfg_.round_timeout;
    }

    void on(const ps_start&, millis now, std::vector<ps_action>& out) {
        if (phase_ != ps_phase::idle || cfg_.max_rounds == 0 || round_ >= cfg_.max_rounds) {
            out.push_back(log_action{log_action::level::warn, "start ignored in phase " + std::string(phase_name(phase_))});
            return;
        }
        enter(ps_phase::broadcasting);
        round_ = 1;
        broadcast(envelope_kind::model_template, now, out);
        enter(ps_phase::collecting);
    }

    void on(const ps_update& u, millis now, std::vector<ps_action>& out) {
        auto discard = [&](const std::string& why, log_action::level lvl = log_action::level::warn) {
            ++counters_.discarded_updates;
            out.push_back(log_action{lvl, "discarded update from " + u.client + ": " + why});
        };
        // late copies of earlier rounds are routine under at-least-once delivery
        if (u.round < round_) return discard("late update for round " + std::to_string(u.round), log_action::level::info);
        if (phase_ != ps_phase::collecting) return discard("not collecting");
        if (u.round != round_) return discard("round " + std::to_string(u.round) + " != " + std::to_string(round_));
        if (!is_valid_identifier(u.client)) return discard("invalid client id");
        if (u.params.layout != global_.layout || u.params.values.size() != global_.values.size())
            return discard("layout mismatch");
        if (u.params.num_samples == 0) return discard("zero samples");
        auto [it, inserted] = received_.insert_or_assign(u.client, u.params);
        if (!inserted) ++counters_.duplicate_updates;
        if (received_.size() >= cfg_.min_clients) complete_round(now, out);
    }

    void on(const ps_timeout&, millis now, std::vector<ps_action>& out) { timeout(now, out); }

    void on(const ps_tick&, millis now, std::vector<ps_action>& out) {
        if (phase_ == ps_phase::collecting && deadline_ && now >= *deadline_) timeout(now, out);
    }

    void timeout(millis now, std::vector<ps_action>& out) {
        if (phase_ != ps_phase::collecting) return;
        if (!received_.empty()) {
            complete_round(now, out);
            return;
        }
        ++counters_.stalls;
        out.push_back(log_action{log_action::level::warn,
                                 "round " + std::to_string(round_) + " stalled with no updates; re-publishing"});
        broadcast(version_ == 0 ? envelope_kind::model_template : envelope_kind::global_model, now, out);
    }

    void complete_round(millis now, std::vector<ps_action>& out) {
        enter(ps_phase::aggregating);
        std::vector<client_update> updates;
        updates.reserve(received_.size());
        for (auto& [client, params] : received_) updates.push_back({client, params});
        global_ = aggregate(updates, *policy_);
        ++version_;
        std::vector<std::string> contributors;
        for (const auto& u : updates) contributors.push_back(u.client_id);
        out.push_back(store_action{round_, version_, contributors, global_});
        out.push_back(log_action{log_action::level::info, "round " + std::to_string(round_) + " aggregated over " +
                                                              std::to_string(updates.size()) + " clients -> v" +
                                                              std::to_string(version_)});
        received_.clear();
        deadline_.reset();
        if (round_ >= cfg_.max_rounds) {
            enter(ps_phase::idle);
            return;
        }
        enter(ps_phase::broadcasting);
        ++round_;
        broadcast(envelope_kind::global_model, now, out);
        enter(ps_phase::collecting);
    }

    federation_ref fed_;
    round_config cfg_;
    parameter_set global_;
    std::uint32_t version_;
    std::shared_ptr<const aggregation_policy> policy_;
    ps_phase phase_ = ps_phase::idle;
    std::uint32_t round_ = 0;
    std::map<std::string, parameter_set> received_;
    std::optional<millis> deadline_;
    ps_counters counters_;
};

// ---------------------------------------------------------------------------
// Client agent

enum class client_phase { waiting_template, training, publishing };

struct template_received {
    std::uint32_t round = 0;
    std::uint32_t model_version = 0;
    parameter_set params;
};
struct training_done {
    std::uint32_t round = 0;
    parameter_set params;
};
struct client_leave {};
using client_event = std::variant<template_received, training_done, client_leave>;

using client_action = std::variant<train_action, publish_action, unsubscribe_action, halt_action, log_action>;

class client_machine {
public:
    client_machine(federation_ref fr, identifier client, std::uint64_t local_samples, std::uint8_t qos = 0)
        : fed_(std::move(fr)), client_(std::move(client)), local_samples_(local_samples), qos_(qos) {}

    std::vector<client_action> step(const client_event& ev) {
        std::vector<client_action> out;
        if (halted_) return out;
        std::visit([&](const auto& e) { on(e, out); }, ev);
        return out;
    }

    client_phase phase() const noexcept { return phase_; }
    bool halted() const noexcept { return halted_; }
    std::uint32_t last_round() const noexcept { return last_round_; }
    std::uint64_t stale_ignored() const noexcept { return stale_; }
    std::uint64_t updates_published() const noexcept { return published_; }
    const identifier& client() const noexcept { return client_; }
    const federation_ref& federation() const noexcept { return fed_; }

private:
    void enter(client_phase next) {
        using enum client_phase;
        bool ok = (phase_ == waiting_template && next == training) || (phase_ == training && next == publishing) ||
                  (phase_ == publishing && next == waiting_template) || (phase_ == training && next == training);
        if (!ok) throw std::logic_error("illegal client transition");
        phase_ = next;
    }

    // Rounds equal to the last one seen are retrained: the PS re-publishes
    // the same round when it stalls.
    void on(const template_received& t, std::vector<client_action>& out) {
        if (t.round < last_round_) {
            ++stale_;
            out.push_back(log_action{log_action::level::info, "ignored stale template for round " +
                                                                  std::to_string(t.round)});
            return;
        }
        last_round_ = t.round;
        version_ = t.model_version;
        enter(client_phase::training);
        out.push_back(train_action{t.round, t.params});
    }

    void on(const training_done& d, std::vector<client_action>& out) {
        if (phase_ != client_phase::training || d.round != last_round_) {
            ++stale_;
            return;
        }
        enter(client_phase::publishing);
        parameter_set p = d.params;
        p.num_samples = local_samples_;
        auto topic = render(topic_path::for_client(channel::job_reply, fed_, client_));
        out.push_back(publish_action{topic, make_envelope(envelope_kind::local_update, fed_, client_.str(), d.round,
                                                          version_, p),
                                     qos_, false});
        ++published_;
        enter(client_phase::waiting_template);
    }

    void on(const client_leave&, std::vector<client_action>& out) {
        out.push_back(unsubscribe_action{render(topic_path::job_request(fed_))});
        out.push_back(halt_action{});
        halted_ = true;
    }

    federation_ref fed_;
    identifier client_;
    std::uint64_t local_samples_;
    std::uint8_t qos_;
    client_phase phase_ = client_phase::waiting_template;
    bool halted_ = false;
    std::uint32_t last_round_ = 0;
    std::uint32_t version_ = 0;
    std::uint64_t stale_ = 0;
    std::uint64_t published_ = 0;
};

} // namespace fedmq

#endif // FEDMQ_ROUNDS_HPP
