#ifndef FEDMQ_NODES_HPP
#define FEDMQ_NODES_HPP

// Parameter server and client agent on top of mqtt_client. Neither knows
// about sockets: a transport delivers packets and time and forwards what the
// embedded client sends. The same objects run in the simulator and over TCP.

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fedmq/client.hpp"
#include "fedmq/fl.hpp"
#include "fedmq/model_store.hpp"
#include "fedmq/rounds.hpp"

namespace fedmq {

struct round_record {
    federation_ref fed;
    std::uint32_t round = 0;
    std::uint32_t model_version = 0;
    std::vector<std::string> contributors;
    parameter_set model;
    millis at{0};
};

namespace detail {

inline void log_to(const log_sink& sink, log_level l, const std::string& msg) {
    if (sink) sink(l, msg);
}

inline log_level level_of(const log_action& a) {
    return a.lvl == log_action::level::warn ? log_level::warn : log_level::info;
}

inline void publish_envelope(mqtt_client& c, const publish_action& a, millis now) {
    c.publish(a.topic, byte_buffer(encode_envelope(a.env)), a.qos, a.retain, now);
}

} // namespace detail

// ---------------------------------------------------------------------------

class ps_node {
public:
    ps_node(connect_options opts, client_config ccfg, std::vector<federation_ref> feds, round_config rounds,
            parameter_set initial, model_store& store, mqtt_client::send_fn send, log_sink log = {},
            std::shared_ptr<const aggregation_policy> policy = std::make_shared<federated_averaging>())
        : store_(store), log_(std::move(log)),
          client_(std::move(opts), ccfg, std::move(send), handlers()) {
        for (auto& f : feds) {
            auto last = store_.latest_version(f.fed, f.cep);
            machines_.emplace(f, ps_machine(f, rounds, initial, last, policy));
        }
    }

    ps_node(const ps_node&) = delete;
    ps_node& operator=(const ps_node&) = delete;

    /// Call on every new transport connection.
    void start(millis now) {
        now_ = now;
        client_.start(now);
    }
    void on_packet(const packet& p, millis now) {
        now_ = now;
        client_.on_packet(p, now);
    }
    void on_connection_lost() { client_.on_connection_lost(); }

    void tick(millis now) {
        now_ = now;
        if (started_)
            for (auto& [f, m] : machines_) run(m, m.step(ps_tick{}, now));
        client_.tick(now);
    }

    bool finished() const {
        for (const auto& [f, m] : machines_)
            if (!m.finished()) return false;
        return true;
    }

    const ps_machine& machine(const federation_ref& f) const { return machines_.at(f); }
    const std::map<federation_ref, ps_machine>& machines() const noexcept { return machines_; }
    mqtt_client& client() noexcept { return client_; }
    const mqtt_client& client() const noexcept { return client_; }

    /// Invoked after each aggregated model is stored.
    std::function<void(const round_record&)> on_round;

private:
    mqtt_client::handlers handlers() {
        mqtt_client::handlers h;
        h.on_connack = [this](std::uint8_t rc) { on_connack(rc); };
        h.on_message = [this](const publish_packet& p) { on_message(p); };
        h.on_disconnect = [this](std::optional<std::uint8_t> rc) {
            detail::log_to(log_, log_level::warn,
                           "broker disconnected the parameter server, reason " + std::to_string(rc.value_or(0)));
        };
        return h;
    }

    void on_connack(std::uint8_t rc) {
        if (rc != reason::success) {
            detail::log_to(log_, log_level::error, "broker refused the parameter server, reason " + std::to_string(rc));
            return;
        }
        if (started_) {
            // the broker may have restarted and lost its retained messages
            for (const auto& [f, a] : last_job_) detail::publish_envelope(client_, a, now_);
            return;
        }
        started_ = true;
        std::vector<subscription_request> subs;
        for (const auto& [f, m] : machines_) {
            auto prefix = f.fed.str() + "/" + f.cep.str() + "/";
            subs.push_back({prefix + "job_replies/#", m.config().qos});
            subs.push_back({prefix + "model_request/+", 1});
        }
        client_.subscribe(std::move(subs), now_);
        for (auto& [f, m] : machines_) run(m, m.step(ps_start{}, now_));
    }

    void on_message(const publish_packet& p) {
        auto path = try_parse_topic(p.topic);
        if (!path) return;
        auto it = machines_.find(path->federation());
        if (it == machines_.end()) return;
        if (path->chan() == channel::model_request) {
            auto reply = handle_model_channel(store_, p.topic, p.payload.span());
            if (reply) client_.publish(reply->topic, byte_buffer(encode_envelope(reply->env)), 1, false, now_);
            return;
        }
        if (path->chan() != channel::job_reply) return;
        const auto& sender = path->client()->str();
        try {
            auto env = decode_envelope(p.payload.span());
            if (env.kind != envelope_kind::local_update || env.client != sender || env.fed != path->fed().str() ||
                env.cep != path->cep().str()) {
                detail::log_to(log_, log_level::warn, "ignored mislabelled reply on " + p.topic);
                return;
            }
            run(it->second, it->second.step(ps_update{sender, env.round, decode_parameters(env.body)}, now_));
        } catch (const payload_error& e) {
            detail::log_to(log_, log_level::warn, "ignored undecodable reply on " + p.topic + ": " + e.what());
        }
    }

    void run(ps_machine& m, const std::vector<ps_action>& actions) {
        for (const auto& a : actions) {
            if (auto* pub = std::get_if<publish_action>(&a)) {
                last_job_.insert_or_assign(m.federation(), *pub);
                detail::publish_envelope(client_, *pub, now_);
            } else if (auto* st = std::get_if<store_action>(&a)) {
                persist(m.federation(), *st);
            } else if (auto* lg = std::get_if<log_action>(&a)) {
                detail::log_to(log_, detail::level_of(*lg), m.federation().fed.str() + "/" +
                                                                m.federation().cep.str() + ": " + lg->text);
            }
        }
    }

    void persist(const federation_ref& f, const store_action& st) {
        try {
            auto rec = store_.store_model(f.fed, f.cep, st.round, st.contributors, encode_parameters(st.model));
            if (rec.entry.model_version != st.model_version)
                detail::log_to(log_, log_level::warn,
                               "store assigned version " + std::to_string(rec.entry.model_version) + ", expected " +
                                   std::to_string(st.model_version));
            if (on_round) on_round({f, st.round, rec.entry.model_version, st.contributors, st.model, now_});
        } catch (const store_error& e) {
            detail::log_to(log_, log_level::error, std::string("could not store model: ") + e.what());
        }
    }

    model_store& store_;
    log_sink log_;
    mqtt_client client_;
    std::map<federation_ref, ps_machine> machines_;
    std::map<federation_ref, publish_action> last_job_;
    bool started_ = false;
    millis now_{0};
};

// ---------------------------------------------------------------------------

struct agent_options {
    std::vector<federation_ref> federations;
    std::uint32_t local_epochs = 5;
    double learning_rate = 0.1;
    std::uint8_t qos = 0;
    /// Leave every federation after publishing the update for this round.
    std::optional<std::uint32_t> leave_after_round;
};

class agent_node {
public:
    agent_node(connect_options opts, client_config ccfg, agent_options aopts, dataset data, mqtt_client::send_fn send,
               log_sink log = {})
        : opts_(std::move(aopts)), data_(std::move(data)), log_(std::move(log)),
          client_(std::move(opts), ccfg, std::move(send), handlers()) {
        identifier me(client_.options().client_id);
        for (const auto& f : opts_.federations) machines_.emplace(f, client_machine(f, me, data_.size(), opts_.qos));
    }

    agent_node(const agent_node&) = delete;
    agent_node& operator=(const agent_node&) = delete;

    void start(millis now) {
        now_ = now;
        client_.start(now);
    }
    void on_packet(const packet& p, millis now) {
        now_ = now;
        client_.on_packet(p, now);
    }
    void on_connection_lost() { client_.on_connection_lost(); }
    void tick(millis now) {
        now_ = now;
        client_.tick(now);
    }

    /// Stops taking part in `f`: unsubscribes from its job_request topic.
    void leave(const federation_ref& f, millis now) {
        now_ = now;
        auto it = machines_.find(f);
        if (it != machines_.end()) run(it->second, it->second.step(client_leave{}));
    }

    void request_model_list(const federation_ref& f, millis now) {
        now_ = now;
        send_request(f, envelope_kind::model_list_request, 0, {});
    }

    void request_model(const federation_ref& f, std::uint32_t version, millis now) {
        now_ = now;
        send_request(f, envelope_kind::model_download_request, version, encode_download_request(version));
    }

    bool halted() const {
        for (const auto& [f, m] : machines_)
            if (!m.halted()) return false;
        return true;
    }

    const client_machine& machine(const federation_ref& f) const { return machines_.at(f); }
    /// Latest model received on `f`'s job_request topic, if any.
    const parameter_set* latest_global(const federation_ref& f) const {
        auto it = latest_.find(f);
        return it == latest_.end() ? nullptr : &it->second;
    }
    std::uint64_t rounds_trained() const noexcept { return trained_; }
    const dataset& data() const noexcept { return data_; }
    mqtt_client& client() noexcept { return client_; }
    const mqtt_client& client() const noexcept { return client_; }

    std::function<void(const envelope&)> on_model_reply;

private:
    mqtt_client::handlers handlers() {
        mqtt_client::handlers h;
        h.on_connack = [this](std::uint8_t rc) { on_connack(rc); };
        h.on_message = [this](const publish_packet& p) { on_message(p); };
        return h;
    }

    void on_connack(std::uint8_t rc) {
        if (rc != reason::success) {
            detail::log_to(log_, log_level::error,
                           "broker refused " + client_.options().client_id + ", reason " + std::to_string(rc));
            return;
        }
        if (subscribed_) return; // mqtt_client re-sends remembered subscriptions
        subscribed_ = true;
        std::vector<subscription_request> subs;
        identifier me(client_.options().client_id);
        for (const auto& [f, m] : machines_) {
            if (m.halted()) continue;
            subs.push_back({render(topic_path::job_request(f)), opts_.qos});
            subs.push_back({render(topic_path::for_client(channel::model_reply, f, me)), 1});
        }
        if (!subs.empty()) client_.subscribe(std::move(subs), now_);
    }

    void on_message(const publish_packet& p) {
        auto path = try_parse_topic(p.topic);
        if (!path) return;
        auto it = machines_.find(path->federation());
        if (it == machines_.end()) return;
        envelope env;
        try {
            env = decode_envelope(p.payload.span());
        } catch (const payload_error& e) {
            detail::log_to(log_, log_level::warn, "ignored undecodable message on " + p.topic + ": " + e.what());
            return;
        }
        if (path->chan() == channel::model_reply) {
            if (on_model_reply) on_model_reply(env);
            return;
        }
        if (path->chan() != channel::job_request) return;
        if ((env.kind != envelope_kind::model_template && env.kind != envelope_kind::global_model) ||
            env.fed != path->fed().str() || env.cep != path->cep().str()) {
            detail::log_to(log_, log_level::warn, "ignored unexpected envelope on " + p.topic);
            return;
        }
        try {
            auto params = decode_parameters(env.body);
            if (env.kind == envelope_kind::global_model) latest_.insert_or_assign(it->first, params);
            run(it->second, it->second.step(template_received{env.round, env.model_version, std::move(params)}));
        } catch (const payload_error& e) {
            detail::log_to(log_, log_level::warn, "ignored bad model on " + p.topic + ": " + e.what());
        }
    }

    void run(client_machine& m, const std::vector<client_action>& actions) {
        for (const auto& a : actions) {
            if (auto* t = std::get_if<train_action>(&a)) {
                train(m, *t);
            } else if (auto* pub = std::get_if<publish_action>(&a)) {
                detail::publish_envelope(client_, *pub, now_);
                if (opts_.leave_after_round && m.last_round() >= *opts_.leave_after_round)
                    run(m, m.step(client_leave{}));
            } else if (auto* u = std::get_if<unsubscribe_action>(&a)) {
                client_.unsubscribe({u->filter}, now_);
                detail::log_to(log_, log_level::info, client_.options().client_id + " left " + u->filter);
            } else if (auto* lg = std::get_if<log_action>(&a)) {
                detail::log_to(log_, detail::level_of(*lg), lg->text);
            }
        }
    }

    void train(client_machine& m, const train_action& t) {
        try {
            auto result = local_train(t.start, data_, opts_.local_epochs, opts_.learning_rate);
            ++trained_;
            run(m, m.step(training_done{t.round, std::move(result)}));
        } catch (const fl_error& e) {
            detail::log_to(log_, log_level::warn, std::string("training failed: ") + e.what());
        }
    }

    void send_request(const federation_ref& f, envelope_kind kind, std::uint32_t version, bytes body) {
        envelope e;
        e.kind = kind;
        e.fed = f.fed.str();
        e.cep = f.cep.str();
        e.client = client_.options().client_id;
        e.model_version = version;
        e.body = std::move(body);
        auto topic = render(topic_path::for_client(channel::model_request, f, identifier(e.client)));
        client_.publish(topic, byte_buffer(encode_envelope(e)), 1, false, now_);
    }

    agent_options opts_;
    dataset data_;
    log_sink log_;
    mqtt_client client_;
    std::map<federation_ref, client_machine> machines_;
    std::map<federation_ref, parameter_set> latest_;
    std::uint64_t trained_ = 0;
    bool subscribed_ = false;
    millis now_{0};
};

} // namespace fedmq

#endif // FEDMQ_NODES_HPP
