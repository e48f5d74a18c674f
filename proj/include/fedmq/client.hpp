#ifndef FEDMQ_CLIENT_HPP
#define FEDMQ_CLIENT_HPP

// Client side of the MQTT subset as an event-driven machine. The transport
// feeds it packets and time; it emits packets through a send function.
// Subscriptions are remembered and re-sent after every successful CONNACK
// because the broker only offers clean sessions.

#include <algorithm>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "fedmq/codec.hpp"
#include "fedmq/common.hpp"

namespace fedmq {

struct client_config {
    millis retry_interval{5'000};
    /// Unacknowledged qos>0 publishes allowed at once; the rest wait locally.
    std::uint16_t max_inflight = 64;
};

/// Exponential reconnect delay, 1 s doubling to 60 s, each draw jittered
/// into [d/2, d].
class reconnect_backoff {
public:
    explicit reconnect_backoff(std::uint64_t seed = std::random_device{}(), millis initial = millis(1'000),
                               millis max = millis(60'000))
        : rng_(seed), initial_(initial), max_(max), current_(initial) {}

    millis next() {
        auto d = current_;
        current_ = std::min(max_, current_ * 2);
        std::uniform_int_distribution<millis::rep> jitter(d.count() / 2, d.count());
        return millis(jitter(rng_));
    }

    void reset() { current_ = initial_; }

private:
    std::mt19937_64 rng_;
    millis initial_, max_, current_;
};

struct client_counters {
    std::uint64_t messages_delivered = 0;
    std::uint64_t duplicates_suppressed = 0;
    std::uint64_t retransmissions = 0;
    std::uint64_t publishes_sent = 0;
};

class mqtt_client {
public:
    enum class state { idle, connecting, connected, refused, closed };

    struct handlers {
        std::function<void(const publish_packet&)> on_message;
        std::function<void(std::uint8_t)> on_connack;
        std::function<void(std::uint16_t, const std::vector<std::uint8_t>&)> on_suback;
        std::function<void(std::uint16_t)> on_unsuback;
        std::function<void()> on_pingresp;
        std::function<void(std::optional<std::uint8_t>)> on_disconnect;
    };

    using send_fn = std::function<void(const packet&)>;

    mqtt_client(connect_options opts, client_config cfg, send_fn send, handlers h, std::uint8_t level = 5)
        : opts_(std::move(opts)), cfg_(cfg), send_(std::move(send)), h_(std::move(h)), level_(level) {}

    /// Sends CONNECT on a fresh connection. Unfinished qos>0 publishes from a
    /// previous connection are queued again.
    void start(millis now) {
        for (auto& [id, o] : inflight_)
            if (o.state != out_state::await_pubcomp) {
                auto p = o.pkt;
                p.dup = false;
                p.packet_id.reset();
                requeue_.push_back(std::move(p));
            }
        inflight_.clear();
        control_.clear();
        inbound_qos2_.clear();
        queue_.insert(queue_.begin(), requeue_.begin(), requeue_.end());
        requeue_.clear();
        state_ = state::connecting;
        send(connect_packet{level_, true, opts_}, now);
    }

    void on_packet(const packet& p, millis now) {
        std::visit([&](const auto& pkt) { handle(pkt, now); }, p);
    }

    /// The transport lost the connection.
    void on_connection_lost() {
        if (state_ != state::refused) state_ = state::closed;
    }

    std::uint16_t subscribe(std::vector<subscription_request> filters, millis now) {
        for (const auto& f : filters) subscriptions_[f.filter] = f.qos;
        if (state_ != state::connected) return 0;
        return send_control(subscribe_packet{0, std::move(filters)}, now);
    }

    std::uint16_t unsubscribe(std::vector<std::string> filters, millis now) {
        for (const auto& f : filters) subscriptions_.erase(f);
        if (state_ != state::connected) return 0;
        return send_control(unsubscribe_packet{0, std::move(filters)}, now);
    }

    void publish(std::string topic, byte_buffer payload, std::uint8_t qos, bool retain, millis now) {
        publish_packet p;
        p.topic = std::move(topic);
        p.payload = std::move(payload);
        p.qos = qos;
        p.retain = retain;
        queue_.push_back(std::move(p));
        flush(now);
    }

    void ping(millis now) {
        if (state_ == state::connected) send(pingreq_packet{}, now);
    }

    void disconnect(millis now) {
        if (state_ == state::connected || state_ == state::connecting) send(disconnect_packet{}, now);
        state_ = state::closed;
    }

    void tick(millis now) {
        if (state_ != state::connected) return;
        for (auto& [id, o] : inflight_) {
            if (now - o.sent_at < cfg_.retry_interval) continue;
            o.sent_at = now;
            ++counters_.retransmissions;
            if (o.state == out_state::await_pubcomp) {
                send(pubrel_packet{id}, now);
            } else {
                auto dup = o.pkt;
                dup.dup = true;
                send(dup, now);
            }
        }
        for (auto& [id, c] : control_) {
            if (now - c.sent_at < cfg_.retry_interval) continue;
            c.sent_at = now;
            ++counters_.retransmissions;
            send(c.pkt, now);
        }
        if (opts_.keep_alive > 0 && now - last_sent_ >= std::chrono::seconds(opts_.keep_alive)) ping(now);
    }

    state current_state() const noexcept { return state_; }
    bool connected() const noexcept { return state_ == state::connected; }
    const client_counters& counters() const noexcept { return counters_; }
    const connect_options& options() const noexcept { return opts_; }
    /// Publishes not yet fully acknowledged (inflight or waiting).
    std::size_t pending_publishes() const noexcept { return inflight_.size() + queue_.size(); }
    const std::map<std::string, std::uint8_t>& subscriptions() const noexcept { return subscriptions_; }

private:
    enum class out_state { await_puback, await_pubrec, await_pubcomp };

    struct outbound {
        publish_packet pkt;
        out_state state;
        millis sent_at;
    };

    struct control {
        packet pkt;
        millis sent_at;
    };

    void send(const packet& p, millis now) {
        last_sent_ = now;
        send_(p);
    }

    std::uint16_t allocate_id() {
        for (;;) {
            auto id = next_id_;
            next_id_ = static_cast<std::uint16_t>(next_id_ == 0xFFFF ? 1 : next_id_ + 1);
            if (!inflight_.count(id) && !control_.count(id)) return id;
        }
    }

    template <typename P>
    std::uint16_t send_control(P pkt, millis now) {
        pkt.packet_id = allocate_id();
        control_[pkt.packet_id] = control{pkt, now};
        send(pkt, now);
        return pkt.packet_id;
    }

    void flush(millis now) {
        if (state_ != state::connected) return;
        while (!queue_.empty()) {
            auto& front = queue_.front();
            if (front.qos > 0 && inflight_.size() >= cfg_.max_inflight) return;
            auto p = std::move(front);
            queue_.pop_front();
            if (p.qos > 0) {
                p.packet_id = allocate_id();
                inflight_.emplace(*p.packet_id, outbound{p, p.qos == 1 ? out_state::await_puback : out_state::await_pubrec,
                                                         now});
            }
            ++counters_.publishes_sent;
            send(p, now);
        }
    }

    void handle(const connack_packet& a, millis now) {
        if (a.reason_code != reason::success) {
            state_ = state::refused;
            if (h_.on_connack) h_.on_connack(a.reason_code);
            return;
        }
        state_ = state::connected;
        if (!subscriptions_.empty()) {
            std::vector<subscription_request> all;
            for (const auto& [f, q] : subscriptions_) all.push_back({f, q});
            send_control(subscribe_packet{0, std::move(all)}, now);
        }
        if (h_.on_connack) h_.on_connack(a.reason_code);
        flush(now);
    }

    void handle(const publish_packet& p, millis now) {
        if (p.qos == 2) {
            auto id = *p.packet_id;
            bool fresh = inbound_qos2_.insert(id).second;
            send(pubrec_packet{id}, now);
            if (!fresh) {
                ++counters_.duplicates_suppressed;
                return;
            }
        } else if (p.qos == 1) {
            send(puback_packet{*p.packet_id}, now);
        }
        ++counters_.messages_delivered;
        if (h_.on_message) h_.on_message(p);
    }

    void handle(const puback_packet& a, millis now) {
        auto it = inflight_.find(a.packet_id);
        if (it == inflight_.end() || it->second.state != out_state::await_puback) return;
        inflight_.erase(it);
        flush(now);
    }

    void handle(const pubrec_packet& a, millis now) {
        auto it = inflight_.find(a.packet_id);
        if (it == inflight_.end()) return;
        it->second.state = out_state::await_pubcomp;
        it->second.sent_at = now;
        send(pubrel_packet{a.packet_id}, now);
    }

    void handle(const pubrel_packet& a, millis now) {
        inbound_qos2_.erase(a.packet_id);
        send(pubcomp_packet{a.packet_id}, now);
    }

    void handle(const pubcomp_packet& a, millis now) {
        auto it = inflight_.find(a.packet_id);
        if (it == inflight_.end() || it->second.state != out_state::await_pubcomp) return;
        inflight_.erase(it);
        flush(now);
    }

    void handle(const suback_packet& a, millis) {
        if (!control_.erase(a.packet_id)) return;
        if (h_.on_suback) h_.on_suback(a.packet_id, a.reason_codes);
    }

    void handle(const unsuback_packet& a, millis) {
        if (!control_.erase(a.packet_id)) return;
        if (h_.on_unsuback) h_.on_unsuback(a.packet_id);
    }

    void handle(const pingresp_packet&, millis) {
        if (h_.on_pingresp) h_.on_pingresp();
    }

    void handle(const disconnect_packet& d, millis) {
        state_ = state::closed;
        if (h_.on_disconnect) h_.on_disconnect(d.reason_code);
    }

    // Server-bound packets arriving at a client are ignored.
    template <typename P>
    void handle(const P&, millis) {}

    connect_options opts_;
    client_config cfg_;
    send_fn send_;
    handlers h_;
    std::uint8_t level_;
    state state_ = state::idle;
    std::map<std::string, std::uint8_t> subscriptions_;
    std::map<std::uint16_t, outbound> inflight_;
    std::map<std::uint16_t, control> control_;
    std::set<std::uint16_t> inbound_qos2_;
    std::deque<publish_packet> queue_;
    std::vector<publish_packet> requeue_;
    std::uint16_t next_id_ = 1;
    millis last_sent_{0};
    client_counters counters_;
};

} // namespace fedmq

#endif // FEDMQ_CLIENT_HPP
