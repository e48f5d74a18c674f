#ifndef FEDMQ_SIM_NETWORK_HPP
#define FEDMQ_SIM_NETWORK_HPP

// Deterministic in-process network: a virtual clock, a broker_core and any
// number of client sessions joined by links with fixed latency and seeded
// packet loss. Nothing sleeps; a 30-round federation runs in milliseconds.

#include <functional>
#include <queue>
#include <random>
#include <unordered_map>
#include <vector>

#include "fedmq/broker.hpp"
#include "fedmq/client.hpp"

namespace fedmq {

class event_loop {
public:
    using task = std::function<void()>;

    millis now() const noexcept { return now_; }

    void at(millis t, task f) { events_.push({std::max(t, now_), seq_++, std::move(f)}); }
    void after(millis d, task f) { at(now_ + d, std::move(f)); }

    /// Runs `f` every `period`, starting one period from now, until `f`
    /// returns false.
    void every(millis period, std::function<bool()> f) {
        after(period, [this, period, f = std::move(f)]() mutable {
            if (f()) every(period, std::move(f));
        });
    }

    /// Processes events in (time, insertion) order until `done()` holds or
    /// the next event lies beyond `limit`. Returns done().
    bool run_until(const std::function<bool()>& done, millis limit) {
        while (!done()) {
            if (events_.empty() || events_.top().t > limit) return done();
            auto ev = events_.top();
            events_.pop();
            now_ = ev.t;
            ev.f();
        }
        return true;
    }

    void run_for(millis d) {
        auto end = now_ + d;
        run_until([] { return false; }, end);
        now_ = std::max(now_, end);
    }

private:
    struct event {
        millis t;
        std::uint64_t seq;
        task f;
        bool operator>(const event& o) const { return t != o.t ? t > o.t : seq > o.seq; }
    };

    std::priority_queue<event, std::vector<event>, std::greater<>> events_;
    millis now_{0};
    std::uint64_t seq_ = 0;
};

struct sim_link_options {
    millis latency{1};
    /// Probability that a PUBLISH, PUBACK, PUBREC, PUBREL or PUBCOMP is lost.
    double drop_rate = 0.0;
    std::uint64_t seed = 1;
};

struct sim_link_stats {
    std::uint64_t packets = 0;
    std::uint64_t bytes = 0;
    std::uint64_t dropped = 0;
};

/// Loss applies to the QoS data path only; losing CONNECT or SUBSCRIBE would
/// just test the retry timers of the control plane.
inline bool drop_eligible(const packet& p) {
    switch (type_of(p)) {
    case packet_type::publish:
    case packet_type::puback:
    case packet_type::pubrec:
    case packet_type::pubrel:
    case packet_type::pubcomp: return true;
    default: return false;
    }
}

class sim_network final : public connection_sink {
public:
    struct endpoint {
        std::function<void(const packet&)> receive;
        std::function<void()> closed;
    };

    sim_network(event_loop& loop, sim_link_options opts) : loop_(loop), opts_(opts), rng_(opts.seed) {}

    void attach(broker_core& b) { broker_ = &b; }

    conn_id open(endpoint ep) {
        auto c = next_++;
        conns_[c] = link{std::move(ep), true, true};
        broker_->on_open(c, loop_.now());
        return c;
    }

    void client_send(conn_id c, const packet& p) {
        auto it = conns_.find(c);
        if (it == conns_.end() || !it->second.client_open) return;
        if (lost(p)) return;
        loop_.after(opts_.latency, [this, c, p] {
            auto it = conns_.find(c);
            if (it != conns_.end() && it->second.broker_open) broker_->on_packet(c, p, loop_.now());
        });
    }

    void client_close(conn_id c) {
        auto it = conns_.find(c);
        if (it == conns_.end() || !it->second.client_open) return;
        it->second.client_open = false;
        loop_.after(opts_.latency, [this, c] {
            auto it = conns_.find(c);
            if (it == conns_.end()) return;
            if (it->second.broker_open) {
                it->second.broker_open = false;
                broker_->on_closed(c);
            }
            conns_.erase(it);
        });
    }

    /// Severs every link at once, as if the broker host vanished.
    void sever_all() {
        std::vector<conn_id> all;
        for (const auto& [c, l] : conns_) all.push_back(c);
        for (auto c : all) {
            auto& l = conns_.at(c);
            bool notify_client = l.client_open;
            l.client_open = false;
            if (l.broker_open) {
                l.broker_open = false;
                broker_->on_closed(c);
            }
            auto closed = l.ep.closed;
            conns_.erase(c);
            if (notify_client && closed) loop_.after(opts_.latency, closed);
        }
    }

    // connection_sink (broker side)

    void send(conn_id c, const packet& p) override {
        auto it = conns_.find(c);
        if (it == conns_.end() || !it->second.broker_open) return;
        if (lost(p)) return;
        loop_.after(opts_.latency, [this, c, p] {
            auto it = conns_.find(c);
            if (it != conns_.end() && it->second.client_open) it->second.ep.receive(p);
        });
    }

    void close(conn_id c) override {
        auto it = conns_.find(c);
        if (it == conns_.end() || !it->second.broker_open) return;
        it->second.broker_open = false;
        loop_.after(opts_.latency, [this, c] {
            auto it = conns_.find(c);
            if (it == conns_.end()) return;
            bool notify = it->second.client_open;
            auto closed = it->second.ep.closed;
            conns_.erase(it);
            if (notify && closed) closed();
        });
    }

    std::size_t backlog(conn_id) const override { return 0; }

    const sim_link_stats& stats() const noexcept { return stats_; }
    event_loop& loop() noexcept { return loop_; }

private:
    struct link {
        endpoint ep;
        bool client_open;
        bool broker_open;
    };

    bool lost(const packet& p) {
        ++stats_.packets;
        stats_.bytes += encoded_size(p);
        if (opts_.drop_rate > 0 && drop_eligible(p) && std::uniform_real_distribution<>(0, 1)(rng_) < opts_.drop_rate) {
            ++stats_.dropped;
            return true;
        }
        return false;
    }

    event_loop& loop_;
    sim_link_options opts_;
    std::mt19937_64 rng_;
    broker_core* broker_ = nullptr;
    std::unordered_map<conn_id, link> conns_;
    conn_id next_ = 1;
    sim_link_stats stats_;
};

/// Keeps one node connected to a sim_network, reconnecting with backoff
/// after any loss unless the broker refused the credentials.
template <typename Node>
class sim_attachment {
public:
    sim_attachment(sim_network& net, std::uint64_t seed) : net_(net), backoff_(seed) {}

    /// The node's send function should call this.
    void send(const packet& p) {
        if (conn_) net_.client_send(*conn_, p);
    }

    void bind(Node& node) { node_ = &node; }

    void connect() {
        auto& loop = net_.loop();
        conn_ = net_.open({[this, &loop](const packet& p) {
                               if (std::holds_alternative<connack_packet>(p) &&
                                   std::get<connack_packet>(p).reason_code == reason::success)
                                   backoff_.reset();
                               node_->on_packet(p, loop.now());
                           },
                           [this] { lost(); }});
        node_->start(loop.now());
    }

    /// Closes from the client side, without reconnecting.
    void disconnect() {
        stopped_ = true;
        if (conn_) net_.client_close(*conn_);
        conn_.reset();
    }

    bool connected() const noexcept { return conn_.has_value(); }
    std::uint64_t reconnects() const noexcept { return reconnects_; }

private:
    void lost() {
        conn_.reset();
        node_->on_connection_lost();
        if (stopped_ || node_->client().current_state() == mqtt_client::state::refused) return;
        ++reconnects_;
        net_.loop().after(backoff_.next(), [this] {
            if (!stopped_ && !conn_) connect();
        });
    }

    sim_network& net_;
    Node* node_ = nullptr;
    std::optional<conn_id> conn_;
    reconnect_backoff backoff_;
    bool stopped_ = false;
    std::uint64_t reconnects_ = 0;
};

} // namespace fedmq

#endif // FEDMQ_SIM_NETWORK_HPP
