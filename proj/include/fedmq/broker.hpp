#ifndef FEDMQ_BROKER_HPP
#define FEDMQ_BROKER_HPP

// Single-threaded broker core. Transports hand it decoded packets tagged with
// a connection id and the current time; it answers through a
// connection_sink. All session state lives here and is touched by one
// thread only.

#include <algorithm>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <variant>
#include <vector>

#include "fedmq/codec.hpp"
#include "fedmq/common.hpp"
#include "fedmq/credentials.hpp"
#include "fedmq/topic.hpp"

namespace fedmq {

using conn_id = std::uint64_t;

/// Outbound side of a transport.
class connection_sink {
public:
    virtual ~connection_sink() = default;
    virtual void send(conn_id c, const packet& p) = 0;
    /// Close after flushing anything already sent.
    virtual void close(conn_id c) = 0;
    /// Bytes accepted by send() but not yet written to the peer.
    virtual std::size_t backlog(conn_id c) const = 0;
};

struct broker_config {
    std::size_t max_queue_per_client = 1000;
    /// Largest packet accepted from a client; also bounds every queued message.
    std::uint32_t max_packet_size = 16 * 1024 * 1024;
    millis retry_interval{5'000};
    /// Transport backlog above which deliveries wait in the session queue.
    std::size_t backlog_limit = 1 << 20;
    millis connect_timeout{10'000};
};

/// Wire size of a publish without building it.
inline std::size_t publish_wire_size(std::string_view topic, std::uint8_t qos, std::size_t payload) {
    std::size_t rl = 2 + topic.size() + (qos ? 2 : 0) + payload;
    return 1 + remaining_length_size(static_cast<std::uint32_t>(std::min<std::size_t>(rl, max_remaining_length))) + rl;
}

// ---------------------------------------------------------------------------
// Topic trie

/// Subscription index keyed by topic level, with dedicated '+' and '#'
/// children, so matching costs O(depth) rather than O(subscribers).
class topic_trie {
public:
    void insert(const topic_filter& f, const std::string& client, std::uint8_t qos) {
        node* n = &root_;
        for (const auto& seg : f.segments()) n = n->child(seg);
        n->subscribers[client] = qos;
    }

    bool erase(const topic_filter& f, const std::string& client) {
        std::vector<std::pair<node*, std::string>> path;
        node* n = &root_;
        for (const auto& seg : f.segments()) {
            node* next = n->find(seg);
            if (!next) return false;
            path.emplace_back(n, seg);
            n = next;
        }
        bool removed = n->subscribers.erase(client) > 0;
        // prune empty branches bottom-up
        for (auto it = path.rbegin(); it != path.rend(); ++it) {
            node* child = it->first->find(it->second);
            if (!child->empty()) break;
            it->first->remove(it->second);
        }
        return removed;
    }

    /// client -> highest qos over all matching subscriptions.
    std::map<std::string, std::uint8_t> match(std::string_view topic) const {
        std::map<std::string, std::uint8_t> out;
        auto levels = split_topic(topic);
        collect(&root_, levels, 0, out);
        return out;
    }

    bool empty() const { return root_.empty(); }

private:
    struct node {
        std::map<std::string, std::unique_ptr<node>, std::less<>> literal;
        std::unique_ptr<node> plus, hash;
        std::map<std::string, std::uint8_t> subscribers;

        node* child(const std::string& seg) {
            auto& slot = seg == "+" ? plus : seg == "#" ? hash : literal[seg];
            if (!slot) slot = std::make_unique<node>();
            return slot.get();
        }
        node* find(const std::string& seg) const {
            if (seg == "+") return plus.get();
            if (seg == "#") return hash.get();
            auto it = literal.find(seg);
            return it == literal.end() ? nullptr : it->second.get();
        }
        void remove(const std::string& seg) {
            if (seg == "+") plus.reset();
            else if (seg == "#") hash.reset();
            else literal.erase(seg);
        }
        bool empty() const { return literal.empty() && !plus && !hash && subscribers.empty(); }
    };

    static void add(std::map<std::string, std::uint8_t>& out, const node& n) {
        for (const auto& [client, qos] : n.subscribers) {
            auto [it, inserted] = out.emplace(client, qos);
            if (!inserted) it->second = std::max(it->second, qos);
        }
    }

    static void collect(const node* n, const std::vector<std::string_view>& levels, std::size_t i,
                        std::map<std::string, std::uint8_t>& out) {
        if (n->hash) add(out, *n->hash); // '#' also matches the parent level
        if (i == levels.size()) {
            add(out, *n);
            return;
        }
        auto it = n->literal.find(levels[i]);
        if (it != n->literal.end()) collect(it->second.get(), levels, i + 1, out);
        if (n->plus) collect(n->plus.get(), levels, i + 1, out);
    }

    node root_;
};

// ---------------------------------------------------------------------------
// Metrics

struct broker_metrics {
    std::uint64_t connections_total = 0;
    std::uint64_t connections_active = 0;
    std::uint64_t auth_failures = 0;
    std::uint64_t acl_denied_publish = 0;
    std::uint64_t acl_denied_subscribe = 0;
    std::uint64_t protocol_errors = 0;
    std::uint64_t publishes_received = 0;
    std::uint64_t deliveries = 0;
    std::uint64_t retransmissions = 0;
    std::uint64_t drops_queue_full = 0;
    std::uint64_t drops_oversize = 0;
    std::uint64_t sessions_taken_over = 0;
    std::uint64_t queued_bytes_high_water = 0;

    /// Plain-text "name value" lines.
    std::string render() const {
        std::ostringstream o;
        o << "connections_total " << connections_total << '\n'
          << "connections_active " << connections_active << '\n'
          << "auth_failures " << auth_failures << '\n'
          << "acl_denied_publish " << acl_denied_publish << '\n'
          << "acl_denied_subscribe " << acl_denied_subscribe << '\n'
          << "protocol_errors " << protocol_errors << '\n'
          << "publishes_received " << publishes_received << '\n'
          << "deliveries " << deliveries << '\n'
          << "retransmissions " << retransmissions << '\n'
          << "drops_queue_full " << drops_queue_full << '\n'
          << "drops_oversize " << drops_oversize << '\n'
          << "sessions_taken_over " << sessions_taken_over << '\n'
          << "queued_bytes_high_water " << queued_bytes_high_water << '\n';
        return o.str();
    }
};

// ---------------------------------------------------------------------------
// Broker core

class broker_core {
public:
    enum class outbound_state { await_puback, await_pubrec, await_pubcomp };

    broker_core(broker_config cfg, std::shared_ptr<const credentials_store> creds, connection_sink& sink,
                log_sink log = {})
        : cfg_(cfg), creds_(std::move(creds)), sink_(sink), log_(std::move(log)) {}

    void on_open(conn_id c, millis now) {
        conns_[c] = connection{now, {}};
        ++metrics_.connections_total;
        ++metrics_.connections_active;
    }

    /// The transport saw the peer go away (or closed it on our request).
    void on_closed(conn_id c) {
        auto it = conns_.find(c);
        if (it == conns_.end()) return;
        if (!it->second.client.empty()) drop_session(it->second.client, c);
        conns_.erase(it);
        --metrics_.connections_active;
    }

    /// A malformed byte stream: counted, then closed.
    void on_protocol_error(conn_id c, const std::string& why) {
        ++metrics_.protocol_errors;
        log(log_level::warn, "connection " + std::to_string(c) + ": " + why);
        close(c);
    }

    void on_packet(conn_id c, const packet& p, millis now) {
        auto it = conns_.find(c);
        if (it == conns_.end()) return;
        auto& conn = it->second;
        if (conn.client.empty()) {
            if (auto* cp = std::get_if<connect_packet>(&p)) return handle_connect(c, *cp, now);
            // authentication gate: nothing but CONNECT before a successful CONNACK
            ++metrics_.protocol_errors;
            return close(c);
        }
        auto& s = *sessions_.at(conn.client);
        s.last_seen = now;
        std::visit([&](const auto& pkt) { handle(s, pkt, now); }, p);
    }

    /// The transport drained some backlog; queued deliveries may proceed.
    void on_writable(conn_id c, millis now) {
        auto it = conns_.find(c);
        if (it == conns_.end() || it->second.client.empty()) return;
        drain(*sessions_.at(it->second.client), now);
    }

    /// Retries, keep-alive and connect timeouts.
    void tick(millis now) {
        std::vector<conn_id> expired;
        for (const auto& [c, conn] : conns_)
            if (conn.client.empty() && now - conn.opened >= cfg_.connect_timeout) expired.push_back(c);
        for (auto c : expired) close(c);

        std::vector<conn_id> idle;
        for (auto& [id, sp] : sessions_) {
            auto& s = *sp;
            if (s.keep_alive.count() > 0 && now - s.last_seen > s.keep_alive * 3 / 2) {
                idle.push_back(s.conn);
                continue;
            }
            for (auto& [pid, out] : s.inflight) {
                if (now - out.sent_at < cfg_.retry_interval) continue;
                out.sent_at = now;
                ++metrics_.retransmissions;
                if (out.state == outbound_state::await_pubcomp) {
                    sink_.send(s.conn, pubrel_packet{pid});
                } else {
                    auto dup = out.pkt;
                    dup.dup = true;
                    sink_.send(s.conn, dup);
                }
            }
            drain(s, now);
        }
        for (auto c : idle) {
            log(log_level::info, "keep-alive expired on connection " + std::to_string(c));
            close(c);
        }
    }

    /// Swaps in reloaded credentials. Sessions of clients that are now
    /// missing or disabled are closed; others pick up their new ACL.
    void update_credentials(std::shared_ptr<const credentials_store> creds) {
        creds_ = std::move(creds);
        std::vector<conn_id> revoked;
        for (auto& [id, s] : sessions_) {
            const auto* c = creds_->find(id);
            if (!c || !c->enabled) revoked.push_back(s->conn);
            else s->acl = c->acl;
        }
        for (auto c : revoked) {
            send_disconnect(c, reason::not_authorized);
            close(c);
        }
    }

    /// Closes every connection (graceful shutdown).
    void shutdown() {
        std::vector<conn_id> all;
        for (const auto& [c, conn] : conns_) all.push_back(c);
        for (auto c : all) close(c);
    }

    const broker_metrics& metrics() const noexcept { return metrics_; }
    const broker_config& config() const noexcept { return cfg_; }
    std::size_t session_count() const noexcept { return sessions_.size(); }
    bool has_session(const std::string& client) const { return sessions_.count(client) > 0; }

    /// Unacknowledged outbound qos>0 deliveries over all sessions.
    std::size_t total_inflight() const {
        std::size_t n = 0;
        for (const auto& [id, s] : sessions_) n += s->inflight.size();
        return n;
    }

    std::size_t queued_bytes(const std::string& client) const {
        auto it = sessions_.find(client);
        return it == sessions_.end() ? 0 : it->second->queued_bytes;
    }

    std::size_t queue_length(const std::string& client) const {
        auto it = sessions_.find(client);
        return it == sessions_.end() ? 0 : it->second->queue.size();
    }

    std::size_t inflight(const std::string& client) const {
        auto it = sessions_.find(client);
        return it == sessions_.end() ? 0 : it->second->inflight.size();
    }

    /// Upper bound on per-session queued bytes.
    std::size_t queue_byte_bound() const {
        return cfg_.max_queue_per_client * static_cast<std::size_t>(cfg_.max_packet_size);
    }

private:
    struct outbound {
        publish_packet pkt;
        outbound_state state;
        millis sent_at;
    };

    struct session {
        std::string client_id;
        conn_id conn = 0;
        std::uint8_t level = 5;
        std::vector<acl_rule> acl;
        std::uint16_t receive_maximum = 65535;
        std::uint32_t max_packet_size = max_remaining_length;
        millis keep_alive{0};
        millis last_seen{0};
        std::map<std::string, std::pair<topic_filter, std::uint8_t>> subs;
        std::map<std::uint16_t, outbound> inflight;
        std::set<std::uint16_t> inbound_qos2;
        std::deque<publish_packet> queue;
        std::size_t queued_bytes = 0;
        std::uint16_t next_id = 1;
        std::deque<std::uint16_t> recently_completed;
    };

    struct connection {
        millis opened;
        std::string client; // empty until CONNECT succeeds
    };

    static constexpr std::size_t completed_ring = 64;

    void log(log_level l, const std::string& msg) {
        if (log_) log_(l, msg);
    }

    void close(conn_id c) {
        auto it = conns_.find(c);
        if (it == conns_.end()) return;
        sink_.close(c);
        on_closed(c);
    }

    void send_disconnect(conn_id c, std::uint8_t code) {
        auto it = conns_.find(c);
        if (it == conns_.end()) return;
        std::uint8_t level = 4;
        if (!it->second.client.empty()) level = sessions_.at(it->second.client)->level;
        // MQTT 3.1.1 has no server-sent DISCONNECT; the socket just closes.
        if (level == 5) sink_.send(c, disconnect_packet{code});
    }

    void drop_session(const std::string& client, conn_id c) {
        auto it = sessions_.find(client);
        if (it == sessions_.end() || it->second->conn != c) return;
        for (const auto& [text, sub] : it->second->subs) trie_.erase(sub.first, client);
        sessions_.erase(it);
    }

    // ---- connect

    void refuse(conn_id c, std::uint8_t level, std::uint8_t v5, std::uint8_t v4) {
        sink_.send(c, connack_packet{false, level == 5 ? v5 : v4});
        close(c);
    }

    void handle_connect(conn_id c, const connect_packet& cp, millis now) {
        const auto& o = cp.options;
        if (!is_valid_identifier(o.client_id)) {
            ++metrics_.auth_failures;
            return refuse(c, cp.protocol_level, reason::client_identifier_not_valid, 2);
        }
        const client_credentials* cred = nullptr;
        auto result = o.username && o.secret ? creds_->authenticate(*o.username, *o.secret, &cred)
                                             : auth_result::unknown_user;
        if (result == auth_result::disabled) {
            ++metrics_.auth_failures;
            log(log_level::warn, "refused disabled client " + o.client_id);
            return refuse(c, cp.protocol_level, reason::banned, 5);
        }
        if (result != auth_result::ok) {
            ++metrics_.auth_failures;
            log(log_level::warn, "bad credentials for client " + o.client_id);
            return refuse(c, cp.protocol_level, reason::bad_user_name_or_password, 4);
        }
        if (cred->client_id != o.client_id) {
            ++metrics_.auth_failures;
            log(log_level::warn, "user " + *o.username + " may not connect as " + o.client_id);
            return refuse(c, cp.protocol_level, reason::not_authorized, 5);
        }
        if (auto old = sessions_.find(o.client_id); old != sessions_.end()) {
            ++metrics_.sessions_taken_over;
            auto old_conn = old->second->conn;
            send_disconnect(old_conn, reason::session_taken_over);
            close(old_conn);
        }
        auto s = std::make_unique<session>();
        s->client_id = o.client_id;
        s->conn = c;
        s->level = cp.protocol_level;
        s->acl = cred->acl;
        s->receive_maximum = std::max<std::uint16_t>(o.receive_maximum, 1);
        s->max_packet_size = o.max_packet_size;
        s->keep_alive = std::chrono::seconds(o.keep_alive);
        s->last_seen = now;
        sessions_[o.client_id] = std::move(s);
        conns_[c].client = o.client_id;
        sink_.send(c, connack_packet{false, reason::success});
    }

    // ---- per-packet handlers

    void protocol_error(session& s, const std::string& why) {
        ++metrics_.protocol_errors;
        log(log_level::warn, s.client_id + ": " + why);
        auto c = s.conn;
        send_disconnect(c, reason::protocol_error);
        close(c);
    }

    void handle(session& s, const connect_packet&, millis) { protocol_error(s, "second CONNECT"); }

    template <typename P>
        requires(std::is_same_v<P, connack_packet> || std::is_same_v<P, suback_packet> ||
                 std::is_same_v<P, unsuback_packet> || std::is_same_v<P, pingresp_packet>)
    void handle(session& s, const P&, millis) {
        protocol_error(s, "server-only packet from client");
    }

    void handle(session& s, const pingreq_packet&, millis) { sink_.send(s.conn, pingresp_packet{}); }

    void handle(session& s, const disconnect_packet&, millis) { close(s.conn); }

    void handle(session& s, const publish_packet& p, millis now) {
        ++metrics_.publishes_received;
        if (!authorize(s.acl, acl_action::publish, p.topic)) {
            ++metrics_.acl_denied_publish;
            log(log_level::warn, s.client_id + " not authorized to publish on " + p.topic);
            auto c = s.conn;
            send_disconnect(c, reason::not_authorized);
            return close(c);
        }
        if (p.qos == 2) {
            auto id = *p.packet_id;
            bool fresh = s.inbound_qos2.insert(id).second;
            auto conn = s.conn;
            if (fresh) route(p, now);
            sink_.send(conn, pubrec_packet{id});
            return;
        }
        auto conn = s.conn;
        route(p, now);
        if (p.qos == 1) sink_.send(conn, puback_packet{*p.packet_id});
    }

    void handle(session& s, const pubrel_packet& p, millis) {
        s.inbound_qos2.erase(p.packet_id);
        sink_.send(s.conn, pubcomp_packet{p.packet_id});
    }

    bool recently_completed(const session& s, std::uint16_t id) const {
        return std::find(s.recently_completed.begin(), s.recently_completed.end(), id) != s.recently_completed.end();
    }

    void complete(session& s, std::uint16_t id, millis now) {
        s.inflight.erase(id);
        s.recently_completed.push_back(id);
        if (s.recently_completed.size() > completed_ring) s.recently_completed.pop_front();
        drain(s, now);
    }

    // Acks for ids completed a moment ago are duplicates caused by our own
    // retransmissions and are ignored; any other unknown id is a protocol error.
    void handle(session& s, const puback_packet& a, millis now) {
        auto it = s.inflight.find(a.packet_id);
        if (it != s.inflight.end() && it->second.state == outbound_state::await_puback) return complete(s, a.packet_id, now);
        if (it == s.inflight.end() && recently_completed(s, a.packet_id)) return;
        protocol_error(s, "PUBACK for unknown packet id " + std::to_string(a.packet_id));
    }

    void handle(session& s, const pubrec_packet& a, millis now) {
        auto it = s.inflight.find(a.packet_id);
        if (it != s.inflight.end() && it->second.state != outbound_state::await_puback) {
            it->second.state = outbound_state::await_pubcomp;
            it->second.sent_at = now;
            sink_.send(s.conn, pubrel_packet{a.packet_id});
            return;
        }
        if (it == s.inflight.end() && recently_completed(s, a.packet_id)) return;
        protocol_error(s, "PUBREC for unknown packet id " + std::to_string(a.packet_id));
    }

    void handle(session& s, const pubcomp_packet& a, millis now) {
        auto it = s.inflight.find(a.packet_id);
        if (it != s.inflight.end() && it->second.state == outbound_state::await_pubcomp)
            return complete(s, a.packet_id, now);
        if (it == s.inflight.end() && recently_completed(s, a.packet_id)) return;
        protocol_error(s, "PUBCOMP for unknown packet id " + std::to_string(a.packet_id));
    }

    void handle(session& s, const subscribe_packet& sp, millis now) {
        suback_packet ack{sp.packet_id, {}};
        std::vector<std::pair<topic_filter, std::uint8_t>> granted;
        for (const auto& req : sp.filters) {
            auto f = topic_filter::try_parse(req.filter);
            if (!f) {
                ack.reason_codes.push_back(s.level == 5 ? reason::topic_filter_invalid : reason::unspecified_error);
                continue;
            }
            if (!authorize_filter(s.acl, acl_action::subscribe, *f)) {
                ++metrics_.acl_denied_subscribe;
                log(log_level::info, s.client_id + " refused subscription " + req.filter);
                ack.reason_codes.push_back(s.level == 5 ? reason::not_authorized : reason::unspecified_error);
                continue;
            }
            std::uint8_t q = std::min<std::uint8_t>(req.qos, 2);
            s.subs.insert_or_assign(f->str(), std::make_pair(*f, q));
            trie_.insert(*f, s.client_id, q);
            ack.reason_codes.push_back(q);
            granted.emplace_back(*f, q);
        }
        sink_.send(s.conn, ack);
        for (const auto& [f, q] : granted)
            for (const auto& [topic, msg] : retained_)
                if (matches(f, topic)) deliver(s, msg, std::min(q, msg.qos), true, now);
    }

    void handle(session& s, const unsubscribe_packet& up, millis) {
        unsuback_packet ack{up.packet_id, {}};
        for (const auto& text : up.filters) {
            auto f = topic_filter::try_parse(text);
            bool removed = false;
            if (f) {
                auto it = s.subs.find(f->str());
                if (it != s.subs.end()) {
                    trie_.erase(it->second.first, s.client_id);
                    s.subs.erase(it);
                    removed = true;
                }
            }
            if (s.level == 5) ack.reason_codes.push_back(removed ? reason::success : reason::no_subscription_existed);
        }
        sink_.send(s.conn, ack);
    }

    // ---- routing

    // The latest payload on each job_request topic is retained so late
    // joiners get the current model; an empty retained payload clears it.
    void retain(const publish_packet& p) {
        auto path = try_parse_topic(p.topic);
        if (!path || path->chan() != channel::job_request) return;
        if (p.payload.empty()) {
            retained_.erase(p.topic);
            return;
        }
        publish_packet kept;
        kept.topic = p.topic;
        kept.qos = p.qos;
        kept.payload = p.payload;
        retained_[p.topic] = std::move(kept);
    }

    void route(const publish_packet& p, millis now) {
        if (p.retain) retain(p);
        for (const auto& [client, sub_qos] : trie_.match(p.topic)) {
            auto it = sessions_.find(client);
            if (it == sessions_.end()) continue;
            deliver(*it->second, p, std::min(p.qos, sub_qos), false, now);
        }
    }

    void deliver(session& s, const publish_packet& src, std::uint8_t qos, bool retained, millis now) {
        publish_packet out;
        out.topic = src.topic;
        out.qos = qos;
        out.retain = retained;
        out.payload = src.payload;
        auto size = publish_wire_size(out.topic, qos, out.payload.size());
        if (size > s.max_packet_size || size > cfg_.max_packet_size) {
            ++metrics_.drops_oversize;
            return;
        }
        if (s.queue.empty() && can_transmit(s, qos)) return transmit(s, std::move(out), now);
        s.queue.push_back(std::move(out));
        s.queued_bytes += size;
        while (s.queue.size() > cfg_.max_queue_per_client || s.queued_bytes > queue_byte_bound()) {
            const auto& old = s.queue.front();
            s.queued_bytes -= publish_wire_size(old.topic, old.qos, old.payload.size());
            s.queue.pop_front();
            ++metrics_.drops_queue_full;
        }
        metrics_.queued_bytes_high_water = std::max<std::uint64_t>(metrics_.queued_bytes_high_water, s.queued_bytes);
    }

    bool can_transmit(const session& s, std::uint8_t qos) const {
        if (sink_.backlog(s.conn) >= cfg_.backlog_limit) return false;
        return qos == 0 || s.inflight.size() < s.receive_maximum;
    }

    std::uint16_t allocate_id(session& s) {
        while (s.inflight.count(s.next_id) || recently_completed(s, s.next_id) || s.next_id == 0)
            s.next_id = static_cast<std::uint16_t>(s.next_id + 1);
        auto id = s.next_id;
        s.next_id = static_cast<std::uint16_t>(s.next_id + 1);
        return id;
    }

    void transmit(session& s, publish_packet p, millis now) {
        if (p.qos > 0) {
            p.packet_id = allocate_id(s);
            s.inflight.emplace(*p.packet_id,
                               outbound{p, p.qos == 1 ? outbound_state::await_puback : outbound_state::await_pubrec, now});
        }
        ++metrics_.deliveries;
        sink_.send(s.conn, p);
    }

    void drain(session& s, millis now) {
        while (!s.queue.empty() && can_transmit(s, s.queue.front().qos)) {
            auto p = std::move(s.queue.front());
            s.queue.pop_front();
            s.queued_bytes -= publish_wire_size(p.topic, p.qos, p.payload.size());
            transmit(s, std::move(p), now);
        }
    }

    broker_config cfg_;
    std::shared_ptr<const credentials_store> creds_;
    connection_sink& sink_;
    log_sink log_;
    std::unordered_map<conn_id, connection> conns_;
    std::map<std::string, std::unique_ptr<session>> sessions_;
    topic_trie trie_;
    std::map<std::string, publish_packet> retained_;
    broker_metrics metrics_;
};

} // namespace fedmq

#endif // FEDMQ_BROKER_HPP
