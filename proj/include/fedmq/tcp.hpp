#ifndef FEDMQ_TCP_HPP
#define FEDMQ_TCP_HPP

// TCP transport. Every connection gets a reader thread (bytes -> packets)
// and a writer thread (queue -> socket). The broker's core and each node's
// control loop stay single-threaded: I/O threads only post closures into
// their inbox. A stream_wrapper hook lets a TLS layer slide in around the raw
// socket without touching anything above it.

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <functional>
#include <future>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <thread>

#include "fedmq/broker.hpp"
#include "fedmq/client.hpp"
#include "fedmq/config.hpp"

namespace fedmq {

struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class byte_stream {
public:
    virtual ~byte_stream() = default;
    /// Blocks for at least one byte; 0 means the peer closed. Throws io_error.
    virtual std::size_t read_some(std::span<std::uint8_t> buf) = 0;
    virtual void write_all(std::span<const std::uint8_t> data) = 0;
    /// Unblocks pending reads and writes; safe from any thread.
    virtual void shutdown() = 0;
};

using stream_wrapper = std::function<std::unique_ptr<byte_stream>(std::unique_ptr<byte_stream>)>;

class tcp_stream final : public byte_stream {
public:
    explicit tcp_stream(int fd) : fd_(fd) {
        int one = 1;
        ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    }
    ~tcp_stream() override { ::close(fd_); }
    tcp_stream(const tcp_stream&) = delete;
    tcp_stream& operator=(const tcp_stream&) = delete;

    std::size_t read_some(std::span<std::uint8_t> buf) override {
        for (;;) {
            auto n = ::recv(fd_, buf.data(), buf.size(), 0);
            if (n >= 0) return static_cast<std::size_t>(n);
            if (errno == EINTR) continue;
            throw io_error(std::string("recv: ") + std::strerror(errno));
        }
    }

    void write_all(std::span<const std::uint8_t> data) override {
        while (!data.empty()) {
            auto n = ::send(fd_, data.data(), data.size(), MSG_NOSIGNAL);
            if (n < 0) {
                if (errno == EINTR) continue;
                throw io_error(std::string("send: ") + std::strerror(errno));
            }
            data = data.subspan(static_cast<std::size_t>(n));
        }
    }

    void shutdown() override { ::shutdown(fd_, SHUT_RDWR); }

private:
    int fd_;
};

/// Resolves `host` and connects within `timeout`.
inline std::unique_ptr<tcp_stream> tcp_connect(const std::string& host, std::uint16_t port, millis timeout) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res); rc != 0)
        throw io_error("resolve " + host + ": " + ::gai_strerror(rc));
    std::unique_ptr<addrinfo, decltype(&::freeaddrinfo)> guard(res, ::freeaddrinfo);
    std::string last = "no addresses";
    for (auto* ai = res; ai; ai = ai->ai_next) {
        int fd = ::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol);
        if (fd < 0) continue;
        int flags = ::fcntl(fd, F_GETFL);
        ::fcntl(fd, F_SETFL, flags | O_NONBLOCK);
        int rc = ::connect(fd, ai->ai_addr, ai->ai_addrlen);
        if (rc < 0 && errno == EINPROGRESS) {
            pollfd p{fd, POLLOUT, 0};
            int ready = ::poll(&p, 1, static_cast<int>(timeout.count()));
            if (ready == 1) {
                int err = 0;
                socklen_t len = sizeof err;
                ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
                rc = err == 0 ? 0 : -1;
                errno = err;
            } else {
                if (ready == 0) errno = ETIMEDOUT;
                rc = -1;
            }
        }
        if (rc == 0) {
            ::fcntl(fd, F_SETFL, flags);
            return std::make_unique<tcp_stream>(fd);
        }
        last = std::strerror(errno);
        ::close(fd);
    }
    throw io_error("connect " + host + ":" + std::to_string(port) + ": " + last);
}

class tcp_listener {
public:
    tcp_listener(const std::string& host, std::uint16_t port) {
        fd_ = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
        if (fd_ < 0) throw io_error(std::string("socket: ") + std::strerror(errno));
        int one = 1;
        ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_port = htons(port);
        if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
            ::close(fd_);
            throw io_error("bind address must be IPv4: " + host);
        }
        if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 || ::listen(fd_, 128) < 0) {
            auto why = std::string(std::strerror(errno));
            ::close(fd_);
            throw io_error("bind " + host + ":" + std::to_string(port) + ": " + why);
        }
        socklen_t len = sizeof addr;
        ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
        port_ = ntohs(addr.sin_port);
    }
    ~tcp_listener() { ::close(fd_); }
    tcp_listener(const tcp_listener&) = delete;
    tcp_listener& operator=(const tcp_listener&) = delete;

    /// Blocks; nullptr once close() was called.
    std::unique_ptr<tcp_stream> accept() {
        for (;;) {
            int c = ::accept4(fd_, nullptr, nullptr, SOCK_CLOEXEC);
            if (c >= 0) return std::make_unique<tcp_stream>(c);
            if (closed_) return nullptr;
            if (errno == EINTR || errno == ECONNABORTED || errno == EMFILE || errno == ENFILE) {
                if (errno == EMFILE || errno == ENFILE) std::this_thread::sleep_for(millis(50));
                continue;
            }
            return nullptr;
        }
    }

    void close() {
        closed_ = true;
        ::shutdown(fd_, SHUT_RDWR);
    }

    std::uint16_t port() const noexcept { return port_; }

private:
    int fd_ = -1;
    std::uint16_t port_ = 0;
    std::atomic<bool> closed_{false};
};

// ---------------------------------------------------------------------------
// One framed connection

class stream_connection {
public:
    struct callbacks {
        std::function<void(packet)> on_packet;
        /// Malformed input; the connection is already shutting down.
        std::function<void(const std::string&)> on_error;
        /// Peer closed or the socket failed.
        std::function<void()> on_eof;
        /// Backlog fell below the drain threshold.
        std::function<void()> on_drained;
    };

    stream_connection(std::unique_ptr<byte_stream> s, std::size_t max_packet, callbacks cb,
                      std::size_t drain_threshold = 1 << 20)
        : stream_(std::move(s)), decoder_(max_packet), cb_(std::move(cb)), drain_threshold_(drain_threshold) {}

    ~stream_connection() {
        abort();
        join();
    }

    stream_connection(const stream_connection&) = delete;
    stream_connection& operator=(const stream_connection&) = delete;

    void start() {
        reader_ = std::thread([this] { read_loop(); });
        writer_ = std::thread([this] { write_loop(); });
    }

    void send(const packet& p) {
        auto data = encode_packet(p);
        std::lock_guard lock(mu_);
        if (closing_ || aborted_) return;
        backlog_ += data.size();
        queue_.push_back(std::move(data));
        cv_.notify_one();
    }

    /// Flushes what is queued, then shuts the socket.
    void close() {
        std::lock_guard lock(mu_);
        closing_ = true;
        cv_.notify_one();
    }

    void abort() {
        {
            std::lock_guard lock(mu_);
            aborted_ = true;
            cv_.notify_one();
        }
        stream_->shutdown();
    }

    std::size_t backlog() const noexcept { return backlog_.load(); }
    bool finished() const noexcept { return reader_done_ && writer_done_; }

    void join() {
        if (reader_.joinable()) reader_.join();
        if (writer_.joinable()) writer_.join();
    }

private:
    void read_loop() {
        std::vector<std::uint8_t> buf(64 * 1024);
        try {
            for (;;) {
                auto n = stream_->read_some(buf);
                if (n == 0) break;
                decoder_.feed(std::span(buf.data(), n));
                while (auto p = decoder_.next()) cb_.on_packet(std::move(*p));
            }
        } catch (const codec_error& e) {
            if (cb_.on_error) cb_.on_error(e.what());
            abort();
            reader_done_ = true;
            return;
        } catch (const io_error&) {
        }
        {
            std::lock_guard lock(mu_);
            closing_ = true;
            cv_.notify_one();
        }
        if (cb_.on_eof) cb_.on_eof();
        reader_done_ = true;
    }

    void write_loop() {
        for (;;) {
            bytes next;
            {
                std::unique_lock lock(mu_);
                cv_.wait(lock, [&] { return aborted_ || closing_ || !queue_.empty(); });
                if (aborted_ || queue_.empty()) break;
                next = std::move(queue_.front());
                queue_.pop_front();
            }
            try {
                stream_->write_all(next);
            } catch (const io_error&) {
                abort();
                break;
            }
            auto before = backlog_.fetch_sub(next.size());
            if (before >= drain_threshold_ && before - next.size() < drain_threshold_ && cb_.on_drained)
                cb_.on_drained();
        }
        stream_->shutdown();
        writer_done_ = true;
    }

    std::unique_ptr<byte_stream> stream_;
    stream_decoder decoder_;
    callbacks cb_;
    std::size_t drain_threshold_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<bytes> queue_;
    std::atomic<std::size_t> backlog_{0};
    bool closing_ = false;
    bool aborted_ = false;
    std::atomic<bool> reader_done_{false}, writer_done_{false};
    std::thread reader_, writer_;
};

// ---------------------------------------------------------------------------
// Inbox shared by the broker core loop and node control loops

class task_inbox {
public:
    void post(std::function<void()> f) {
        {
            std::lock_guard lock(mu_);
            tasks_.push_back(std::move(f));
        }
        cv_.notify_one();
    }

    /// Runs queued tasks, waiting up to `wait` for the first one.
    std::size_t run(millis wait) {
        std::deque<std::function<void()>> batch;
        {
            std::unique_lock lock(mu_);
            cv_.wait_for(lock, wait, [&] { return !tasks_.empty(); });
            batch.swap(tasks_);
        }
        for (auto& f : batch) f();
        return batch.size();
    }

    void wake() { cv_.notify_all(); }

private:
    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<std::function<void()>> tasks_;
};

inline millis steady_now() {
    return std::chrono::duration_cast<millis>(std::chrono::steady_clock::now().time_since_epoch());
}

// ---------------------------------------------------------------------------
// Broker server

class broker_server final : private connection_sink {
public:
    broker_server(broker_config cfg, std::shared_ptr<const credentials_store> creds, log_sink log = {},
                  stream_wrapper wrap = {})
        : cfg_(cfg), log_(std::move(log)), wrap_(std::move(wrap)), core_(cfg, std::move(creds), *this, log_) {}

    ~broker_server() { stop(millis(0)); }

    broker_server(const broker_server&) = delete;
    broker_server& operator=(const broker_server&) = delete;

    /// Binds (port 0 picks a free one) and starts the acceptor and core threads.
    void start(const std::string& host, std::uint16_t port) {
        listener_ = std::make_unique<tcp_listener>(host, port);
        running_ = true;
        core_running_ = true;
        core_thread_ = std::thread([this] { core_loop(); });
        acceptor_ = std::thread([this] { accept_loop(); });
    }

    std::uint16_t port() const { return listener_ ? listener_->port() : 0; }

    /// Stops accepting, lets outstanding QoS handshakes finish for up to
    /// `grace`, then closes everything.
    void stop(millis grace = millis(2'000)) {
        if (!running_.exchange(false)) return;
        listener_->close();
        if (acceptor_.joinable()) acceptor_.join();
        auto deadline = steady_now() + grace;
        while (steady_now() < deadline && call([](broker_core& c) { return c.total_inflight(); }) > 0)
            std::this_thread::sleep_for(millis(10));
        call([](broker_core& c) {
            c.shutdown();
            return 0;
        });
        stopping_ = true;
        inbox_.wake();
        if (core_thread_.joinable()) core_thread_.join();
        core_running_ = false;
        for (auto& [c, conn] : conns_) conn->close();
        for (auto& [c, conn] : conns_) conn->join();
        for (auto& conn : dying_) conn->join();
        conns_.clear();
        dying_.clear();
    }

    /// Runs `f` on the core thread and returns its result.
    template <typename F>
    auto call(F f) -> decltype(f(std::declval<broker_core&>())) {
        using R = decltype(f(std::declval<broker_core&>()));
        if (!core_running_ || std::this_thread::get_id() == core_thread_.get_id()) return f(core_);
        auto task = std::make_shared<std::packaged_task<R()>>([this, f] { return f(core_); });
        auto fut = task->get_future();
        inbox_.post([task] { (*task)(); });
        return fut.get();
    }

    broker_metrics metrics() {
        return call([](broker_core& c) { return c.metrics(); });
    }

    void update_credentials(std::shared_ptr<const credentials_store> creds) {
        call([creds](broker_core& c) {
            c.update_credentials(creds);
            return 0;
        });
    }

private:
    void accept_loop() {
        while (running_) {
            auto s = listener_->accept();
            if (!s) break;
            std::unique_ptr<byte_stream> stream = std::move(s);
            if (wrap_) {
                try {
                    stream = wrap_(std::move(stream));
                } catch (const std::exception& e) {
                    if (log_) log_(log_level::warn, std::string("stream wrapper rejected a connection: ") + e.what());
                    continue;
                }
            }
            auto c = next_id_++;
            auto conn = std::make_shared<stream_connection>(
                std::move(stream), cfg_.max_packet_size + 5,
                stream_connection::callbacks{
                    [this, c](packet p) {
                        inbox_.post([this, c, p = std::move(p)] { core_.on_packet(c, p, steady_now()); });
                    },
                    [this, c](const std::string& why) { inbox_.post([this, c, why] { core_.on_protocol_error(c, why); }); },
                    [this, c] { inbox_.post([this, c] { peer_closed(c); }); },
                    [this, c] { inbox_.post([this, c] { core_.on_writable(c, steady_now()); }); }},
                cfg_.backlog_limit);
            inbox_.post([this, c, conn] {
                conns_[c] = conn;
                conn->start();
                core_.on_open(c, steady_now());
            });
        }
    }

    void core_loop() {
        millis last_tick{0};
        while (!stopping_) {
            inbox_.run(millis(5));
            auto now = steady_now();
            if (now - last_tick >= millis(10)) {
                core_.tick(now);
                last_tick = now;
                reap();
            }
        }
        inbox_.run(millis(0));
    }

    void peer_closed(conn_id c) {
        core_.on_closed(c);
        retire(c);
    }

    void retire(conn_id c) {
        auto it = conns_.find(c);
        if (it == conns_.end()) return;
        it->second->close();
        dying_.push_back(it->second);
        conns_.erase(it);
    }

    void reap() {
        for (auto it = dying_.begin(); it != dying_.end();) {
            if ((*it)->finished()) {
                (*it)->join();
                it = dying_.erase(it);
            } else {
                ++it;
            }
        }
    }

    // connection_sink, called on the core thread only
    void send(conn_id c, const packet& p) override {
        auto it = conns_.find(c);
        if (it != conns_.end()) it->second->send(p);
    }
    void close(conn_id c) override { retire(c); }
    std::size_t backlog(conn_id c) const override {
        auto it = conns_.find(c);
        return it == conns_.end() ? 0 : it->second->backlog();
    }

    broker_config cfg_;
    log_sink log_;
    stream_wrapper wrap_;
    broker_core core_;
    std::unique_ptr<tcp_listener> listener_;
    task_inbox inbox_;
    std::atomic<bool> running_{false}, stopping_{false}, core_running_{false};
    std::thread core_thread_, acceptor_;
    std::atomic<conn_id> next_id_{1};
    std::map<conn_id, std::shared_ptr<stream_connection>> conns_;
    std::list<std::shared_ptr<stream_connection>> dying_;
};

// ---------------------------------------------------------------------------
// Node runner: keeps one ps_node / agent_node connected over TCP

enum class run_result { done, stopped, auth_failure };

template <typename Node>
class tcp_node_runner {
public:
    tcp_node_runner(endpoint_address broker, log_sink log = {}, stream_wrapper wrap = {},
                    std::uint64_t seed = std::random_device{}())
        : addr_(std::move(broker)), log_(std::move(log)), wrap_(std::move(wrap)), backoff_(seed) {}

    ~tcp_node_runner() { drop_connection(); }

    tcp_node_runner(const tcp_node_runner&) = delete;
    tcp_node_runner& operator=(const tcp_node_runner&) = delete;

    void bind(Node& n) { node_ = &n; }

    /// For the node's send function; control thread only.
    void send(const packet& p) {
        if (conn_) conn_->send(p);
    }

    /// Thread-safe: runs `f` on the control thread.
    void post(std::function<void()> f) { inbox_.post(std::move(f)); }
    void stop() {
        stop_ = true;
        inbox_.wake();
    }

    /// Control loop; returns when `done()` holds, stop() was called or the
    /// broker refused the credentials.
    run_result run(std::function<bool()> done = {}) {
        millis next_attempt{0};
        millis last_tick{0};
        while (!stop_) {
            auto now = steady_now();
            if (!conn_ && now >= next_attempt) {
                if (!connect(now)) next_attempt = now + backoff_.next();
            }
            inbox_.run(millis(5));
            now = steady_now();
            if (now - last_tick >= millis(10)) {
                node_->tick(now);
                last_tick = now;
            }
            if (node_->client().current_state() == mqtt_client::state::refused) {
                drop_connection();
                return run_result::auth_failure;
            }
            if (lost_) {
                lost_ = false;
                drop_connection();
                node_->on_connection_lost();
                auto d = backoff_.next();
                ++reconnects_;
                if (log_) log_(log_level::warn, "connection lost; reconnecting in " + std::to_string(d.count()) + " ms");
                next_attempt = steady_now() + d;
            }
            if (done && done()) {
                flush_and_close();
                return run_result::done;
            }
        }
        flush_and_close();
        return run_result::stopped;
    }

    std::uint64_t reconnects() const noexcept { return reconnects_; }
    bool connected() const noexcept { return conn_ != nullptr; }

private:
    bool connect(millis now) {
        try {
            std::unique_ptr<byte_stream> s = tcp_connect(addr_.host, addr_.port, millis(5'000));
            if (wrap_) s = wrap_(std::move(s));
            auto gen = ++generation_;
            conn_ = std::make_unique<stream_connection>(
                std::move(s), 1 + 4 + max_remaining_length,
                stream_connection::callbacks{
                    [this, gen](packet p) {
                        inbox_.post([this, gen, p = std::move(p)] {
                            if (gen != generation_) return;
                            if (std::holds_alternative<connack_packet>(p) &&
                                std::get<connack_packet>(p).reason_code == reason::success)
                                backoff_.reset();
                            node_->on_packet(p, steady_now());
                        });
                    },
                    [this, gen](const std::string& why) {
                        inbox_.post([this, gen, why] {
                            if (gen != generation_) return;
                            if (log_) log_(log_level::warn, "malformed data from broker: " + why);
                            lost_ = true;
                        });
                    },
                    [this, gen] {
                        inbox_.post([this, gen] {
                            if (gen == generation_) lost_ = true;
                        });
                    },
                    {}});
            conn_->start();
            node_->start(now);
            return true;
        } catch (const io_error& e) {
            if (log_) log_(log_level::warn, e.what());
            return false;
        }
    }

    void drop_connection() {
        if (!conn_) return;
        conn_->abort();
        conn_->join();
        conn_.reset();
    }

    void flush_and_close() {
        if (!conn_) return;
        if (node_->client().connected()) node_->client().disconnect(steady_now());
        conn_->close();
        conn_->join();
        conn_.reset();
    }

    endpoint_address addr_;
    log_sink log_;
    stream_wrapper wrap_;
    reconnect_backoff backoff_;
    Node* node_ = nullptr;
    task_inbox inbox_;
    std::unique_ptr<stream_connection> conn_;
    std::uint64_t generation_ = 0;
    bool lost_ = false;
    std::atomic<bool> stop_{false};
    std::uint64_t reconnects_ = 0;
};

} // namespace fedmq

#endif // FEDMQ_TCP_HPP
