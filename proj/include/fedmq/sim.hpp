#ifndef FEDMQ_SIM_HPP
#define FEDMQ_SIM_HPP

// One-process federation: broker, parameter server and agents on a
// sim_network, driven by a scenario file. Produces a JSON-lines report and a
// CSV accuracy curve (formats in docs/file-formats.md).

#include <chrono>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedmq/config.hpp"
#include "fedmq/credentials.hpp"
#include "fedmq/nodes.hpp"
#include "fedmq/sim_network.hpp"

namespace fedmq {

struct scenario {
    std::string name = "scenario";
    federation_ref fed{identifier("sim"), identifier("default")};
    std::vector<std::string> clients;
    std::uint64_t seed = 1;
    sim_link_options link;
    round_config rounds;
    std::size_t samples = 200;
    std::size_t holdout = 500;
    std::size_t dim = 8;
    double separation = 5.0;
    double target_accuracy = 0.95;
    /// client -> leave after publishing this round
    std::map<std::string, std::uint32_t> leave_after;
    millis time_limit{24 * 3600 * 1000};

    static scenario from(const settings& s) {
        scenario sc;
        sc.name = s.str("scenario", "name", sc.name);
        auto feds = parse_federations(s.str("scenario", "federation", "sim/default"));
        if (feds.size() != 1) throw settings::invalid("scenario", "federation", "exactly one federation expected");
        sc.fed = feds.front();
        auto n = s.number<std::size_t>("scenario", "clients", 3, 1, 1000);
        for (std::size_t i = 1; i <= n; ++i) sc.clients.push_back("client-" + std::to_string(i));
        sc.seed = s.number<std::uint64_t>("scenario", "seed", sc.seed);
        sc.link.latency = millis(s.number<std::int64_t>("network", "latency_ms", 5, 0));
        sc.link.drop_rate = s.number<double>("network", "drop_rate", 0.0, 0.0, 0.95);
        sc.link.seed = s.number<std::uint64_t>("network", "seed", sc.seed);
        sc.rounds = rounds_from(s);
        sc.rounds.min_clients = s.number<std::uint32_t>("rounds", "min_clients", static_cast<std::uint32_t>(n), 1);
        sc.samples = s.number<std::size_t>("data", "samples", sc.samples, 1);
        sc.holdout = s.number<std::size_t>("data", "holdout", sc.holdout, 1);
        sc.dim = s.number<std::size_t>("data", "dim", sc.dim, 1, 100'000);
        sc.separation = s.number<double>("data", "separation", sc.separation);
        sc.target_accuracy = s.number<double>("scenario", "target_accuracy", sc.target_accuracy, 0.0, 1.0);
        sc.time_limit = millis(s.number<std::int64_t>("scenario", "time_limit_s", 24 * 3600, 1) * 1000);
        for (const auto& [k, v] : s.values()) {
            if (k.rfind("churn.", 0) != 0) continue;
            auto client = k.substr(6);
            if (std::find(sc.clients.begin(), sc.clients.end(), client) == sc.clients.end())
                throw settings::invalid("churn", client, "no such client");
            sc.leave_after[client] = s.number<std::uint32_t>("churn", client, std::nullopt, 1);
        }
        return sc;
    }

    static scenario load(const std::filesystem::path& p) { return from(settings::from_file(p)); }

    /// Client i (0-based) trains on seed + i; the held-out set joins every
    /// client's second sample stream.
    dataset client_data(std::size_t i) const { return synth_dataset(seed + i, samples, dim, separation, 0); }

    dataset holdout_data() const {
        std::vector<dataset> parts;
        for (std::size_t i = 0; i < clients.size(); ++i)
            parts.push_back(synth_dataset(seed + i, holdout, dim, separation, 1));
        return concat(parts);
    }
};

struct sim_round_row {
    std::uint32_t round = 0;
    std::uint32_t model_version = 0;
    std::vector<std::string> contributors;
    double accuracy = 0;
    double loss = 0;
    millis at{0};
    std::uint64_t messages = 0;
    std::uint64_t bytes = 0;
    std::uint64_t drops = 0;
};

struct sim_report {
    std::string scenario;
    std::vector<sim_round_row> rows;
    bool finished = false;
    std::uint32_t rounds_completed = 0;
    double final_accuracy = 0;
    std::optional<std::uint32_t> rounds_to_target;
    std::uint64_t messages = 0;
    std::uint64_t bytes = 0;
    std::uint64_t drops = 0;
    std::uint64_t stalls = 0;
    millis virtual_time{0};
    double wall_seconds = 0;
    broker_metrics broker;
    parameter_set final_model;
};

/// Broker, parameter server and agents for one scenario, wired to a
/// sim_network. run_sim() drives it to completion; tests poke at it directly.
class sim_federation {
public:
    static constexpr millis tick_period{10};

    sim_federation(scenario sc, const std::filesystem::path& store_dir, log_sink log = {})
        : sc_(std::move(sc)), log_(std::move(log)), net_(loop_, sc_.link), store_(store_dir),
          holdout_(sc_.holdout_data()) {
        constexpr std::uint32_t kdf_iterations = 1000; // throwaway credentials
        std::vector<federation_ref> feds{sc_.fed};
        auto creds = std::make_shared<credentials_store>();
        creds->add(credentials_store::make("ps", "ps", "ps-secret", canonical_ps_acl(feds), kdf_iterations));
        for (const auto& c : sc_.clients)
            creds->add(credentials_store::make(c, c, c + "-secret", canonical_client_acl(identifier(c), feds),
                                               kdf_iterations));
        creds_ = creds;
        bcfg_.retry_interval = millis(1'000);
        broker_ = std::make_unique<broker_core>(bcfg_, creds_, net_, log_);
        net_.attach(*broker_);

        client_config ccfg;
        ccfg.retry_interval = millis(1'000);

        ps_link_ = std::make_unique<sim_attachment<ps_node>>(net_, sc_.seed ^ 0x9e3779b97f4a7c15ULL);
        auto* pl = ps_link_.get();
        ps_ = std::make_unique<ps_node>(options("ps"), ccfg, feds, sc_.rounds, logistic_template(sc_.dim), store_,
                                        [pl](const packet& p) { pl->send(p); }, log_);
        pl->bind(*ps_);
        ps_->on_round = [this](const round_record& r) { record(r); };

        for (std::size_t i = 0; i < sc_.clients.size(); ++i) {
            const auto& id = sc_.clients[i];
            agent_options ao;
            ao.federations = feds;
            ao.local_epochs = sc_.rounds.local_epochs;
            ao.learning_rate = sc_.rounds.learning_rate;
            ao.qos = sc_.rounds.qos;
            if (auto it = sc_.leave_after.find(id); it != sc_.leave_after.end()) ao.leave_after_round = it->second;
            links_.push_back(std::make_unique<sim_attachment<agent_node>>(net_, sc_.seed + 1000 + i));
            auto* l = links_.back().get();
            agents_.push_back(std::make_unique<agent_node>(options(id), ccfg, ao, sc_.client_data(i),
                                                           [l](const packet& p) { l->send(p); }, log_));
            l->bind(*agents_.back());
        }
        report_.scenario = sc_.name;
    }

    sim_federation(const sim_federation&) = delete;
    sim_federation& operator=(const sim_federation&) = delete;

    /// Connects everyone and starts the periodic tick.
    void start() {
        // agents join first so the retained template is not needed on the
        // happy path; late joiners still get it from the broker
        for (auto& l : links_) l->connect();
        ps_link_->connect();
        loop_.every(tick_period, [this] {
            broker_->tick(loop_.now());
            ps_->tick(loop_.now());
            for (auto& a : agents_) a->tick(loop_.now());
            return true;
        });
    }

    bool run_until(const std::function<bool()>& done, millis limit) { return loop_.run_until(done, limit); }
    bool run_to_completion() {
        return loop_.run_until([this] { return ps_->finished(); }, sc_.time_limit);
    }

    /// Drops every connection and replaces the broker with a fresh one:
    /// sessions, subscriptions and retained messages are lost.
    void restart_broker() {
        net_.sever_all();
        broker_ = std::make_unique<broker_core>(bcfg_, creds_, net_, log_);
        net_.attach(*broker_);
    }

    sim_report report() const {
        auto r = report_;
        r.finished = ps_->finished();
        r.rounds_completed = static_cast<std::uint32_t>(r.rows.size());
        r.final_accuracy = r.rows.empty() ? accuracy(logistic_template(sc_.dim), holdout_) : r.rows.back().accuracy;
        r.messages = net_.stats().packets;
        r.bytes = net_.stats().bytes;
        r.drops = net_.stats().dropped;
        r.stalls = ps_->machine(sc_.fed).counters().stalls;
        r.virtual_time = loop_.now();
        r.broker = broker_->metrics();
        return r;
    }

    const scenario& config() const noexcept { return sc_; }
    event_loop& loop() noexcept { return loop_; }
    sim_network& network() noexcept { return net_; }
    broker_core& broker() noexcept { return *broker_; }
    ps_node& ps() noexcept { return *ps_; }
    agent_node& agent(std::size_t i) { return *agents_.at(i); }
    sim_attachment<agent_node>& agent_link(std::size_t i) { return *links_.at(i); }
    model_store& store() noexcept { return store_; }
    const dataset& holdout() const noexcept { return holdout_; }

private:
    static connect_options options(const std::string& id) {
        connect_options o;
        o.client_id = id;
        o.username = id;
        o.secret = to_bytes(id + "-secret");
        o.keep_alive = 0;
        return o;
    }

    void record(const round_record& r) {
        sim_round_row row;
        row.round = r.round;
        row.model_version = r.model_version;
        row.contributors = r.contributors;
        row.accuracy = accuracy(r.model, holdout_);
        row.loss = logistic_loss(r.model, holdout_);
        row.at = r.at;
        row.messages = net_.stats().packets;
        row.bytes = net_.stats().bytes;
        row.drops = net_.stats().dropped;
        if (!report_.rounds_to_target && row.accuracy >= sc_.target_accuracy) report_.rounds_to_target = r.round;
        report_.rows.push_back(std::move(row));
        report_.final_model = r.model;
    }

    scenario sc_;
    log_sink log_;
    event_loop loop_;
    sim_network net_;
    model_store store_;
    dataset holdout_;
    std::shared_ptr<const credentials_store> creds_;
    broker_config bcfg_;
    std::unique_ptr<broker_core> broker_;
    std::unique_ptr<sim_attachment<ps_node>> ps_link_;
    std::unique_ptr<ps_node> ps_;
    std::vector<std::unique_ptr<sim_attachment<agent_node>>> links_;
    std::vector<std::unique_ptr<agent_node>> agents_;
    sim_report report_;
};

inline sim_report run_sim(const scenario& sc, const std::filesystem::path& store_dir, const log_sink& log = {}) {
    auto started = std::chrono::steady_clock::now();
    sim_federation f(sc, store_dir, log);
    f.start();
    f.run_to_completion();
    auto r = f.report();
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return r;
}

// ---------------------------------------------------------------------------
// Output

/// One "round" record per aggregated round, then one "summary" record.
inline void write_report_jsonl(std::ostream& out, const sim_report& r) {
    for (const auto& row : r.rows) {
        nlohmann::json j{{"type", "round"},
                         {"scenario", r.scenario},
                         {"round", row.round},
                         {"model_version", row.model_version},
                         {"contributors", row.contributors},
                         {"accuracy", row.accuracy},
                         {"loss", row.loss},
                         {"virtual_ms", row.at.count()},
                         {"messages", row.messages},
                         {"bytes", row.bytes},
                         {"drops", row.drops}};
        out << j.dump() << '\n';
    }
    nlohmann::json s{{"type", "summary"},
                     {"scenario", r.scenario},
                     {"finished", r.finished},
                     {"rounds_completed", r.rounds_completed},
                     {"final_accuracy", r.final_accuracy},
                     {"rounds_to_target", r.rounds_to_target ? nlohmann::json(*r.rounds_to_target) : nlohmann::json()},
                     {"messages", r.messages},
                     {"bytes", r.bytes},
                     {"drops", r.drops},
                     {"stalls", r.stalls},
                     {"retransmissions", r.broker.retransmissions},
                     {"virtual_ms", r.virtual_time.count()},
                     {"wall_seconds", r.wall_seconds}};
    out << s.dump() << '\n';
}

inline void write_report_csv(std::ostream& out, const sim_report& r) {
    out << "round,model_version,contributors,accuracy,loss,virtual_ms,messages,bytes,drops\n";
    out.precision(17);
    for (const auto& row : r.rows) {
        out << row.round << ',' << row.model_version << ',' << row.contributors.size() << ',' << row.accuracy << ','
            << row.loss << ',' << row.at.count() << ',' << row.messages << ',' << row.bytes << ',' << row.drops
            << '\n';
    }
}

} // namespace fedmq

#endif // FEDMQ_SIM_HPP
