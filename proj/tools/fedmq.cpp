// fedmq: broker, parameter server, agent, admin and simulator entry points.
//
// Exit codes: 0 ok, 1 runtime failure (including refused credentials),
// 2 configuration error, 3 admin conflict (duplicate or unknown client).

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <csignal>
#include <fstream>
#include <iostream>
#include <thread>

#include "fedmq/config.hpp"
#include "fedmq/credentials.hpp"
#include "fedmq/model_store.hpp"
#include "fedmq/nodes.hpp"
#include "fedmq/sim.hpp"
#include "fedmq/tcp.hpp"

using namespace fedmq;
namespace fs = std::filesystem;

namespace {

enum exit_code : int { ok = 0, runtime_failure = 1, config_failure = 2, admin_conflict = 3 };

struct cli_failure : std::runtime_error {
    cli_failure(int code, const std::string& what) : std::runtime_error(what), code(code) {}
    int code;
};

spdlog::level::level_enum to_spdlog(log_level l) {
    switch (l) {
    case log_level::debug: return spdlog::level::debug;
    case log_level::info: return spdlog::level::info;
    case log_level::warn: return spdlog::level::warn;
    case log_level::error: return spdlog::level::err;
    }
    return spdlog::level::info;
}

log_sink make_log(log_level level) {
    spdlog::set_level(to_spdlog(level));
    return [](log_level l, const std::string& msg) { spdlog::log(to_spdlog(l), msg); };
}

// Signals are blocked in every thread and collected synchronously.
class signal_waiter {
public:
    signal_waiter() {
        sigemptyset(&set_);
        for (int s : {SIGINT, SIGTERM, SIGHUP, SIGUSR1}) sigaddset(&set_, s);
        pthread_sigmask(SIG_BLOCK, &set_, nullptr);
    }

    /// The signal received within `timeout`, or 0.
    int wait(millis timeout) const {
        timespec ts{static_cast<time_t>(timeout.count() / 1000), static_cast<long>(timeout.count() % 1000) * 1'000'000};
        int s = sigtimedwait(&set_, nullptr, &ts);
        return s < 0 ? 0 : s;
    }

private:
    sigset_t set_{};
};

struct common_flags {
    std::string config;
    std::string log_level;
};

/// File, then FEDMQ_* environment, then flags.
settings load_settings(const std::string& path, const std::map<std::string, std::string>& flag_overrides) {
    auto s = settings::from_file(path);
    s.apply_environment();
    for (const auto& [k, v] : flag_overrides) {
        auto dot = k.find('.');
        s.set(k.substr(0, dot), k.substr(dot + 1), v);
    }
    return s;
}

void write_text_atomic(const fs::path& p, const std::string& text) {
    auto tmp = p;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        out << text;
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
    }
    fs::rename(tmp, p);
}

std::optional<fs::file_time_type> mtime(const fs::path& p) {
    std::error_code ec;
    auto t = fs::last_write_time(p, ec);
    if (ec) return std::nullopt;
    return t;
}

// ---------------------------------------------------------------------------
// broker

int run_broker(const common_flags& f, std::optional<std::uint16_t> port, const signal_waiter& signals) {
    std::map<std::string, std::string> over;
    if (port) over["broker.port"] = std::to_string(*port);
    if (!f.log_level.empty()) over["broker.log_level"] = f.log_level;
    auto bs = broker_settings::from(load_settings(f.config, over));
    auto log = make_log(bs.level);

    auto load_creds = [&] {
        return std::make_shared<const credentials_store>(credentials_store::load(bs.credentials, bs.acl));
    };
    auto creds = load_creds();
    auto stamp = std::pair{mtime(bs.credentials), mtime(bs.acl)};

    broker_server server(bs.core, creds, log);
    try {
        server.start(bs.bind, bs.port);
    } catch (const io_error& e) {
        throw cli_failure(runtime_failure, e.what());
    }
    spdlog::info("broker listening on {}:{} ({} clients enrolled)", bs.bind, server.port(), creds->clients().size());

    auto dump_metrics = [&] {
        if (!bs.metrics_file) return;
        try {
            write_text_atomic(*bs.metrics_file, server.metrics().render());
        } catch (const std::exception& e) {
            spdlog::warn("metrics: {}", e.what());
        }
    };
    auto reload = [&](bool forced) {
        auto now = std::pair{mtime(bs.credentials), mtime(bs.acl)};
        if (!forced && now == stamp) return;
        stamp = now;
        try {
            server.update_credentials(load_creds());
            spdlog::info("reloaded credentials and ACL");
        } catch (const credentials_error& e) {
            spdlog::error("keeping previous credentials: {}", e.what());
        }
    };

    auto last_periodic = steady_now();
    for (;;) {
        int sig = signals.wait(millis(200));
        if (sig == SIGINT || sig == SIGTERM) break;
        if (sig == SIGUSR1) dump_metrics();
        if (sig == SIGHUP) reload(true);
        if (steady_now() - last_periodic >= millis(1'000)) {
            last_periodic = steady_now();
            dump_metrics();
            reload(false);
        }
    }
    spdlog::info("shutting down");
    server.stop(millis(5'000));
    dump_metrics();
    return ok;
}

// ---------------------------------------------------------------------------
// ps / agent

client_config node_client_config() {
    client_config c;
    c.retry_interval = millis(5'000);
    return c;
}

int finish(run_result r, const std::string& who) {
    switch (r) {
    case run_result::auth_failure:
        spdlog::error("{}: broker refused the credentials", who);
        return runtime_failure;
    case run_result::stopped: spdlog::info("{}: stopped", who); return ok;
    case run_result::done: spdlog::info("{}: finished", who); return ok;
    }
    return ok;
}

int run_ps(const common_flags& f, const signal_waiter& signals) {
    std::map<std::string, std::string> over;
    if (!f.log_level.empty()) over["node.log_level"] = f.log_level;
    auto s = load_settings(f.config, over);
    auto nc = node_config::from(s);
    auto rounds = rounds_from(s);
    auto dim = s.number<std::size_t>("data", "dim", 8, 1, 1'000'000);
    auto log = make_log(nc.level);
    model_store store(s.str("store", "dir"));

    tcp_node_runner<ps_node> runner(nc.broker, log);
    ps_node node(nc.connect(), node_client_config(), nc.federations, rounds, logistic_template(dim), store,
                 [&](const packet& p) { runner.send(p); }, log);
    node.on_round = [](const round_record& r) {
        spdlog::info("{}/{} round {} stored as version {} ({} contributors)", r.fed.fed.str(), r.fed.cep.str(),
                     r.round, r.model_version, r.contributors.size());
    };
    runner.bind(node);

    std::atomic<bool> done{false};
    std::thread watcher([&] {
        while (!done) {
            int sig = signals.wait(millis(100));
            if (sig == SIGINT || sig == SIGTERM) {
                runner.stop();
                return;
            }
        }
    });
    auto r = runner.run([&] { return node.finished(); });
    done = true;
    watcher.join();
    return finish(r, nc.client_id);
}

int run_agent(const common_flags& f, const signal_waiter& signals) {
    std::map<std::string, std::string> over;
    if (!f.log_level.empty()) over["node.log_level"] = f.log_level;
    auto s = load_settings(f.config, over);
    auto nc = node_config::from(s);
    auto rounds = rounds_from(s);
    auto data = data_config::from(s);
    auto log = make_log(nc.level);

    agent_options ao;
    ao.federations = nc.federations;
    ao.local_epochs = rounds.local_epochs;
    ao.learning_rate = rounds.learning_rate;
    ao.qos = rounds.qos;
    if (s.has("agent", "leave_after_round")) ao.leave_after_round = s.number<std::uint32_t>("agent", "leave_after_round");

    tcp_node_runner<agent_node> runner(nc.broker, log);
    agent_node node(nc.connect(), node_client_config(), ao, data.generate(), [&](const packet& p) { runner.send(p); },
                    log);
    runner.bind(node);

    // first signal: leave every federation and exit once that is flushed;
    // a second one stops at once
    std::atomic<bool> done{false};
    std::thread watcher([&] {
        bool leaving = false;
        while (!done) {
            int sig = signals.wait(millis(100));
            if (sig != SIGINT && sig != SIGTERM) continue;
            if (leaving) {
                runner.stop();
                return;
            }
            leaving = true;
            runner.post([&] {
                spdlog::info("leaving all federations");
                for (const auto& fr : ao.federations) node.leave(fr, steady_now());
            });
        }
    });
    auto r = runner.run([&] { return node.halted() && node.client().pending_publishes() == 0; });
    done = true;
    watcher.join();
    spdlog::info("{} trained {} rounds", nc.client_id, node.rounds_trained());
    return finish(r, nc.client_id);
}

// ---------------------------------------------------------------------------
// admin

struct admin_files {
    fs::path credentials, acl;
    std::optional<fs::path> metrics;
    std::optional<fs::path> store;
};

admin_files admin_paths(const common_flags& f) {
    auto s = load_settings(f.config, {});
    admin_files a;
    a.credentials = s.str("broker", "credentials");
    a.acl = s.str("broker", "acl");
    if (s.has("broker", "metrics_file")) a.metrics = s.str("broker", "metrics_file");
    if (s.has("store", "dir")) a.store = s.str("store", "dir");
    return a;
}

credentials_store load_or_empty(const admin_files& a) {
    if (!fs::exists(a.credentials) && !fs::exists(a.acl)) return {};
    return credentials_store::load(a.credentials, a.acl);
}

federation_ref federation_arg(const std::string& fed, const std::string& cep) {
    auto f = identifier::make(fed);
    auto c = identifier::make(cep);
    if (!f || !c) throw cli_failure(config_failure, "invalid federation '" + fed + "/" + cep + "'");
    return {*f, *c};
}

int admin_enroll(const common_flags& f, const std::string& id, const std::string& fed, const std::string& cep,
                 const std::string& role) {
    auto a = admin_paths(f);
    auto store = load_or_empty(a);
    if (!is_valid_identifier(id)) throw cli_failure(config_failure, "invalid client id '" + id + "'");
    std::vector<federation_ref> feds{federation_arg(fed, cep)};
    auto acl = role == "ps" ? canonical_ps_acl(feds) : canonical_client_acl(identifier(id), feds);
    auto secret = to_hex(random_bytes(24));
    store.add(credentials_store::make(id, id, secret, std::move(acl)));
    store.save(a.credentials, a.acl);
    std::cout << "client_id: " << id << "\nusername: " << id << "\nsecret: " << secret << "\nrole: " << role
              << "\nfederations: " << fed << "/" << cep << "\n";
    std::cerr << "the secret is shown once; store it in the node's secret_file\n";
    return ok;
}

int admin_revoke(const common_flags& f, const std::string& id) {
    auto a = admin_paths(f);
    auto store = credentials_store::load(a.credentials, a.acl);
    store.set_enabled(id, false);
    store.save(a.credentials, a.acl);
    std::cout << "revoked " << id << "\n";
    return ok;
}

int admin_models(const common_flags& f, const std::string& fed, const std::string& cep) {
    auto a = admin_paths(f);
    if (!a.store) throw config_error(config_errc::missing_key, "missing [store] dir");
    auto fr = federation_arg(fed, cep);
    model_store store(*a.store, model_store::unix_seconds, model_store::mode::read_only);
    std::cout << store.describe(fr.fed, fr.cep);
    return ok;
}

int admin_metrics(const common_flags& f) {
    auto a = admin_paths(f);
    if (!a.metrics) throw config_error(config_errc::missing_key, "missing [broker] metrics_file");
    std::ifstream in(*a.metrics);
    if (!in) throw cli_failure(runtime_failure, "no metrics at " + a.metrics->string() + " (is the broker running?)");
    std::cout << in.rdbuf();
    return ok;
}

// ---------------------------------------------------------------------------
// sim

int run_simulation(const std::string& scenario_path, std::string out_prefix, std::string store_dir,
                   const std::string& level) {
    auto sc = scenario::load(scenario_path);
    auto log = make_log(level.empty() ? log_level::warn : parse_log_level(level));
    if (out_prefix.empty()) out_prefix = sc.name;
    if (store_dir.empty()) store_dir = out_prefix + "-store";
    if (fs::exists(store_dir) && !fs::is_empty(store_dir))
        throw cli_failure(config_failure, "store directory " + store_dir + " is not empty");
    auto r = run_sim(sc, store_dir, log);
    {
        std::ofstream jsonl(out_prefix + ".jsonl");
        write_report_jsonl(jsonl, r);
        std::ofstream csv(out_prefix + ".csv");
        write_report_csv(csv, r);
        if (!jsonl || !csv) throw cli_failure(runtime_failure, "cannot write report " + out_prefix + ".*");
    }
    std::cout << "scenario " << sc.name << ": " << r.rounds_completed << " rounds, final accuracy " << r.final_accuracy
              << ", rounds to target "
              << (r.rounds_to_target ? std::to_string(*r.rounds_to_target) : std::string("never")) << ", "
              << r.messages << " messages, " << r.bytes << " bytes, " << r.drops << " drops, "
              << r.wall_seconds << " s\n"
              << "report: " << out_prefix << ".jsonl, " << out_prefix << ".csv\n";
    return r.finished ? ok : runtime_failure;
}

} // namespace

int main(int argc, char** argv) {
    signal_waiter signals; // before any thread exists
    auto console = spdlog::stderr_color_mt("fedmq");
    spdlog::set_default_logger(console);

    CLI::App app{"fedmq: MQTT broker and federated learning nodes"};
    app.require_subcommand(1);
    common_flags flags;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", flags.config, "configuration file")->required()->check(CLI::ExistingFile);
        sub->add_option("--log-level", flags.log_level, "debug, info, warn or error");
    };

    auto* broker = app.add_subcommand("broker", "run the MQTT broker");
    add_common(broker);
    std::optional<std::uint16_t> port;
    broker->add_option("--port", port, "listen port (0 picks a free one)");

    auto* ps = app.add_subcommand("ps", "run the parameter server");
    add_common(ps);
    auto* agent = app.add_subcommand("agent", "run a training agent");
    add_common(agent);

    auto* admin = app.add_subcommand("admin", "manage enrollment and inspect state");
    admin->require_subcommand(1);
    add_common(admin);
    std::string id, fed, cep, role = "client";
    auto* enroll = admin->add_subcommand("enroll", "enroll a client and print its secret once");
    enroll->add_option("client_id", id)->required();
    enroll->add_option("fed", fed)->required();
    enroll->add_option("cep", cep)->required();
    enroll->add_option("--role", role, "client or ps")->check(CLI::IsMember({"client", "ps"}));
    auto* revoke = admin->add_subcommand("revoke", "disable a client");
    revoke->add_option("client_id", id)->required();
    auto* models = admin->add_subcommand("models", "print the model manifest");
    models->add_option("fed", fed)->required();
    models->add_option("cep", cep)->required();
    auto* metrics = admin->add_subcommand("metrics", "print the broker's latest counters");

    auto* sim = app.add_subcommand("sim", "run a scenario in-process over a simulated network");
    std::string scenario_path, out_prefix, store_dir;
    sim->add_option("--scenario", scenario_path, "scenario file")->required()->check(CLI::ExistingFile);
    sim->add_option("--out", out_prefix, "report path prefix (default: scenario name)");
    sim->add_option("--store", store_dir, "model store directory (default: <out>-store)");
    sim->add_option("--log-level", flags.log_level, "debug, info, warn or error");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? ok : config_failure;
    }

    try {
        if (broker->parsed()) return run_broker(flags, port, signals);
        if (ps->parsed()) return run_ps(flags, signals);
        if (agent->parsed()) return run_agent(flags, signals);
        if (enroll->parsed()) return admin_enroll(flags, id, fed, cep, role);
        if (revoke->parsed()) return admin_revoke(flags, id);
        if (models->parsed()) return admin_models(flags, fed, cep);
        if (metrics->parsed()) return admin_metrics(flags);
        if (sim->parsed()) return run_simulation(scenario_path, out_prefix, store_dir, flags.log_level);
    } catch (const cli_failure& e) {
        spdlog::error("{}", e.what());
        return e.code;
    } catch (const config_error& e) {
        spdlog::error("configuration: {}", e.what());
        return config_failure;
    } catch (const credentials_error& e) {
        spdlog::error("{}", e.what());
        switch (e.code()) {
        case credentials_errc::duplicate_client:
        case credentials_errc::unknown_client: return admin_conflict;
        case credentials_errc::parse_error:
        case credentials_errc::io_error: return config_failure;
        }
        return config_failure;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return runtime_failure;
    }
    return ok;
}
