// Acceptance suite: one PASS/FAIL line per criterion, with what was measured
// and how long it took. Exit status is the number of failed criteria.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>

#include "fedmq/fl.hpp"
#include "fedmq/model_store.hpp"
#include "fedmq/sim.hpp"
#include "support/broker_harness.hpp"
#include "support/flood.hpp"
#include "support/packet_gen.hpp"
#include "support/sim_support.hpp"
#include "support/temp_dir.hpp"

using namespace fedmq;
using namespace fedmq::test_support;

namespace {

namespace fs = std::filesystem;

// Final held-out accuracy of three_clinics.ini from tests/oracles/fedavg_oracle.py
//   --clients 3 --rounds 30 --seed 2024 --samples 200 --holdout 500 --dim 8 --separation 4
constexpr double oracle_three_clinics_accuracy = 0.976;
constexpr double oracle_tolerance = 0.02;

struct outcome {
    bool pass = true;
    std::ostringstream note;

    void expect(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            note << " [failed: " << what << "]";
        }
    }
};

int failures = 0;

void criterion(int n, const std::string& title, double budget_s, const std::function<void(outcome&)>& body) {
    outcome o;
    auto start = std::chrono::steady_clock::now();
    try {
        body(o);
    } catch (const std::exception& e) {
        o.pass = false;
        o.note << " [exception: " << e.what() << "]";
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (budget_s > 0) o.expect(secs <= budget_s, "took longer than " + std::to_string(budget_s) + " s");
    if (!o.pass) ++failures;
    std::printf("%s %2d %-44s %6.2fs  %s\n", o.pass ? "PASS" : "FAIL", n, title.c_str(), secs, o.note.str().c_str());
    std::fflush(stdout);
}

fs::path scenario_path(const std::string& name) { return fs::path(FEDMQ_SOURCE_DIR) / "scenarios" / name; }

// Broker core over a recording sink with a caller-supplied credentials set.
struct bare_broker {
    explicit bare_broker(std::shared_ptr<const credentials_store> creds) : core(broker_config{}, std::move(creds), sink) {}

    conn_id login(const std::string& id, const std::string& secret) {
        auto cp = connect_as(id);
        cp.options.username = id;
        cp.options.secret = to_bytes(secret);
        auto c = next++;
        core.on_open(c, now);
        core.on_packet(c, cp, now);
        sink.take(c);
        return c;
    }

    recording_sink sink;
    broker_core core;
    conn_id next = 1;
    millis now{0};
};

void publish_overhead(outcome& o) {
    packet_generator gen(101, 300);
    std::size_t lo = SIZE_MAX, hi = 0;
    for (int i = 0; i < 10'000; ++i) {
        auto p = gen.publish();
        auto overhead = encode_packet(p).size() - (p.topic.size() + 2 + p.payload.size());
        lo = std::min(lo, overhead);
        hi = std::max(hi, overhead);
    }
    publish_packet minimal;
    minimal.topic = "t";
    auto minimal_overhead = encode_packet(minimal).size() - 3;
    o.note << "overhead range [" << lo << ", " << hi << "], minimal " << minimal_overhead;
    o.expect(lo >= 2 && hi <= 14, "overhead outside [2, 14]");
    o.expect(minimal_overhead == 2, "minimal qos0 overhead is not 2");
}

void payload_cap(outcome& o) {
    const std::size_t largest = max_remaining_length - 3; // 2-byte length prefix + 1-byte topic
    publish_packet p;
    p.topic = "t";
    {
        bytes body(largest);
        for (std::size_t i = 0; i < body.size(); i += 4096) body[i] = static_cast<std::uint8_t>(i >> 12);
        p.payload = byte_buffer(std::move(body));
    }
    {
        auto enc = encode_packet(p);
        auto [decoded, used] = decode_packet(enc);
        o.expect(used == enc.size(), "decoder did not consume the whole packet");
        const auto* back = std::get_if<publish_packet>(&decoded);
        o.expect(back && back->topic == "t" && back->payload.size() == largest &&
                     std::equal(back->payload.span().begin(), back->payload.span().end(), p.payload.span().begin()),
                 "largest payload did not round-trip");
    }
    p.payload = byte_buffer(bytes(largest + 1));
    bool rejected = false;
    try {
        encode_packet(p);
    } catch (const codec_error& e) {
        rejected = e.code() == codec_errc::value_too_large;
    }
    o.note << "payload " << largest << " round-trips, " << largest + 1 << (rejected ? " rejected" : " accepted");
    o.expect(rejected, "one byte over the cap was not value_too_large");
}

void codec_round_trip(outcome& o) {
    packet_generator gen(202);
    std::size_t prefixes = 0, bad = 0;
    for (int i = 0; i < 100'000; ++i) {
        auto p = gen.any();
        auto enc = encode_packet(p);
        auto r = try_decode_packet(enc);
        if (r.status != decode_status::ok || r.consumed != enc.size() || !r.pkt || encode_packet(*r.pkt) != enc ||
            type_of(*r.pkt) != type_of(p))
            ++bad;
        for (std::size_t n = 0; n < enc.size(); ++n, ++prefixes)
            if (try_decode_packet(std::span<const std::uint8_t>(enc.data(), n)).status != decode_status::incomplete)
                ++bad;
    }
    o.note << "100000 packets, " << prefixes << " prefixes, " << bad << " mismatches";
    o.expect(bad == 0, "round-trip or prefix mismatch");
}

void fan_out(outcome& o) {
    const federation_ref fed{identifier("hosp"), identifier("stroke")};
    for (std::size_t k : {1u, 3u, 10u, 100u}) {
        auto creds = std::make_shared<credentials_store>();
        std::vector<federation_ref> feds{fed};
        creds->add(credentials_store::make("ps", "ps", "ps-secret", canonical_ps_acl(feds), 2));
        for (std::size_t i = 1; i <= k; ++i) {
            auto id = "client-" + std::to_string(i);
            creds->add(credentials_store::make(id, id, id + "-secret", canonical_client_acl(identifier(id), feds), 2));
        }
        bare_broker b(creds);
        auto ps = b.login("ps", "ps-secret");
        b.core.on_packet(ps, subscribe_packet{1, {{"hosp/stroke/job_replies/#", 1}}}, b.now);
        std::vector<conn_id> clients;
        for (std::size_t i = 1; i <= k; ++i) {
            auto id = "client-" + std::to_string(i);
            auto c = b.login(id, id + "-secret");
            b.core.on_packet(c, subscribe_packet{1, {{"hosp/stroke/job_request", 1}}}, b.now);
            clients.push_back(c);
        }
        b.sink.take(ps);
        for (auto c : clients) b.sink.take(c);

        b.core.on_packet(ps, make_publish("hosp/stroke/job_request", "job", 1, 7), b.now);
        std::size_t deliveries = 0;
        for (auto c : clients)
            for (const auto& p : b.sink.take_of<publish_packet>(c))
                if (p.topic == "hosp/stroke/job_request" && to_string(p.payload.span()) == "job") ++deliveries;

        std::set<std::string> replies;
        for (std::size_t i = 0; i < k; ++i) {
            auto id = "client-" + std::to_string(i + 1);
            b.core.on_packet(clients[i], make_publish("hosp/stroke/job_replies/" + id, id, 1, 9), b.now);
        }
        for (const auto& p : b.sink.take_of<publish_packet>(ps)) replies.insert(to_string(p.payload.span()));
        o.note << "k=" << k << ": " << deliveries << "/" << replies.size() << " ";
        o.expect(deliveries == k, "job_request reached " + std::to_string(deliveries) + " of " + std::to_string(k));
        o.expect(replies.size() == k, "PS collected " + std::to_string(replies.size()) + " of " + std::to_string(k));
    }
}

void isolation(outcome& o) {
    broker_harness h;
    std::mt19937_64 rng(303);
    auto ps = h.login("ps");
    h.subscribe(ps, "f1/c1/job_replies/#", 1);
    h.subscribe(ps, "f1/c1/model_request/+", 1);
    auto b = h.login("b");
    h.subscribe(b, "f1/c1/job_request", 1);
    h.subscribe(b, "f1/c1/model_reply/b", 1);
    auto a = conn_id{};
    auto login_a = [&] {
        a = h.login("a");
        h.subscribe(a, "f1/c1/job_request", 1);
        h.subscribe(a, "f1/c1/model_reply/a", 1);
    };
    login_a();

    const std::vector<std::string> forbidden_topics = {
        "f1/c1/job_replies/b", "f1/c1/job_replies/c", "f1/c1/job_replies/ps", "f1/c1/model_request/b",
        "f1/c1/model_reply/a", "f1/c1/model_reply/b", "f1/c1/job_request",    "f2/c1/job_replies/a",
        "f1/c2/job_replies/a", "f1/c1/job_replies/a/x", "f1/c1/other/a",      "job_replies/a"};
    const std::vector<std::string> forbidden_filters = {
        "#",          "+/+/+/+",             "f1/c1/#",             "f1/c1/job_replies/#", "f1/c1/job_replies/b",
        "f1/c1/job_replies/+", "f1/c1/model_reply/b", "f1/c1/model_reply/+", "f1/+/model_reply/b",
        "f1/c1/model_request/+", "f2/c1/job_request", "+/c1/job_request",   "f1/c1/+/b"};
    const std::string allowed_filter = "f1/c1/model_reply/a";

    std::size_t foreign = 0, legit = 0, publishes = 0, disconnects = 0, filters = 0, refused = 0, granted_ok = 0,
                leaked_to_others = 0, b_received = 0;
    std::uint16_t pid = 1;
    auto next_id = [&] { return pid = static_cast<std::uint16_t>(pid % 60000 + 1); };
    auto drain_a = [&] {
        for (const auto& p : h.sink.take_of<publish_packet>(a)) {
            auto body = to_string(p.payload.span());
            if (body.rfind("job-", 0) == 0 || body.rfind("for-a-", 0) == 0) ++legit;
            else ++foreign;
        }
    };

    for (int i = 0; i < 1000; ++i) {
        if (rng() % 2) {
            ++publishes;
            auto topic = forbidden_topics[rng() % forbidden_topics.size()];
            auto qos = static_cast<std::uint8_t>(rng() % 3);
            h.send(a, make_publish(topic, "forged-" + std::to_string(i), qos, next_id()));
            if (h.sink.closed.count(a)) ++disconnects;
            drain_a();
            h.core.on_closed(a);
            login_a();
        } else {
            std::vector<std::pair<std::string, std::uint8_t>> req;
            std::vector<bool> expect_granted;
            std::size_t n = 1 + rng() % 3;
            for (std::size_t j = 0; j < n; ++j) {
                bool ok = rng() % 4 == 0;
                req.emplace_back(ok ? allowed_filter : forbidden_filters[rng() % forbidden_filters.size()],
                                 static_cast<std::uint8_t>(rng() % 3));
                expect_granted.push_back(ok);
            }
            subscribe_packet sp;
            sp.packet_id = next_id();
            for (const auto& [f, q] : req) sp.filters.push_back({f, q});
            h.send(a, sp);
            for (const auto& p : h.sink.take(a)) {
                if (const auto* ack = std::get_if<suback_packet>(&p)) {
                    for (std::size_t j = 0; j < ack->reason_codes.size() && j < n; ++j) {
                        if (expect_granted[j]) {
                            granted_ok += ack->reason_codes[j] < 0x80;
                        } else {
                            ++filters;
                            refused += ack->reason_codes[j] == reason::not_authorized;
                        }
                    }
                } else if (const auto* pub = std::get_if<publish_packet>(&p)) {
                    auto body = to_string(pub->payload.span());
                    if (body.rfind("job-", 0) == 0 || body.rfind("for-a-", 0) == 0) ++legit;
                    else ++foreign;
                }
            }
            if (h.sink.closed.count(a)) {
                o.expect(false, "subscribe attempt closed the connection");
                h.core.on_closed(a);
                login_a();
            }
        }
        // legitimate traffic that a must or must not see
        auto tag = std::to_string(i);
        h.send(ps, make_publish("f1/c1/model_reply/b", "for-b-" + tag, 1, next_id()));
        h.send(b, make_publish("f1/c1/job_replies/b", "from-b-" + tag, 1, next_id()));
        h.send(ps, make_publish("f1/c1/job_request", "job-" + tag, 1, next_id()));
        h.send(ps, make_publish("f1/c1/model_reply/a", "for-a-" + tag, 1, next_id()));
        drain_a();
        for (const auto& p : h.sink.take_of<publish_packet>(ps))
            leaked_to_others += to_string(p.payload.span()).rfind("forged-", 0) == 0;
        for (const auto& p : h.sink.take_of<publish_packet>(b)) {
            auto body = to_string(p.payload.span());
            leaked_to_others += body.rfind("forged-", 0) == 0;
            b_received += body.rfind("for-b-", 0) == 0;
        }
    }
    o.note << foreign << " foreign payloads, " << legit << " legitimate; " << disconnects << "/" << publishes
           << " forged publishes disconnected; " << refused << "/" << filters << " filters refused";
    o.expect(foreign == 0, "foreign payload reached the adversary");
    o.expect(leaked_to_others == 0, "forged payload was routed");
    o.expect(disconnects == publishes, "forged publish did not disconnect");
    o.expect(refused == filters, "forbidden filter was granted");
    o.expect(legit >= 2000, "adversary lost its own traffic");
    o.expect(b_received == 1000, "victim lost its own traffic");
    o.expect(granted_ok > 0, "allowed filter never granted");
}

void qos_under_loss(outcome& o) {
    auto q1 = run_qos_experiment(1, 1000, 0.3, 404);
    auto q2 = run_qos_experiment(2, 1000, 0.3, 405);
    o.note << "qos1 " << q1.distinct << " distinct of " << q1.delivered << "; qos2 " << q2.distinct << " distinct of "
           << q2.delivered << "; dropped " << q1.dropped_packets << "+" << q2.dropped_packets;
    o.expect(q1.distinct == 1000, "qos1 lost a message");
    o.expect(q2.delivered == 1000 && q2.distinct == 1000, "qos2 was not exactly once");
    o.expect(q1.dropped_packets > 0 && q2.dropped_packets > 0, "no packets were dropped");
}

void flood(outcome& o) {
    auto r = run_flood_experiment();
    o.note << "offered " << static_cast<int>(r.publish_rate) << "/s vs consumed " << static_cast<int>(r.consume_rate)
           << "/s; queue max " << r.max_queue_length << "/" << r.queue_bound << ", bytes " << r.max_queued_bytes << "/"
           << r.byte_bound << "; drops " << r.queue_drops << "; ping rtt max " << r.max_ping_rtt.count() << " ms over "
           << r.pings << " pings";
    o.expect(r.publish_rate >= 10 * r.consume_rate, "publisher not 10x faster than the consumer");
    o.expect(r.max_queue_length <= r.queue_bound && r.max_queued_bytes <= r.byte_bound, "queue exceeded its bound");
    o.expect(r.queue_drops > 0, "queue never filled");
    o.expect(r.lost_pings == 0 && r.pings > 20 && r.max_ping_rtt < millis(100), "pings starved");
}

bool bit_equal(const parameter_set& a, const parameter_set& b) {
    if (a.values.size() != b.values.size() || a.num_samples != b.num_samples) return false;
    for (std::size_t i = 0; i < a.values.size(); ++i)
        if (std::bit_cast<std::uint64_t>(a.values[i]) != std::bit_cast<std::uint64_t>(b.values[i])) return false;
    return true;
}

void aggregation(outcome& o) {
    std::mt19937_64 rng(505);
    std::normal_distribution<double> normal(0, 5);
    double worst = 0;
    std::size_t not_invariant = 0;
    for (int inst = 0; inst < 1000; ++inst) {
        std::size_t k = 1 + rng() % 10, dim = 1 + rng() % 2000;
        std::vector<client_update> ups;
        for (std::size_t i = 0; i < k; ++i) {
            parameter_set p;
            p.layout = {{"v", static_cast<std::uint32_t>(dim)}};
            p.values.resize(dim);
            for (auto& x : p.values) x = normal(rng);
            p.num_samples = 1 + rng() % 1000;
            ups.push_back({"client-" + std::to_string(i), std::move(p)});
        }
        auto got = aggregate(ups);
        long double total = 0;
        for (const auto& u : ups) total += static_cast<long double>(u.params.num_samples);
        for (std::size_t j = 0; j < dim; ++j) {
            long double acc = 0;
            for (const auto& u : ups) acc += static_cast<long double>(u.params.num_samples) * u.params.values[j];
            worst = std::max(worst, std::abs(got.values[j] - static_cast<double>(acc / total)));
        }
        std::shuffle(ups.begin(), ups.end(), rng);
        not_invariant += !bit_equal(aggregate(ups), got);
    }
    o.note << "max |error| " << worst << ", " << not_invariant << " permutation mismatches";
    o.expect(worst <= 1e-12, "aggregate differs from the brute-force mean");
    o.expect(not_invariant == 0, "aggregate depends on update order");
}

void gradient(outcome& o) {
    std::mt19937_64 rng(606);
    std::normal_distribution<double> normal(0, 1);
    const double h = 1e-5;
    double worst = 0;
    std::size_t checked = 0;
    for (int inst = 0; inst < 500; ++inst) {
        std::size_t d = 1 + rng() % 8, n = 1 + rng() % 50;
        auto data = synth_dataset(rng(), n, d, 3.0);
        auto p = logistic_template(d);
        for (auto& v : p.values) v = normal(rng);
        auto g = logistic_gradient(p, data);
        for (std::size_t k = 0; k < p.values.size(); ++k, ++checked) {
            auto plus = p, minus = p;
            plus.values[k] += h;
            minus.values[k] -= h;
            double fd = (logistic_loss(plus, data) - logistic_loss(minus, data)) / (2 * h);
            double scale = std::max({std::abs(fd), std::abs(g[k]), 1e-3});
            worst = std::max(worst, std::abs(fd - g[k]) / scale);
        }
    }
    o.note << checked << " coordinates, max relative error " << worst;
    o.expect(worst <= 1e-6, "gradient disagrees with central differences");
}

void three_clinics(outcome& o) {
    auto sc = scenario::load(scenario_path("three_clinics.ini"));
    temp_dir dir;
    auto r = run_sim(sc, dir.path());
    model_store store(dir.path(), model_store::unix_seconds, model_store::mode::read_only);
    auto list = store.list_models(sc.fed.fed, sc.fed.cep);
    bool versions_ok = list.size() == 30;
    for (std::size_t i = 0; versions_ok && i < list.size(); ++i)
        versions_ok = list[i].model_version == i + 1 && list[i].contributors.size() == 3;
    o.note << "final accuracy " << r.final_accuracy << " (oracle " << oracle_three_clinics_accuracy << " +/- "
           << oracle_tolerance << "), " << r.rounds_completed << " rounds, " << list.size() << " stored versions";
    o.expect(r.finished && r.rounds_completed == 30, "did not complete 30 rounds");
    o.expect(r.final_accuracy >= 0.95, "accuracy below 0.95");
    o.expect(std::abs(r.final_accuracy - oracle_three_clinics_accuracy) <= oracle_tolerance, "accuracy off the oracle");
    o.expect(versions_ok, "store does not hold versions 1..30 with three contributors each");
}

void churn(outcome& o) {
    auto sc = scenario::load(scenario_path("churn.ini"));
    temp_dir dir;
    auto r = run_sim(sc, dir.path());
    model_store store(dir.path(), model_store::unix_seconds, model_store::mode::read_only);
    auto list = store.list_models(sc.fed.fed, sc.fed.cep);
    bool shape = list.size() == 20;
    for (std::size_t i = 0; shape && i < list.size(); ++i) {
        auto want = i < 10 ? 3u : 2u;
        shape = list[i].model_version == i + 1 && list[i].contributors.size() == want;
        if (i >= 10)
            shape = shape && std::find(list[i].contributors.begin(), list[i].contributors.end(), "client-3") ==
                                 list[i].contributors.end();
    }
    bool timed_out = r.rows.size() == 20;
    for (std::size_t i = 10; timed_out && i < r.rows.size(); ++i)
        timed_out = r.rows[i].at - r.rows[i - 1].at >= sc.rounds.round_timeout;
    o.note << r.rounds_completed << " rounds, " << r.stalls << " stalls, contributors";
    for (const auto& e : list) o.note << " " << e.contributors.size();
    o.expect(r.finished && r.rounds_completed == 20, "federation did not finish");
    o.expect(r.stalls == 0, "a round stalled");
    o.expect(shape, "versions 1..10 need three contributors and 11..20 two");
    o.expect(timed_out, "post-churn rounds closed before the timeout");
}

void store_integrity(outcome& o) {
    temp_dir dir;
    model_store store(dir.path());
    std::mt19937_64 rng(707);
    std::normal_distribution<double> normal(0, 3);
    const identifier F("hosp"), C("stroke");
    std::size_t mismatches = 0, flips = 0, detected = 0;
    for (std::uint32_t v = 1; v <= 1000; ++v) {
        parameter_set p;
        auto n = static_cast<std::uint32_t>(rng() % 300);
        p.layout = {{"weights", n}, {"bias", 1}};
        for (std::uint32_t i = 0; i <= n; ++i) p.values.push_back(normal(rng));
        p.num_samples = rng() % 1000;
        auto body = encode_parameters(p);
        store.store_model(F, C, v, {"client-1"}, body);
        mismatches += store.fetch_model(F, C, v) != body;

        auto file = dir.path() / "hosp" / "stroke" / ("v" + std::string(6 - std::to_string(v).size(), '0') +
                                                      std::to_string(v) + ".model");
        auto bit = rng() % (body.size() * 8);
        auto flipped = body;
        flipped[bit / 8] ^= static_cast<std::uint8_t>(1u << (bit % 8));
        std::ofstream(file, std::ios::binary | std::ios::trunc)
            .write(reinterpret_cast<const char*>(flipped.data()), static_cast<std::streamsize>(flipped.size()));
        ++flips;
        try {
            store.fetch_model(F, C, v);
        } catch (const store_error& e) {
            detected += e.code() == store_errc::integrity_failure;
        }
    }
    o.note << "1000 bodies, " << mismatches << " mismatches; " << detected << "/" << flips << " bit flips detected";
    o.expect(mismatches == 0, "fetched body differs");
    o.expect(detected == flips, "bit flip not reported as integrity_failure");
}

} // namespace

int main() {
    criterion(1, "publish framing overhead", 5, publish_overhead);
    criterion(2, "maximum payload and one byte over", 10, payload_cap);
    criterion(3, "codec round-trip and strict prefixes", 0, codec_round_trip);
    criterion(4, "job_request fan-out to k clients", 0, fan_out);
    criterion(5, "cross-client isolation under attack", 0, isolation);
    criterion(6, "qos1/qos2 delivery under 30% loss", 30, qos_under_loss);
    criterion(7, "bounded queues, responsive broker", 0, flood);
    criterion(8, "weighted aggregation", 0, aggregation);
    criterion(9, "logistic gradient", 0, gradient);
    criterion(10, "three clinics reach target accuracy", 60, three_clinics);
    criterion(11, "federation survives client churn", 0, churn);
    criterion(12, "model store byte identity and integrity", 0, store_integrity);
    std::printf("%d of 12 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
