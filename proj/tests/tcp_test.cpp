#include <gtest/gtest.h>

#include "support/flood.hpp"
#include "support/tcp_federation.hpp"
#include "support/temp_dir.hpp"

using namespace fedmq;
using namespace fedmq::test_support;

namespace {

scenario tcp_scenario(std::uint32_t rounds) {
    return scenario::from(settings::from_string(R"(
[scenario]
name = tcp
federation = hosp/stroke
clients = 3
seed = 11
[rounds]
max_rounds = )" + std::to_string(rounds) + R"(
round_timeout_ms = 3000
qos = 1
[training]
local_epochs = 5
learning_rate = 0.1
[data]
samples = 100
holdout = 200
dim = 4
separation = 5
)"));
}

struct broker_fixture : ::testing::Test {
    broker_server server{broker_config{}, test_credentials()};
    void SetUp() override { server.start("127.0.0.1", 0); }
    void TearDown() override { server.stop(millis(0)); }
};

std::unique_ptr<threaded_node<tcp_plain_node>> plain(std::uint16_t port, connect_options o, stream_wrapper w = {}) {
    return std::make_unique<threaded_node<tcp_plain_node>>(
        port, [&](auto send) { return std::make_unique<tcp_plain_node>(send, o); }, std::move(w));
}

connect_options opts(const std::string& id) {
    connect_options o;
    o.client_id = id;
    o.username = id + "-user";
    o.secret = to_bytes(id + "-secret");
    o.keep_alive = 0;
    return o;
}

} // namespace

TEST_F(broker_fixture, DeliversEveryQosOverLoopback) {
    for (std::uint8_t qos : {0, 1, 2}) {
        auto sub = plain(server.port(), opts("ps"));
        sub->query([qos](tcp_plain_node& n) {
            n.client().subscribe({{"f1/c1/job_replies/#", qos}}, steady_now());
            return 0;
        });
        sub->start();
        ASSERT_TRUE(sub->wait_for([](tcp_plain_node& n) { return !n.client().subscriptions().empty() && n.client().connected(); }));
        std::this_thread::sleep_for(millis(50));
        auto pub = plain(server.port(), opts("a"));
        pub->start();
        ASSERT_TRUE(pub->wait_for([](tcp_plain_node& n) { return n.client().connected(); }));
        pub->query([qos](tcp_plain_node& n) {
            for (int i = 0; i < 200; ++i)
                n.client().publish("f1/c1/job_replies/a", byte_buffer(to_bytes(std::to_string(i))), qos, false,
                                   steady_now());
            return 0;
        });
        ASSERT_TRUE(sub->wait_for([](tcp_plain_node& n) { return n.received.size() >= 200; }))
            << "qos " << int(qos);
        auto got = sub->query([](tcp_plain_node& n) {
            std::vector<std::string> v;
            for (const auto& p : n.received) v.push_back(to_string(p.payload.span()));
            return v;
        });
        ASSERT_EQ(got.size(), 200u);
        for (int i = 0; i < 200; ++i) EXPECT_EQ(got[i], std::to_string(i));
        EXPECT_TRUE(pub->wait_for([](tcp_plain_node& n) { return n.client().pending_publishes() == 0; }));
    }
}

TEST_F(broker_fixture, SecondConnectWithSameIdTakesOver) {
    raw_client first(server.port());
    first.send(connect_as("a"));
    ASSERT_EQ(first.recv_of<connack_packet>()->reason_code, reason::success);
    raw_client second(server.port());
    second.send(connect_as("a"));
    ASSERT_EQ(second.recv_of<connack_packet>()->reason_code, reason::success);
    auto d = first.recv_of<disconnect_packet>();
    ASSERT_TRUE(d);
    EXPECT_EQ(d->reason_code, reason::session_taken_over);
    EXPECT_TRUE(first.closed());
    second.send(pingreq_packet{});
    EXPECT_TRUE(second.recv_of<pingresp_packet>());
    EXPECT_EQ(server.call([](broker_core& c) { return c.session_count(); }), 1u);
}

TEST_F(broker_fixture, MalformedBytesCloseTheConnection) {
    raw_client c(server.port());
    c.write({0x00, 0x00});
    EXPECT_TRUE(c.closed());
    EXPECT_EQ(server.metrics().protocol_errors, 1u);

    raw_client huge(server.port());
    huge.write({0x10, 0xFF, 0xFF, 0xFF, 0xFF, 0x01}); // five-byte remaining length
    EXPECT_TRUE(huge.closed());
}

TEST_F(broker_fixture, RefusedCredentialsEndTheRunner) {
    auto o = opts("a");
    o.secret = to_bytes("wrong");
    auto node = plain(server.port(), o);
    node->start();
    auto deadline = steady_now() + millis(5'000);
    while (!node->finished() && steady_now() < deadline) std::this_thread::sleep_for(millis(10));
    ASSERT_TRUE(node->finished());
    EXPECT_EQ(node->result(), run_result::auth_failure);
    EXPECT_EQ(node->query([](tcp_plain_node& n) { return n.connack; }), reason::bad_user_name_or_password);
}

TEST(TcpTransport, StreamWrapperWrapsBothEnds) {
    broker_server server(broker_config{}, test_credentials(), {}, xor_wrapper(0x5A));
    server.start("127.0.0.1", 0);
    {
        raw_client wrapped(server.port(), xor_wrapper(0x5A));
        wrapped.send(connect_as("a"));
        auto ack = wrapped.recv_of<connack_packet>();
        ASSERT_TRUE(ack);
        EXPECT_EQ(ack->reason_code, reason::success);
    }
    {
        raw_client bare(server.port());
        bare.send(connect_as("b"));
        EXPECT_FALSE(bare.recv_of<connack_packet>(millis(500)));
        EXPECT_TRUE(bare.closed());
    }
    server.stop(millis(0));
}

TEST(TcpTransport, RunnerReconnectsAndResubscribesAfterBrokerRestart) {
    auto server = std::make_unique<broker_server>(broker_config{}, test_credentials());
    server->start("127.0.0.1", 0);
    auto port = server->port();
    auto sub = plain(port, opts("ps"));
    sub->query([](tcp_plain_node& n) {
        n.client().subscribe({{"f1/c1/job_replies/#", 1}}, steady_now());
        return 0;
    });
    sub->start();
    ASSERT_TRUE(sub->wait_for([](tcp_plain_node& n) { return n.client().connected(); }));

    server->stop(millis(0));
    server = std::make_unique<broker_server>(broker_config{}, test_credentials());
    server->start("127.0.0.1", port);
    ASSERT_TRUE(sub->wait_for([&](tcp_plain_node& n) { return n.client().connected(); }, millis(10'000)));
    ASSERT_TRUE(sub->wait_for(
        [&](tcp_plain_node&) { return server->call([](broker_core& c) { return c.has_session("ps"); }); }));
    std::this_thread::sleep_for(millis(100));

    raw_client pub(port);
    pub.send(connect_as("a"));
    pub.recv_of<connack_packet>();
    pub.send(make_publish("f1/c1/job_replies/a", "after restart", 1, 1));
    EXPECT_TRUE(pub.recv_of<puback_packet>());
    EXPECT_TRUE(sub->wait_for([](tcp_plain_node& n) { return !n.received.empty(); }));
    EXPECT_GE(sub->reconnects(), 1u);
    sub->stop();
    server->stop(millis(0));
}

TEST(TcpTransport, FloodStaysBoundedAndPingsStayFast) {
    auto r = run_flood_experiment();
    EXPECT_GE(r.publish_rate, 10 * r.consume_rate);
    EXPECT_LE(r.max_queue_length, r.queue_bound);
    EXPECT_LE(r.max_queued_bytes, r.byte_bound);
    EXPECT_GT(r.queue_drops, 0u);
    EXPECT_GT(r.pings, 20u);
    EXPECT_EQ(r.lost_pings, 0u);
    EXPECT_LT(r.max_ping_rtt, millis(100));
}

TEST(TcpFederation, MatchesTheSimulatorExactly) {
    auto sc = tcp_scenario(6);
    temp_dir sim_dir, tcp_dir;
    auto sim = run_sim(sc, sim_dir.path());
    ASSERT_EQ(sim.rounds_completed, 6u);

    tcp_federation f(sc, tcp_dir.path());
    f.start();
    ASSERT_TRUE(f.wait(millis(60'000)));
    auto rows = f.rounds();
    ASSERT_EQ(rows.size(), 6u);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ(rows[i].model_version, i + 1);
        EXPECT_EQ(rows[i].contributors.size(), 3u);
        EXPECT_NEAR(accuracy(rows[i].model, f.holdout()), sim.rows[i].accuracy, 1e-9);
    }
    EXPECT_NEAR(f.final_accuracy(), sim.final_accuracy, 1e-9);
    EXPECT_EQ(f.store().latest_version(sc.fed.fed, sc.fed.cep), 6u);
}

TEST(TcpFederation, ResumesWithinTwoRoundTimeoutsAfterBrokerRestart) {
    auto sc = tcp_scenario(200);
    temp_dir dir;
    tcp_federation f(sc, dir.path());
    f.start();
    ASSERT_TRUE(f.ps().wait_for([](ps_node& n) { return n.machine(n.machines().begin()->first).round() >= 3; },
                                millis(30'000)));
    auto before = f.rounds().size();
    auto restart_at = steady_now();
    f.restart_broker(millis(200));
    auto deadline = restart_at + 2 * sc.rounds.round_timeout + millis(2'000);
    while (f.rounds().size() <= before && steady_now() < deadline) std::this_thread::sleep_for(millis(20));
    ASSERT_GT(f.rounds().size(), before);
    EXPECT_LE(steady_now() - restart_at, 2 * sc.rounds.round_timeout);
    ASSERT_TRUE(f.wait(millis(60'000)));
    EXPECT_EQ(f.store().latest_version(sc.fed.fed, sc.fed.cep), 200u);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_GE(f.agent(i).reconnects(), 1u);
}
