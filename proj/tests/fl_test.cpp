#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <random>

#include "fedmq/fl.hpp"
#include "fedmq/rounds.hpp"

using namespace fedmq;

namespace {

fl_errc fl_code(auto&& f) {
    try {
        f();
    } catch (const fl_error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no error";
    return fl_errc::empty_dataset;
}

// Straightforward weighted mean in extended precision.
std::vector<long double> brute_mean(const std::vector<parameter_set>& ups) {
    long double total = 0;
    for (const auto& u : ups) total += static_cast<long double>(u.num_samples);
    std::vector<long double> out(ups.front().values.size(), 0.0L);
    for (std::size_t j = 0; j < out.size(); ++j) {
        long double acc = 0;
        for (const auto& u : ups) acc += static_cast<long double>(u.num_samples) * u.values[j];
        out[j] = acc / total;
    }
    return out;
}

parameter_set flat(std::vector<double> v, std::uint64_t n) {
    parameter_set p;
    p.layout = {{"v", static_cast<std::uint32_t>(v.size())}};
    p.values = std::move(v);
    p.num_samples = n;
    return p;
}

bool bit_equal(const parameter_set& a, const parameter_set& b) {
    if (a.values.size() != b.values.size() || a.num_samples != b.num_samples) return false;
    for (std::size_t i = 0; i < a.values.size(); ++i)
        if (std::bit_cast<std::uint64_t>(a.values[i]) != std::bit_cast<std::uint64_t>(b.values[i])) return false;
    return true;
}

const federation_ref fr{identifier("f"), identifier("c")};

} // namespace

TEST(Aggregate, Examples) {
    auto one = flat({0.1, -7.25, 3.0}, 3);
    std::vector<parameter_set> single = {one};
    EXPECT_EQ(aggregate(single), one);

    std::vector<parameter_set> two = {flat({1, 3}, 2), flat({4, 0}, 1)};
    auto r = aggregate(two);
    EXPECT_NEAR(r.values[0], 2.0, 1e-15);
    EXPECT_NEAR(r.values[1], 2.0, 1e-15);
    EXPECT_EQ(r.num_samples, 3u);
}

TEST(Aggregate, Errors) {
    std::vector<parameter_set> none;
    EXPECT_EQ(fl_code([&] { aggregate(none); }), fl_errc::empty_update_set);
    std::vector<parameter_set> mixed = {flat({1, 2}, 1), flat({1, 2, 3}, 1)};
    EXPECT_EQ(fl_code([&] { aggregate(mixed); }), fl_errc::layout_mismatch);
    std::vector<parameter_set> renamed = {flat({1}, 1), flat({1}, 1)};
    renamed[1].layout[0].name = "w";
    EXPECT_EQ(fl_code([&] { aggregate(renamed); }), fl_errc::layout_mismatch);
    std::vector<parameter_set> weightless = {flat({1}, 0), flat({2}, 0)};
    EXPECT_EQ(fl_code([&] { aggregate(weightless); }), fl_errc::zero_total_weight);
}

TEST(Aggregate, MatchesBruteForceAndIsPermutationInvariant) {
    std::mt19937_64 rng(2024);
    std::normal_distribution<double> normal(0, 5);
    for (int inst = 0; inst < 300; ++inst) {
        std::size_t k = 1 + rng() % 10, dim = 1 + rng() % 10'000;
        std::vector<client_update> ups;
        std::vector<parameter_set> plain;
        for (std::size_t i = 0; i < k; ++i) {
            std::vector<double> v(dim);
            for (auto& x : v) x = normal(rng);
            ups.push_back({"client" + std::to_string(i), flat(std::move(v), 1 + rng() % 1000)});
            plain.push_back(ups.back().params);
        }
        auto got = aggregate(ups);
        auto want = brute_mean(plain);
        for (std::size_t j = 0; j < dim; ++j) ASSERT_NEAR(got.values[j], static_cast<double>(want[j]), 1e-12);
        std::shuffle(ups.begin(), ups.end(), rng);
        ASSERT_TRUE(bit_equal(aggregate(ups), got));
        auto anon = aggregate(plain);
        std::shuffle(plain.begin(), plain.end(), rng);
        ASSERT_TRUE(bit_equal(aggregate(plain), anon));
    }
}

TEST(Aggregate, EqualWeightsGiveUnweightedMean) {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(-10, 10);
    for (int inst = 0; inst < 100; ++inst) {
        std::vector<parameter_set> ups;
        std::size_t k = 1 + rng() % 10;
        for (std::size_t i = 0; i < k; ++i) {
            std::vector<double> v(20);
            for (auto& x : v) x = u(rng);
            ups.push_back(flat(v, 7));
        }
        auto got = aggregate(ups);
        for (std::size_t j = 0; j < 20; ++j) {
            double mean = 0;
            for (const auto& p : ups) mean += p.values[j];
            mean /= static_cast<double>(k);
            ASSERT_NEAR(got.values[j], mean, 1e-12);
        }
    }
}

TEST(Dataset, DeterministicPerSeed) {
    auto a = synth_dataset(5, 100, 3, 2.0);
    auto b = synth_dataset(5, 100, 3, 2.0);
    EXPECT_EQ(a.features, b.features);
    EXPECT_EQ(a.labels, b.labels);
    auto held = synth_dataset(5, 100, 3, 2.0, 1);
    EXPECT_NE(a.features, held.features);
    EXPECT_THROW(synth_dataset(1, 10, 0, 1.0), fl_error);
}

TEST(Dataset, ZeroSeparationIsChance) {
    double total = 0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        auto train = synth_dataset(seed, 200, 2, 0.0);
        auto test = synth_dataset(seed, 2000, 2, 0.0, 1);
        auto p = local_train(logistic_template(2), train, 50, 0.1);
        total += accuracy(p, test);
    }
    EXPECT_NEAR(total / 10, 0.5, 0.05);
}

TEST(Dataset, DistinctSeedsGiveDistinctShardMeans) {
    auto mean_of = [](const dataset& d) {
        std::vector<double> m(d.dim, 0.0);
        for (std::size_t i = 0; i < d.size(); ++i)
            for (std::size_t k = 0; k < d.dim; ++k) m[k] += d.row(i)[k];
        for (auto& x : m) x /= static_cast<double>(d.size());
        return m;
    };
    // with 20000 points the sampling noise on each mean is ~0.015 per axis
    auto m1 = mean_of(synth_dataset(1, 20'000, 2, 5.0));
    auto m2 = mean_of(synth_dataset(2, 20'000, 2, 5.0));
    auto m3 = mean_of(synth_dataset(3, 20'000, 2, 5.0));
    auto m1_again = mean_of(synth_dataset(1, 20'000, 2, 5.0, 1));
    auto dist = [](const std::vector<double>& a, const std::vector<double>& b) {
        return std::hypot(a[0] - b[0], a[1] - b[1]);
    };
    EXPECT_GT(dist(m1, m2), 0.1);
    EXPECT_GT(dist(m1, m3), 0.1);
    EXPECT_GT(dist(m2, m3), 0.1);
    EXPECT_LT(dist(m1, m1_again), 0.1);
}

TEST(Dataset, ClassMeansAreSeparatedBySeparation) {
    auto d = synth_dataset(9, 20'000, 3, 4.0);
    std::vector<double> m0(3, 0), m1(3, 0);
    for (std::size_t i = 0; i < d.size(); ++i)
        for (std::size_t k = 0; k < 3; ++k) (d.labels[i] ? m1 : m0)[k] += d.row(i)[k];
    double sq = 0;
    for (std::size_t k = 0; k < 3; ++k) sq += std::pow((m1[k] - m0[k]) / 10'000, 2);
    EXPECT_NEAR(std::sqrt(sq), 4.0, 0.06);
}

TEST(LocalTrain, ZeroEpochsIsNoOp) {
    auto data = synth_dataset(1, 10, 2, 3.0);
    auto start = logistic_template(2);
    start.values = {0.3, -0.2, 0.1};
    auto p = local_train(start, data, 0, 0.1);
    EXPECT_EQ(p.values, start.values);
    EXPECT_EQ(p.num_samples, 10u);
}

TEST(LocalTrain, Errors) {
    dataset empty;
    empty.dim = 2;
    EXPECT_EQ(fl_code([&] { local_train(logistic_template(2), empty, 1, 0.1); }), fl_errc::empty_dataset);
    auto data = synth_dataset(1, 10, 2, 3.0);
    EXPECT_EQ(fl_code([&] { local_train(logistic_template(3), data, 1, 0.1); }), fl_errc::layout_mismatch);
}

TEST(LocalTrain, GradientMatchesCentralDifferences) {
    std::mt19937_64 rng(77);
    std::normal_distribution<double> normal(0, 1);
    const double h = 1e-5;
    for (int inst = 0; inst < 200; ++inst) {
        std::size_t d = 1 + rng() % 5, n = 1 + rng() % 20;
        auto data = synth_dataset(rng(), n, d, 2.0);
        auto start = logistic_template(d);
        for (auto& v : start.values) v = normal(rng);
        auto p = local_train(start, data, static_cast<std::uint32_t>(rng() % 4), 0.1);
        auto g = logistic_gradient(p, data);
        for (std::size_t k = 0; k < p.values.size(); ++k) {
            auto plus = p, minus = p;
            plus.values[k] += h;
            minus.values[k] -= h;
            double fd = (logistic_loss(plus, data) - logistic_loss(minus, data)) / (2 * h);
            double scale = std::max({std::abs(fd), std::abs(g[k]), 1e-3});
            ASSERT_LE(std::abs(fd - g[k]) / scale, 1e-6) << "inst " << inst << " k " << k;
        }
    }
}

TEST(LocalTrain, LossNonIncreasingAtSmallRate) {
    auto data = synth_dataset(1, 200, 2, 5.0);
    auto p = logistic_template(2);
    double prev = logistic_loss(p, data);
    for (int e = 0; e < 200; ++e) {
        p = local_train(p, data, 1, 0.01);
        double cur = logistic_loss(p, data);
        ASSERT_LE(cur, prev + 1e-15) << "epoch " << e;
        prev = cur;
    }
}

// In-process federated averaging loop with no broker, used to check the
// workload converges on the three-clinic shape.
TEST(LocalTrain, FederatedConvergenceOnSeparableShards) {
    std::vector<dataset> shards, held;
    for (std::uint64_t s = 1; s <= 3; ++s) {
        shards.push_back(synth_dataset(s, 200, 2, 5.0));
        held.push_back(synth_dataset(s, 200, 2, 5.0, 1));
    }
    auto global = logistic_template(2);
    for (int r = 0; r < 30; ++r) {
        std::vector<client_update> ups;
        for (std::size_t i = 0; i < shards.size(); ++i)
            ups.push_back({"c" + std::to_string(i), local_train(global, shards[i], 5, 0.1)});
        global = aggregate(ups);
    }
    EXPECT_GE(accuracy(global, concat(held)), 0.95);
}

// ---------------------------------------------------------------------------

TEST(PsMachine, StartPublishesRetainedTemplate) {
    ps_machine ps(fr, {}, logistic_template(2));
    auto acts = ps.step(ps_start{}, millis{0});
    ASSERT_EQ(acts.size(), 1u);
    const auto& pub = std::get<publish_action>(acts[0]);
    EXPECT_EQ(pub.topic, "f/c/job_request");
    EXPECT_TRUE(pub.retain);
    EXPECT_EQ(pub.env.kind, envelope_kind::model_template);
    EXPECT_EQ(pub.env.round, 1u);
    EXPECT_EQ(decode_parameters(pub.env.body), logistic_template(2));
    EXPECT_EQ(ps.phase(), ps_phase::collecting);
}

TEST(PsMachine, ThreeRepliesCompleteRound) {
    ps_machine ps(fr, {}, logistic_template(1));
    ps.step(ps_start{}, millis{0});
    for (const char* c : {"a", "b", "c"}) {
        auto p = logistic_template(1);
        p.values = {1.0, 2.0};
        p.num_samples = 10;
        auto acts = ps.step(ps_update{c, 1, p}, millis{5});
        if (std::string(c) != "c") {
            EXPECT_TRUE(acts.empty());
        }
        else {
            ASSERT_EQ(acts.size(), 3u);
            const auto& st = std::get<store_action>(acts[0]);
            EXPECT_EQ(st.round, 1u);
            EXPECT_EQ(st.model_version, 1u);
            EXPECT_EQ(st.contributors, (std::vector<std::string>{"a", "b", "c"}));
            const auto& pub = std::get<publish_action>(acts[2]);
            EXPECT_EQ(pub.env.kind, envelope_kind::global_model);
            EXPECT_EQ(pub.env.round, 2u);
            EXPECT_EQ(pub.env.model_version, 1u);
        }
    }
    EXPECT_EQ(ps.round(), 2u);
}

TEST(PsMachine, TimeoutAggregatesPartialSet) {
    round_config cfg;
    cfg.round_timeout = millis{100};
    ps_machine ps(fr, cfg, logistic_template(1));
    ps.step(ps_start{}, millis{0});
    auto p = logistic_template(1);
    p.num_samples = 4;
    ps.step(ps_update{"a", 1, p}, millis{1});
    ps.step(ps_update{"b", 1, p}, millis{2});
    EXPECT_TRUE(ps.step(ps_tick{}, millis{99}).empty());
    auto acts = ps.step(ps_tick{}, millis{100});
    ASSERT_FALSE(acts.empty());
    EXPECT_EQ(std::get<store_action>(acts[0]).contributors.size(), 2u);
    EXPECT_EQ(ps.round(), 2u);
    EXPECT_EQ(ps.deadline(), millis{200});
}

TEST(PsMachine, DuplicateUpdateIsLastWriteWins) {
    ps_machine ps(fr, {}, logistic_template(1));
    ps.step(ps_start{}, millis{0});
    auto p = logistic_template(1);
    p.num_samples = 1;
    p.values = {1, 1};
    ps.step(ps_update{"a", 1, p}, millis{0});
    p.values = {5, 5};
    ps.step(ps_update{"a", 1, p}, millis{0});
    EXPECT_EQ(ps.received().size(), 1u);
    EXPECT_EQ(ps.received().at("a").values[0], 5.0);
    EXPECT_EQ(ps.counters().duplicate_updates, 1u);
    auto acts = ps.step(ps_timeout{}, millis{1});
    EXPECT_EQ(std::get<store_action>(acts[0]).model.values, (std::vector<double>{5, 5}));
}

TEST(PsMachine, EmptyTimeoutStallsAndRepublishes) {
    ps_machine ps(fr, {}, logistic_template(1));
    ps.step(ps_start{}, millis{0});
    auto acts = ps.step(ps_timeout{}, millis{10});
    EXPECT_EQ(ps.phase(), ps_phase::collecting);
    EXPECT_EQ(ps.round(), 1u);
    EXPECT_EQ(ps.counters().stalls, 1u);
    bool republished = false;
    for (const auto& a : acts)
        if (auto* p = std::get_if<publish_action>(&a)) republished = p->env.round == 1;
    EXPECT_TRUE(republished);
}

TEST(PsMachine, DiscardsBadUpdates) {
    ps_machine ps(fr, {}, logistic_template(1));
    auto p = logistic_template(1);
    p.num_samples = 1;
    ps.step(ps_update{"a", 1, p}, millis{0}); // before start
    ps.step(ps_start{}, millis{0});
    ps.step(ps_update{"a", 2, p}, millis{0});           // wrong round
    ps.step(ps_update{"a", 1, logistic_template(3)}, millis{0}); // wrong layout
    auto z = p;
    z.num_samples = 0;
    ps.step(ps_update{"a", 1, z}, millis{0});
    EXPECT_EQ(ps.counters().discarded_updates, 4u);
    EXPECT_TRUE(ps.received().empty());
}

TEST(PsMachine, GoesIdleAfterMaxRounds) {
    round_config cfg;
    cfg.min_clients = 1;
    cfg.max_rounds = 3;
    ps_machine ps(fr, cfg, logistic_template(1), 7);
    ps.step(ps_start{}, millis{0});
    auto p = logistic_template(1);
    p.num_samples = 1;
    for (std::uint32_t r = 1; r <= 3; ++r) ps.step(ps_update{"a", r, p}, millis{0});
    EXPECT_EQ(ps.phase(), ps_phase::idle);
    EXPECT_TRUE(ps.finished());
    EXPECT_EQ(ps.model_version(), 10u);
    EXPECT_FALSE(ps.step(ps_start{}, millis{0}).empty()); // logged, ignored
    EXPECT_EQ(ps.phase(), ps_phase::idle);
}

TEST(RoundMachines, PublishesStayInsideCanonicalAclsAndRoundsIncrease) {
    std::mt19937_64 rng(31);
    std::vector<federation_ref> feds = {fr};
    auto ps_acl = canonical_ps_acl(feds);
    round_config cfg;
    cfg.min_clients = 2;
    cfg.max_rounds = 50;
    ps_machine ps(fr, cfg, logistic_template(2));
    ps.step(ps_start{}, millis{0});
    std::vector<client_machine> clients;
    for (const char* id : {"a", "b", "c"}) clients.emplace_back(fr, identifier(id), 10);
    std::uint32_t last_round = ps.round();
    std::vector<std::uint32_t> client_rounds(clients.size(), 0);
    for (int step = 0; step < 3000 && !ps.finished(); ++step) {
        std::size_t i = rng() % clients.size();
        auto& cm = clients[i];
        auto acl = canonical_client_acl(cm.client(), feds);
        std::uint32_t r = static_cast<std::uint32_t>(rng() % (ps.round() + 2));
        auto ev = rng() % 2 ? client_event{template_received{r, 0, logistic_template(2)}}
                            : client_event{training_done{cm.last_round(), logistic_template(2)}};
        for (const auto& a : cm.step(ev)) {
            if (auto* pub = std::get_if<publish_action>(&a)) {
                ASSERT_TRUE(authorize(acl, acl_action::publish, pub->topic)) << pub->topic;
                auto acts = ps.step(ps_update{cm.client().str(), pub->env.round, decode_parameters(pub->env.body)},
                                    millis{step});
                for (const auto& pa : acts) {
                    if (auto* pp = std::get_if<publish_action>(&pa)) {
                        ASSERT_TRUE(authorize(ps_acl, acl_action::publish, pp->topic)) << pp->topic;
                    }
                }
            }
        }
        ASSERT_GE(cm.last_round(), client_rounds[i]);
        client_rounds[i] = cm.last_round();
        if (rng() % 50 == 0) ps.step(ps_timeout{}, millis{step});
        ASSERT_GE(ps.round(), last_round);
        last_round = ps.round();
    }
    EXPECT_GT(ps.round(), 10u);
}

TEST(ClientMachine, TrainsAndTagsRound) {
    client_machine cm(fr, identifier("k"), 200, 1);
    auto acts = cm.step(template_received{5, 4, logistic_template(2)});
    ASSERT_EQ(acts.size(), 1u);
    EXPECT_EQ(std::get<train_action>(acts[0]).round, 5u);
    EXPECT_EQ(cm.phase(), client_phase::training);
    acts = cm.step(training_done{5, logistic_template(2)});
    ASSERT_EQ(acts.size(), 1u);
    const auto& pub = std::get<publish_action>(acts[0]);
    EXPECT_EQ(pub.topic, "f/c/job_replies/k");
    EXPECT_EQ(pub.qos, 1);
    EXPECT_EQ(pub.env.kind, envelope_kind::local_update);
    EXPECT_EQ(pub.env.round, 5u);
    EXPECT_EQ(pub.env.model_version, 4u);
    EXPECT_EQ(pub.env.client, "k");
    EXPECT_EQ(decode_parameters(pub.env.body).num_samples, 200u);
    EXPECT_EQ(cm.phase(), client_phase::waiting_template);
}

TEST(ClientMachine, IgnoresStaleTemplates) {
    client_machine cm(fr, identifier("k"), 1);
    cm.step(template_received{5, 0, logistic_template(1)});
    EXPECT_TRUE(cm.step(training_done{4, logistic_template(1)}).empty());
    auto acts = cm.step(template_received{3, 0, logistic_template(1)});
    EXPECT_FALSE(std::holds_alternative<train_action>(acts.at(0)));
    EXPECT_EQ(cm.stale_ignored(), 2u);
    EXPECT_EQ(cm.last_round(), 5u);
}

TEST(ClientMachine, LeaveUnsubscribesAndHalts) {
    client_machine cm(fr, identifier("k"), 1);
    cm.step(template_received{1, 0, logistic_template(1)});
    auto acts = cm.step(client_leave{});
    ASSERT_EQ(acts.size(), 2u);
    EXPECT_EQ(std::get<unsubscribe_action>(acts[0]).filter, "f/c/job_request");
    EXPECT_TRUE(std::holds_alternative<halt_action>(acts[1]));
    EXPECT_TRUE(cm.halted());
    EXPECT_TRUE(cm.step(template_received{2, 0, logistic_template(1)}).empty());
}
