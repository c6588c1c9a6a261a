#include <doctest.h>

#include "csgd/optimizer.hpp"
#include "csgd/trimming.hpp"
#include "support.hpp"

using namespace csgd;
using namespace testing;

namespace {

using Clusters = std::vector<std::vector<FilterIndex>>;

template <typename T>
ClusterAssignment random_assignment(const Network<T>& net, std::mt19937_64& rng)
{
    ClusterAssignment a;
    for (LayerId id : net.conv_layers()) {
        const std::size_t c = net.channels()[id];
        a.emplace(id, random_clusters(id, c, 1 + rng() % c, rng));
    }
    return propagate_constraints(constraint_groups(net), a);
}

template <typename T>
double logit_diff(const Network<T>& a, const Network<T>& b, std::mt19937_64& rng, std::size_t n = 20)
{
    const auto x = random_tensor<T>({n, 8, 8, a.input_channels()}, rng);
    return max_abs_diff(a.forward(x), b.forward(x));
}

NetworkSpec spec_for(int topology, std::uint64_t seed)
{
    if (topology == 0)
        return plain_spec(seed, {6, 8, 5});
    if (topology == 1)
        return residual_spec(seed, {6, 8}, 2);
    return dense_spec(seed);
}

} // namespace

TEST_CASE("remaining set examples")
{
    CHECK(remaining_set(ClusterSet(3, 6, Clusters{{0, 1}, {2, 3}, {4}, {5}})) == RemainingSet{3, {0, 2, 4, 5}});
    CHECK(remaining_set(ClusterSet::singletons(0, 4)).indices == std::vector<FilterIndex>{0, 1, 2, 3});
    CHECK(remaining_set(ClusterSet(0, 4, Clusters{{2, 1, 3, 0}})).indices == std::vector<FilterIndex>{0});
    CHECK(remaining_set(ClusterSet(0, 5, Clusters{{4, 1}, {0, 3}, {2}})).indices == std::vector<FilterIndex>{0, 1, 2});
}

TEST_CASE("slicing shapes")
{
    std::mt19937_64 rng(1);
    const auto p = random_layer<double>(3, 2, 6, 1, 1, rng);
    const RemainingSet rs{0, {0, 2, 4, 5}};
    const auto s = slice_layer(p, rs, 6);
    CHECK(s.kernel.shape() == Shape4{3, 3, 2, 4});
    CHECK(s.mu.size() == 4);
    CHECK(s.sigma.size() == 4);
    CHECK(s.gamma.size() == 4);
    CHECK(s.beta.size() == 4);
    CHECK(s.gamma[1] == p.gamma[2]);
    CHECK(s.kernel(1, 2, 1, 3) == p.kernel(1, 2, 1, 5));
    CHECK(slice_layer(p, remaining_set(ClusterSet::singletons(0, 6)), 6) == p);

    const auto consumer = random_layer<double>(3, 6, 5, 1, 1, rng);
    const auto c = slice_consumer_inputs(consumer, rs, 6, 0);
    CHECK(c.kernel.shape() == Shape4{3, 3, 4, 5});
    CHECK(c.kernel(0, 1, 3, 2) == consumer.kernel(0, 1, 5, 2));
    // a block at offset 2 of a 10-channel input
    const auto wide = random_layer<double>(1, 10, 3, 1, 0, rng);
    const auto w = slice_consumer_inputs(wide, rs, 6, 2);
    CHECK(w.kernel.dim(2) == 8);
    CHECK(w.kernel(0, 0, 1, 0) == wide.kernel(0, 0, 1, 0));
    CHECK(w.kernel(0, 0, 3, 0) == wide.kernel(0, 0, 4, 0));
    CHECK(w.kernel(0, 0, 6, 0) == wide.kernel(0, 0, 8, 0));

    CHECK_THROWS_AS(slice_layer(p, RemainingSet{0, {0, 6}}, 6), InputError);
    CHECK_THROWS_AS(slice_consumer_inputs(wide, rs, 6, 6), InputError);
}

TEST_CASE("merging two identical producers sums the consumer slices")
{
    std::mt19937_64 rng(2);
    auto net = build_network<double>(plain_spec(2, {2, 3}));
    const auto convs = net.conv_layers();
    make_identical(net, {{convs[0], ClusterSet(convs[0], 2, Clusters{{0, 1}})}});
    const auto before = net;
    const auto cs = ClusterSet(convs[0], 2, Clusters{{0, 1}});
    merge_consumer_inputs(net, convs[0], cs);
    const auto& a = before.params(convs[1]).kernel;
    const auto& m = net.params(convs[1]).kernel;
    for (std::size_t u = 0; u < 3; ++u)
        for (std::size_t v = 0; v < 3; ++v)
            for (std::size_t o = 0; o < 3; ++o) {
                CHECK(m(u, v, 0, o) == doctest::Approx(a(u, v, 0, o) + a(u, v, 1, o)));
                CHECK(m(u, v, 1, o) == a(u, v, 1, o));
            }
    // singletons leave consumers alone
    auto again = before;
    merge_consumer_inputs(again, convs[0], ClusterSet::singletons(convs[0], 2));
    CHECK(again == before);
}

TEST_CASE("merge refuses non-identical filters and reports the deviation")
{
    auto net = build_network<double>(plain_spec(3, {4, 3}));
    const LayerId id = net.conv_layers()[0];
    try {
        merge_consumer_inputs(net, id, even_clusters(4, 2, id));
        FAIL("expected a refusal");
    } catch (const NotIdenticalError& e) {
        CHECK(std::string(e.what()).find("filters not identical") != std::string::npos);
        CHECK(std::string(e.what()).find("worst deviation") != std::string::npos);
    }
}

TEST_CASE("dense merge touches only the producer's offset block")
{
    std::mt19937_64 rng(4);
    auto net = build_network<double>(dense_spec(4));
    randomize_statistics(net, rng);
    const auto convs = net.conv_layers();
    const LayerId producer = convs[1]; // first incremental layer, width 4 at offset 6 downstream
    const ClusterSet cs(producer, 4, Clusters{{0, 3}, {1}, {2}});
    make_identical(net, {{producer, cs}});
    const auto before = net;
    merge_consumer_inputs(net, producer, cs);
    const auto& a = before.params(convs[3]).kernel;
    const auto& m = net.params(convs[3]).kernel;
    for (std::size_t ch = 0; ch < a.dim(2); ++ch)
        for (std::size_t o = 0; o < a.dim(3); ++o) {
            const double want = ch == 6 ? a(1, 1, 6, o) + a(1, 1, 9, o) : a(1, 1, ch, o);
            CHECK(m(1, 1, ch, o) == doctest::Approx(want).epsilon(1e-14));
        }
    CHECK(logit_diff(before, net, rng) > 0); // merging alone is not the whole trim
}

TEST_CASE("lossless trim on randomized identical networks")
{
    std::mt19937_64 rng(5);
    for (int topology = 0; topology < 3; ++topology) {
        double worst64 = 0, worst32 = 0;
        for (int trial = 0; trial < 25; ++trial) {
            auto net = build_network<double>(spec_for(topology, 1000 + trial));
            randomize_statistics(net, rng);
            const auto clusters = random_assignment(net, rng);
            make_identical(net, clusters);
            const auto groups = constraint_groups(net);
            TrimOptions o;
            o.collapse = CollapsePolicy::RequireIdentical;
            const auto trimmed = trim_network(net, clusters, groups, o);
            worst64 = std::max(worst64, logit_diff(net, trimmed, rng));
            for (const auto& [id, cs] : clusters)
                CHECK(trimmed.channels()[id] == cs.size());

            const auto f = net.cast<float>();
            const auto tf = trim_network(f, clusters, groups);
            worst32 = std::max(worst32, logit_diff(f, tf, rng));
        }
        INFO("topology ", topology);
        CHECK(worst64 <= 1e-9);
        CHECK(worst32 <= 1e-4);
    }
}

TEST_CASE("trim examples")
{
    std::mt19937_64 rng(6);
    SUBCASE("plain pairs halve the widths")
    {
        auto net = build_network<float>(plain_spec(6, {6, 8}));
        randomize_statistics(net, rng);
        ClusterAssignment a;
        for (LayerId id : net.conv_layers())
            a.emplace(id, even_clusters(net.channels()[id], net.channels()[id] / 2, id));
        make_identical(net, a);
        const auto t = trim_network(net, a, {});
        CHECK(t.channels()[net.conv_layers()[0]] == 3);
        CHECK(t.channels()[net.conv_layers()[1]] == 4);
        const auto r = verify_equivalence(net, t);
        CHECK(r.passed);
        CHECK(r.samples == 100);
    }
    SUBCASE("residual 5/8 trims pacesetter and followers together")
    {
        auto net = build_network<float>(residual_spec(6, {8}, 2));
        randomize_statistics(net, rng);
        const auto groups = constraint_groups(net);
        auto a = propagate_constraints(groups, {{0, kmeans_clusters(net.params(0).kernel, 5, 1, 0)}});
        for (LayerId id : net.conv_layers())
            if (!a.count(id))
                a.emplace(id, even_clusters(8, 5, id));
        make_identical(net, a);
        const auto t = trim_network(net, a, groups);
        for (LayerId id : net.conv_layers())
            CHECK(t.channels()[id] == 5);
        CHECK(verify_equivalence(net, t).passed);
    }
    SUBCASE("singletons return the same network")
    {
        const auto net = build_network<float>(dense_spec(6));
        ClusterAssignment a;
        for (LayerId id : net.conv_layers())
            a.emplace(id, ClusterSet::singletons(id, net.channels()[id]));
        CHECK(trim_network(net, a, {}) == net);
        CHECK(trim_network(net, {}, {}) == net);
    }
}

TEST_CASE("trim without collapse at deviation 0.1 fails verification")
{
    std::mt19937_64 rng(7);
    auto net = build_network<float>(plain_spec(7, {6, 6}));
    randomize_statistics(net, rng);
    const LayerId id = net.conv_layers()[0];
    const ClusterAssignment a{{id, even_clusters(6, 3, id)}};
    make_identical(net, a);
    auto& k = net.params(id).kernel;
    for (std::size_t r = 0; r < net.params(id).fan_in(); ++r)
        k.data()[r * 6 + 1] += 0.1f;
    TrimOptions o;
    o.collapse = CollapsePolicy::None;
    const auto t = trim_network(net, a, {}, o);
    const auto r = verify_equivalence(net, t);
    CHECK_FALSE(r.passed);
    CHECK(r.max_abs_diff > 1e-2);
    o.collapse = CollapsePolicy::RequireIdentical;
    CHECK_THROWS_AS(trim_network(net, a, {}, o), NotIdenticalError);
}

TEST_CASE("trim is idempotent")
{
    std::mt19937_64 rng(8);
    auto net = build_network<double>(residual_spec(8, {6, 8}, 2));
    const auto a = random_assignment(net, rng);
    const auto t = trim_network(net, a, constraint_groups(net));
    ClusterAssignment singles;
    for (LayerId id : t.conv_layers())
        singles.emplace(id, ClusterSet::singletons(id, t.channels()[id]));
    CHECK(trim_network(t, singles, constraint_groups(t)) == t);
}

TEST_CASE("trimmed parameter count matches the kept widths")
{
    std::mt19937_64 rng(9);
    auto net = build_network<float>(plain_spec(9, {6, 8, 5}));
    const auto convs = net.conv_layers();
    const ClusterAssignment a{{convs[0], even_clusters(6, 4, convs[0])},
                              {convs[1], even_clusters(8, 3, convs[1])},
                              {convs[2], even_clusters(5, 2, convs[2])}};
    const auto t = trim_network(net, a, {});
    // conv k x k x cin x cout + 4 vectors, fc cin x classes + bias
    const std::size_t want = (9 * 1 * 4 + 16) + (9 * 4 * 3 + 12) + (9 * 3 * 2 + 8) + (2 * 3 + 3);
    CHECK(count_cost(t, 8, 8).parameters == want);
}

TEST_CASE("desynchronized follower clusters are rejected before mutation")
{
    auto net = build_network<float>(residual_spec(10, {8}, 2));
    const auto groups = constraint_groups(net);
    const auto snapshot = net;
    ClusterAssignment a{{groups[0].pacesetter, even_clusters(8, 5, groups[0].pacesetter)},
                        {groups[0].followers[0], even_clusters(8, 4, groups[0].followers[0])}};
    try {
        trim_network(net, a, groups);
        FAIL("expected a constraint violation");
    } catch (const StructuralError& e) {
        CHECK(std::string(e.what()).find("constraint violation") != std::string::npos);
    }
    CHECK(net == snapshot);
    // even without passing the groups, the network's own adds are checked
    CHECK_THROWS_AS(trim_network(net, a, {}), StructuralError);
    const auto fixed = propagate_constraints(groups, {{groups[0].pacesetter, a.at(groups[0].pacesetter)}});
    CHECK_NOTHROW(trim_network(net, fixed, groups));
}

TEST_CASE("magnitude pruning")
{
    std::mt19937_64 rng(11);
    SUBCASE("keeping every filter is the identity")
    {
        const auto net = build_network<float>(residual_spec(11, {6}, 1));
        std::map<LayerId, std::size_t> keep;
        for (LayerId id : net.conv_layers())
            keep[id] = 6;
        CHECK(magnitude_prune(net, keep, constraint_groups(net)) == net);
    }
    SUBCASE("a zero filter with zero offset is removed losslessly")
    {
        auto net = build_network<double>(plain_spec(11, {5, 4}));
        randomize_statistics(net, rng);
        const LayerId id = net.conv_layers()[0];
        auto& p = net.params(id);
        for (std::size_t r = 0; r < p.fan_in(); ++r)
            p.kernel.data()[r * 5 + 3] = 0.0;
        p.mu[3] = 0;
        p.beta[3] = 0;
        const auto t = magnitude_prune(net, {{id, 4}}, {});
        CHECK(t.channels()[id] == 4);
        CHECK(logit_diff(net, t, rng) < 1e-12);
        // the same zero filter with a nonzero offset is destructive
        p.beta[3] = 1.0;
        CHECK(logit_diff(net, magnitude_prune(net, {{id, 4}}, {}), rng) > 1e-6);
    }
    SUBCASE("followers use the pacesetter ranking; conflicting counts are rejected")
    {
        const auto net = build_network<float>(residual_spec(12, {6}, 2));
        const auto groups = constraint_groups(net);
        const auto t = magnitude_prune(net, {{groups[0].pacesetter, 4}}, groups);
        for (LayerId m : groups[0].members())
            CHECK(t.channels()[m] == 4);
        CHECK_THROWS_AS(magnitude_prune(net, {{groups[0].pacesetter, 4}, {groups[0].followers[1], 3}}, groups),
                        StructuralError);
        CHECK_THROWS_AS(magnitude_prune(net, {{groups[0].pacesetter, 0}}, groups), InputError);
    }
}

TEST_CASE("5/8 trim of the toy resnet removes about 61% of the MACs")
{
    auto net = build_network<float>(residual_spec(13, {16, 32, 64}, 2));
    ClusterAssignment a;
    for (LayerId id : net.conv_layers())
        a.emplace(id, even_clusters(net.channels()[id], net.channels()[id] * 5 / 8, id));
    a = propagate_constraints(constraint_groups(net), a);
    make_identical(net, a);
    const auto t = trim_network(net, a, constraint_groups(net));
    VerifyOptions o;
    o.samples = 8;
    o.height = o.width = 16;
    const auto r = verify_equivalence(net, t, o);
    CHECK(r.passed);
    CHECK(std::abs(r.flop_reduction - (1 - 25.0 / 64)) < 0.01);
    const std::string report = trim_report(net, t, 16, 16);
    CHECK(report.find("\"macs\"") != std::string::npos);
}
