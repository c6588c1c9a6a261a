#include <doctest.h>

#include "csgd/gradcheck.hpp"
#include "csgd/optimizer.hpp"
#include "support.hpp"

using namespace csgd;
using namespace testing;

namespace {

template <typename T>
Gradients<T> random_gradients(const Network<T>& net, std::mt19937_64& rng)
{
    Gradients<T> g;
    g.layers.resize(net.size());
    for (std::size_t id = 0; id < net.size(); ++id) {
        if (!net.layer(LayerId(id)).parametric())
            continue;
        const auto& p = net.params(LayerId(id));
        auto& q = g.layers[id];
        q.kernel = random_tensor<T>(p.kernel.shape(), rng);
        q.mu.assign(p.mu.size(), T(0));
        q.sigma.assign(p.sigma.size(), T(0));
        q.gamma = random_vector<T>(p.gamma.size(), rng, -1, 1);
        q.beta = random_vector<T>(p.beta.size(), rng, -1, 1);
    }
    return g;
}

template <typename T>
Network<T> toy_net(const Tensor4<T>& kernel)
{
    const std::size_t c = kernel.dim(3);
    std::mt19937_64 rng(1);
    return Network<T>({{OpKind::Conv, LayerParams<T>::identity_bn(kernel, 1, kernel.dim(0) / 2), 0},
                       {OpKind::GlobalAvgPool, {}, 0},
                       {OpKind::FullyConnected, LayerParams<T>::identity_bn(random_tensor<T>({1, 1, c, 2}, rng)), 0}},
                      {{0, 1, Combine::Sequential}, {1, 2, Combine::Sequential}});
}

ClusterAssignment random_assignment(const Network<double>& net, std::mt19937_64& rng)
{
    ClusterAssignment a;
    for (LayerId id : net.conv_layers()) {
        const std::size_t c = net.channels()[id];
        a.emplace(id, random_clusters(id, c, 1 + rng() % c, rng));
    }
    return propagate_constraints(constraint_groups(net), a);
}

// Deviation of every clustered kernel / gamma / beta entry from its cluster mean.
std::vector<double> deviations(const Network<double>& net, const ClusterAssignment& clusters)
{
    std::vector<double> out;
    for (const auto& [id, cs] : clusters) {
        const auto& p = net.params(id);
        const std::size_t c = p.out_channels(), rows = p.fan_in();
        auto push = [&](auto value) {
            for (const auto& h : cs.clusters())
                for (FilterIndex j : h) {
                    double mean = 0;
                    for (FilterIndex k : h)
                        mean += value(k);
                    out.push_back(value(j) - mean / double(h.size()));
                }
        };
        for (std::size_t r = 0; r < rows; ++r)
            push([&](FilterIndex j) { return p.kernel.data()[r * c + j]; });
        push([&](FilterIndex j) { return p.gamma[j]; });
        push([&](FilterIndex j) { return p.beta[j]; });
    }
    return out;
}

double max_param_diff(const Network<double>& a, const Network<double>& b)
{
    double m = 0;
    for (std::size_t id = 0; id < a.size(); ++id) {
        if (!a.layer(LayerId(id)).parametric())
            continue;
        const auto &p = a.params(LayerId(id)), &q = b.params(LayerId(id));
        m = std::max(m, max_abs_diff(p.kernel, q.kernel));
        for (std::size_t j = 0; j < p.gamma.size(); ++j)
            m = std::max({m, std::abs(p.gamma[j] - q.gamma[j]), std::abs(p.beta[j] - q.beta[j])});
    }
    return m;
}

} // namespace

TEST_CASE("learning rate schedule")
{
    const auto s = LrSchedule::parse("0:0.1,30:0.01,50:0.001");
    CHECK(s.at(0) == 0.1);
    CHECK(s.at(29) == 0.1);
    CHECK(s.at(30) == 0.01);
    CHECK(s.at(99) == 0.001);
    CHECK(LrSchedule::parse("0.05").at(7) == 0.05);
    CHECK(LrSchedule::parse(s.format()).points == s.points);
    CHECK_THROWS_AS(LrSchedule::parse("0:-1"), ConfigError);
    CHECK_THROWS_AS(LrSchedule::parse("5:0.1"), ConfigError);
    OptimizerConfig c;
    c.eps = -1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("singleton clusters bit-match plain SGD")
{
    std::mt19937_64 rng(2);
    for (const auto& spec : {plain_spec(2), residual_spec(2, {4, 6}, 1), dense_spec(2)}) {
        auto base = build_network<double>(spec);
        randomize_statistics(base, rng);
        const auto g = random_gradients(base, rng);
        ClusterAssignment singles;
        for (LayerId id : base.conv_layers())
            singles.emplace(id, ClusterSet::singletons(id, base.channels()[id]));
        const StepSettings s{0.05, 1e-3, 0.7, 0};
        auto sgd = base, direct = base, matrix = base;
        sgd_step(sgd, g, s);
        csgd_step_direct(direct, g, singles, s);
        csgd_step_matrix(matrix, g, singles, s);
        CHECK(direct == sgd);
        CHECK(matrix == sgd);
    }
}

TEST_CASE("sgd step is F - tau (g + eta F)")
{
    std::mt19937_64 rng(3);
    auto net = build_network<double>(plain_spec(3, {3}));
    const auto before = net;
    const auto g = random_gradients(net, rng);
    sgd_step(net, g, StepSettings{0.1, 0.01, 0, 0});
    const LayerId id = net.conv_layers()[0];
    for (std::size_t i = 0; i < net.params(id).kernel.size(); ++i) {
        const double w = before.params(id).kernel.data()[i], gi = g.layers[id].kernel.data()[i];
        CHECK(net.params(id).kernel.data()[i] == doctest::Approx(w - 0.1 * (gi + 0.01 * w)).epsilon(1e-14));
    }
    // running statistics are untouched
    CHECK(net.params(id).mu == before.params(id).mu);
    CHECK(net.params(id).sigma == before.params(id).sigma);
}

TEST_CASE("every cluster deviation contracts by exactly 1 - tau(eta + eps)")
{
    std::mt19937_64 rng(4);
    const StepSettings s{0.03, 1e-4, 0.2, 0};
    const double factor = 1 - s.tau * (s.eta + s.eps);
    for (int trial = 0; trial < 20; ++trial) {
        auto net = build_network<double>(trial % 2 ? residual_spec(4 + trial, {6}, 2) : plain_spec(4 + trial));
        randomize_statistics(net, rng);
        const auto clusters = random_assignment(net, rng);
        const auto before = deviations(net, clusters);
        csgd_step_direct(net, random_gradients(net, rng), clusters, s);
        const auto after = deviations(net, clusters);
        REQUIRE(before.size() == after.size());
        double worst = 0;
        for (std::size_t i = 0; i < before.size(); ++i)
            worst = std::max(worst, std::abs(after[i] - factor * before[i]));
        CHECK(worst < 1e-14);
    }
}

TEST_CASE("matrix and direct forms agree over random single steps")
{
    std::mt19937_64 rng(5);
    double worst64 = 0, worst32 = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const auto spec = trial % 3 == 0 ? plain_spec(trial) : trial % 3 == 1 ? residual_spec(trial, {4, 6}, 1)
                                                                               : dense_spec(trial);
        auto net = build_network<double>(spec);
        randomize_statistics(net, rng);
        const auto clusters = random_assignment(net, rng);
        const auto g = random_gradients(net, rng);
        const StepSettings s{0.05, 1e-3, 0.5, 0};
        auto d = net, m = net;
        csgd_step_direct(d, g, clusters, s);
        csgd_step_matrix(m, g, clusters, s);
        worst64 = std::max(worst64, max_param_diff(d, m));

        auto df = net.cast<float>(), mf = net.cast<float>();
        Gradients<float> gf;
        for (const auto& l : g.layers)
            gf.layers.push_back(l.cast<float>());
        csgd_step_direct(df, gf, clusters, s);
        csgd_step_matrix(mf, gf, clusters, s);
        worst32 = std::max(worst32, max_param_diff(df.cast<double>(), mf.cast<double>()));
    }
    CHECK(worst64 <= 1e-12);
    CHECK(worst32 <= 1e-6);
}

TEST_CASE("matrix form with singletons and zero gradient")
{
    std::mt19937_64 rng(6);
    auto net = build_network<double>(plain_spec(6, {4}));
    const auto before = net;
    auto g = random_gradients(net, rng);
    for (auto& l : g.layers) {
        l.kernel.fill(0.0);
        std::fill(l.gamma.begin(), l.gamma.end(), 0.0);
        std::fill(l.beta.begin(), l.beta.end(), 0.0);
    }
    const LayerId id = net.conv_layers()[0];
    csgd_step_matrix(net, g, {{id, even_clusters(4, 2, id)}}, StepSettings{0.1, 0.02, 0, 0});
    for (std::size_t i = 0; i < net.params(id).kernel.size(); ++i)
        CHECK(net.params(id).kernel.data()[i] ==
              doctest::Approx(before.params(id).kernel.data()[i] * (1 - 0.1 * 0.02)).epsilon(1e-14));
}

TEST_CASE("chi examples")
{
    Tensor4<double> k({1, 1, 1, 2});
    k.data()[0] = 1;
    k.data()[1] = 3;
    auto net = toy_net(k);
    CHECK(chi(net, {{0, ClusterSet(0, 2, {{0, 1}})}}) == doctest::Approx(2.0));
    CHECK(chi(net, {{0, ClusterSet::singletons(0, 2)}}) == 0.0);
    k.data()[1] = 1;
    CHECK(chi(toy_net(k), {{0, ClusterSet(0, 2, {{0, 1}})}}) == 0.0);
}

TEST_CASE("phi examples")
{
    Tensor4<double> k({3, 3, 2, 3}, 0.0);
    for (std::size_t r = 0; r < 18; ++r)
        k.data()[r * 3 + 1] = 1.0;
    const auto net = toy_net(k);
    CHECK(phi(net, {}) == 0.0);
    CHECK(phi(net, {{0, {1}}}) == doctest::Approx(18.0));
    CHECK(phi(net, {{0, {0, 2}}}) == 0.0);
    CHECK(prune_sets_from_keep_counts({{0, 1}}, {3}) == PruneSets{{0, {1, 2}}});
}

TEST_CASE("identical cluster members stay identical")
{
    std::mt19937_64 rng(7);
    auto net = build_network<double>(residual_spec(7, {6}, 2));
    randomize_statistics(net, rng);
    const auto clusters = random_assignment(net, rng);
    make_identical(net, clusters);
    for (int step = 0; step < 20; ++step)
        csgd_step_direct(net, random_gradients(net, rng), clusters, StepSettings{0.05, 1e-3, 0.0, 0});
    CHECK(max_cluster_deviation(net, clusters) == 0.0);

    auto f = net.cast<float>();
    for (int step = 0; step < 20; ++step) {
        Gradients<float> gf;
        for (const auto& l : random_gradients(net, rng).layers)
            gf.layers.push_back(l.cast<float>());
        csgd_step_matrix(f, gf, clusters, StepSettings{0.05, 1e-3, 3e-3, 0});
    }
    CHECK(max_cluster_deviation(f, clusters) <= 1e-7);
}

TEST_CASE("cluster mismatches are structural errors")
{
    auto net = build_network<double>(plain_spec(8, {4, 5}));
    std::mt19937_64 rng(8);
    const auto g = random_gradients(net, rng);
    const LayerId id = net.conv_layers()[0];
    CHECK_THROWS_AS(csgd_step_direct(net, g, {{id, even_clusters(5, 2, id)}}, StepSettings{}), StructuralError);
    CHECK_THROWS_AS(csgd_step_matrix(net, g, {{1, even_clusters(4, 2, 1)}}, StepSettings{}), StructuralError);
}

TEST_CASE("group lasso step")
{
    std::mt19937_64 rng(9);
    SUBCASE("zero strength is plain SGD")
    {
        auto net = build_network<double>(plain_spec(9));
        const auto g = random_gradients(net, rng);
        auto a = net, b = net;
        sgd_step(a, g, StepSettings{0.05, 1e-3, 0, 0});
        group_lasso_step(b, g, {{net.conv_layers()[0], {0, 1}}}, StepSettings{0.05, 1e-3, 0, 0});
        CHECK(a == b);
    }
    SUBCASE("single-parameter filter shrinks by tau * strength while large")
    {
        Tensor4<double> k({1, 1, 1, 2});
        k.data()[0] = 2.0;
        k.data()[1] = -1.5;
        auto net = toy_net(k);
        Gradients<double> zero = random_gradients(net, rng);
        for (auto& l : zero.layers) {
            l.kernel.fill(0.0);
            std::fill(l.gamma.begin(), l.gamma.end(), 0.0);
            std::fill(l.beta.begin(), l.beta.end(), 0.0);
        }
        const StepSettings s{0.1, 0.0, 0, 0.5};
        group_lasso_step(net, zero, {{0, {0, 1}}}, s);
        CHECK(net.params(0).kernel.data()[0] == doctest::Approx(1.95));
        CHECK(net.params(0).kernel.data()[1] == doctest::Approx(-1.45));
        double last = 2.0;
        for (int i = 0; i < 100; ++i) {
            group_lasso_step(net, zero, {{0, {0, 1}}}, s);
            const double w = std::abs(net.params(0).kernel.data()[0]);
            CHECK(w <= last);
            last = w;
        }
        CHECK(last == 0.0);
        // at the origin the penalty does nothing
        group_lasso_step(net, zero, {{0, {0}}}, s);
        CHECK(net.params(0).kernel.data()[0] == 0.0);
    }
    SUBCASE("penalty never grows a norm without data gradient")
    {
        for (int trial = 0; trial < 50; ++trial) {
            auto net = build_network<double>(plain_spec(100 + trial, {3, 4}));
            Gradients<double> zero = random_gradients(net, rng);
            for (auto& l : zero.layers)
                l.kernel.fill(0.0);
            const LayerId id = net.conv_layers()[1];
            const double strength = std::uniform_real_distribution<double>(0, 20)(rng);
            auto norm = [&](FilterIndex j) {
                double s = 0;
                const auto& p = net.params(id);
                for (std::size_t r = 0; r < p.fan_in(); ++r)
                    s += p.kernel.data()[r * 4 + j] * p.kernel.data()[r * 4 + j];
                return std::sqrt(s);
            };
            const double before = norm(2);
            group_lasso_step(net, zero, {{id, {2}}}, StepSettings{0.1, 0.0, 0, strength});
            CHECK(norm(2) <= before);
        }
    }
}

TEST_CASE("trained direct and matrix runs stay together")
{
    std::mt19937_64 rng(10);
    auto d = build_network<double>(residual_spec(10, {4}, 1));
    const auto x = random_tensor<double>({4, 6, 6, 1}, rng);
    calibrate_statistics(d, x);
    const std::vector<std::int32_t> y{0, 1, 2, 1};
    auto clusters = propagate_constraints(constraint_groups(d), {{0, even_clusters(4, 2, 0)}});
    clusters.emplace(2, even_clusters(4, 3, 2));
    auto m = d;
    const StepSettings s{0.05, 1e-4, 0.05, 0};
    double worst = 0;
    for (int step = 0; step < 200; ++step) {
        csgd_step_direct(d, loss_gradients(d, x, y), clusters, s);
        csgd_step_matrix(m, loss_gradients(m, x, y), clusters, s);
        worst = std::max(worst, max_param_diff(d, m));
    }
    CHECK(worst <= 1e-12);
}
