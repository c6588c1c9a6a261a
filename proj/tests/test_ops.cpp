#include <doctest.h>

#include "csgd/gradcheck.hpp"
#include "support.hpp"

using namespace csgd;
using namespace testing;

TEST_CASE("tensor construction validates length")
{
    CHECK_THROWS_AS(Tensor4<float>({1, 2, 2, 1}, std::vector<float>(3)), DimensionError);
    Tensor4<float> t({1, 2, 3, 4}, 1.5f);
    CHECK(t.size() == 24);
    CHECK(t(0, 1, 2, 3) == 1.5f);
    CHECK(t.all_finite());
    t(0, 0, 0, 0) = std::numeric_limits<float>::quiet_NaN();
    CHECK_FALSE(t.all_finite());
}

TEST_CASE("layer params validate lengths and sigma floor")
{
    auto p = LayerParams<double>::identity_bn(Tensor4<double>({1, 1, 2, 3}));
    CHECK_NOTHROW(p.validate("l"));
    p.sigma[1] = 1e-6;
    CHECK_THROWS(p.validate("l"));
    p.sigma[1] = 1;
    p.beta.pop_back();
    CHECK_THROWS_AS(p.validate("l"), DimensionError);
}

TEST_CASE("scalar conv with identity normalization is x*w")
{
    Tensor4<double> x({1, 1, 1, 1}, 2.5);
    auto p = LayerParams<double>::identity_bn(Tensor4<double>({1, 1, 1, 1}, -1.5));
    CHECK(conv_bn_forward(x, p)(0, 0, 0, 0) == doctest::Approx(-3.75));
}

TEST_CASE("scalar conv applies the folded normalization")
{
    Tensor4<double> x({1, 1, 1, 1}, 2.0);
    auto p = LayerParams<double>::identity_bn(Tensor4<double>({1, 1, 1, 1}, 3.0));
    p.mu = {1.0};
    p.sigma = {4.0};
    p.gamma = {0.5};
    p.beta = {0.25};
    // g (x w - m) / s + b
    CHECK(conv_bn_forward(x, p)(0, 0, 0, 0) == doctest::Approx(0.5 * (6.0 - 1.0) / 4.0 + 0.25));

    Tensor4<double> g({1, 1, 1, 1}, 1.0);
    ConvCache<double> cache;
    conv_bn_forward(x, p, &cache);
    const auto grads = conv_bn_backward(x, p, g, &cache);
    CHECK(grads.params.kernel(0, 0, 0, 0) == doctest::Approx(0.5 * 2.0 / 4.0));
    CHECK(grads.params.mu[0] == 0.0);
    CHECK(grads.params.sigma[0] == 0.0);
}

TEST_CASE("conv matches the six-loop oracle")
{
    std::mt19937_64 rng(11);
    for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 1}, {1, 0}, {2, 0}}) {
        const auto x = random_tensor<float>({2, 5, 5, 3}, rng);
        const auto p = random_layer<float>(3, 3, 4, stride, pad, rng);
        const auto got = conv_bn_forward(x, p);
        const auto want = naive_conv_bn(x, p);
        REQUIRE(got.shape() == want.shape());
        CHECK(max_abs_diff(got, want) < 1e-5);
    }
}

TEST_CASE("conv output size follows zero-padded arithmetic")
{
    CHECK(conv_output_size(12, 3, 1, 1) == 12);
    CHECK(conv_output_size(12, 3, 2, 1) == 6);
    CHECK(conv_output_size(5, 3, 2, 0) == 2);
    CHECK_THROWS(conv_output_size(2, 3, 1, 0));
}

TEST_CASE("conv rejects a channel mismatch and names the layer")
{
    std::mt19937_64 rng(1);
    const auto x = random_tensor<float>({1, 4, 4, 2}, rng);
    const auto p = random_layer<float>(3, 3, 4, 1, 1, rng);
    try {
        conv_bn_forward<float>(x, p, nullptr, "layer 7 (conv)");
        FAIL("expected a dimension error");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("layer 7") != std::string::npos);
        CHECK(msg.find('3') != std::string::npos);
        CHECK(msg.find('2') != std::string::npos);
    }
}

TEST_CASE("conv is linear when beta and mu vanish")
{
    std::mt19937_64 rng(5);
    auto p = random_layer<double>(3, 2, 3, 1, 1, rng);
    std::fill(p.mu.begin(), p.mu.end(), 0.0);
    std::fill(p.beta.begin(), p.beta.end(), 0.0);
    const auto x = random_tensor<double>({2, 6, 6, 2}, rng);
    const auto y = random_tensor<double>({2, 6, 6, 2}, rng);
    Tensor4<double> z(x.shape());
    for (std::size_t i = 0; i < z.size(); ++i)
        z.data()[i] = 2.0 * x.data()[i] - 0.5 * y.data()[i];
    const auto fx = conv_bn_forward(x, p), fy = conv_bn_forward(y, p), fz = conv_bn_forward(z, p);
    double worst = 0;
    for (std::size_t i = 0; i < fz.size(); ++i)
        worst = std::max(worst, std::abs(fz.data()[i] - (2.0 * fx.data()[i] - 0.5 * fy.data()[i])));
    CHECK(worst < 1e-5);
}

TEST_CASE("duplicated channels can be summed into one consumer input")
{
    std::mt19937_64 rng(3);
    auto a = random_layer<double>(3, 2, 4, 1, 1, rng);
    auto b = random_layer<double>(3, 4, 3, 1, 1, rng);
    // make output channel 3 of `a` a copy of channel 1
    for (std::size_t r = 0; r < a.fan_in(); ++r)
        a.kernel.data()[r * 4 + 3] = a.kernel.data()[r * 4 + 1];
    a.mu[3] = a.mu[1];
    a.sigma[3] = a.sigma[1];
    a.gamma[3] = a.gamma[1];
    a.beta[3] = a.beta[1];
    const auto x = random_tensor<double>({2, 5, 5, 2}, rng);
    const auto ref = conv_bn_forward(conv_bn_forward(x, a), b);

    LayerParams<double> a2 = a, b2 = b;
    Tensor4<double> ka({3, 3, 2, 3}), kb({3, 3, 3, 3});
    const std::size_t keep[] = {0, 1, 2};
    for (std::size_t u = 0; u < 3; ++u)
        for (std::size_t v = 0; v < 3; ++v) {
            for (std::size_t c = 0; c < 2; ++c)
                for (std::size_t o = 0; o < 3; ++o)
                    ka(u, v, c, o) = a.kernel(u, v, c, keep[o]);
            for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t o = 0; o < 3; ++o)
                    kb(u, v, c, o) = b.kernel(u, v, keep[c], o) + (keep[c] == 1 ? b.kernel(u, v, 3, o) : 0.0);
        }
    a2.kernel = ka;
    a2.mu.pop_back();
    a2.sigma.pop_back();
    a2.gamma.pop_back();
    a2.beta.pop_back();
    b2.kernel = kb;
    CHECK(max_abs_diff(conv_bn_forward(conv_bn_forward(x, a2), b2), ref) < 1e-5);
}

TEST_CASE("zero upstream gradient gives zero gradients")
{
    std::mt19937_64 rng(2);
    const auto x = random_tensor<double>({2, 4, 4, 2}, rng);
    const auto p = random_layer<double>(3, 2, 3, 1, 1, rng);
    ConvCache<double> cache;
    const auto y = conv_bn_forward(x, p, &cache);
    const auto g = conv_bn_backward(x, p, Tensor4<double>(y.shape()), &cache);
    for (double v : g.input.storage())
        CHECK(v == 0.0);
    for (double v : g.params.kernel.storage())
        CHECK(v == 0.0);
    for (double v : g.params.gamma)
        CHECK(v == 0.0);
}

namespace {

// Scalar objective sum(y * r) for a fixed random r, so dL/dy = r.
double weighted_sum(const Tensor4<double>& y, const Tensor4<double>& r)
{
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i)
        s += y.data()[i] * r.data()[i];
    return s;
}

double rel_err(double a, double b)
{
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

} // namespace

TEST_CASE("conv backward matches finite differences")
{
    std::mt19937_64 rng(21);
    auto x = random_tensor<double>({2, 5, 5, 2}, rng);
    auto p = random_layer<double>(3, 2, 3, 2, 1, rng);
    ConvCache<double> cache;
    const auto y = conv_bn_forward(x, p, &cache);
    const auto r = random_tensor<double>(y.shape(), rng);
    const auto g = conv_bn_backward(x, p, r, &cache);
    auto f = [&] { return weighted_sum(conv_bn_forward(x, p), r); };

    double worst = 0;
    const auto gk = numeric_gradient(p.kernel.storage(), f);
    for (std::size_t i = 0; i < gk.size(); ++i)
        worst = std::max(worst, rel_err(g.params.kernel.data()[i], gk[i]));
    const auto gg = numeric_gradient(p.gamma, f);
    const auto gb = numeric_gradient(p.beta, f);
    for (std::size_t i = 0; i < gg.size(); ++i) {
        worst = std::max(worst, rel_err(g.params.gamma[i], gg[i]));
        worst = std::max(worst, rel_err(g.params.beta[i], gb[i]));
    }
    const auto gx = numeric_gradient(x.storage(), f);
    for (std::size_t i = 0; i < gx.size(); ++i)
        worst = std::max(worst, rel_err(g.input.data()[i], gx[i]));
    CHECK(worst < 1e-6);
}

TEST_CASE("relu forward and backward")
{
    Tensor4<double> x({1, 1, 1, 3}, std::vector<double>{-1, 0, 2});
    const auto y = relu_forward(x);
    CHECK(y.storage() == std::vector<double>{0, 0, 2});
    Tensor4<double> g({1, 1, 1, 3}, 1.0);
    CHECK(relu_backward(x, g).storage() == std::vector<double>{0, 0, 1});
}

TEST_CASE("pooling backward matches finite differences")
{
    std::mt19937_64 rng(4);
    auto x = random_tensor<double>({2, 4, 6, 3}, rng);
    const auto r = random_tensor<double>({2, 2, 3, 3}, rng);
    const auto g = avgpool_backward(x.shape(), r, 2);
    const auto num = numeric_gradient(x.storage(), [&] { return weighted_sum(avgpool_forward(x, 2), r); });
    for (std::size_t i = 0; i < num.size(); ++i)
        CHECK(g.data()[i] == doctest::Approx(num[i]).epsilon(1e-6));

    const auto r2 = random_tensor<double>({2, 1, 1, 3}, rng);
    const auto g2 = global_avgpool_backward(x.shape(), r2);
    const auto num2 = numeric_gradient(x.storage(), [&] { return weighted_sum(global_avgpool(x), r2); });
    for (std::size_t i = 0; i < num2.size(); ++i)
        CHECK(g2.data()[i] == doctest::Approx(num2[i]).epsilon(1e-6));
}

TEST_CASE("fully connected backward matches finite differences")
{
    std::mt19937_64 rng(8);
    auto x = random_tensor<double>({3, 1, 1, 4}, rng);
    auto w = random_tensor<double>({1, 1, 4, 5}, rng);
    auto bias = random_vector<double>(5, rng, -1, 1);
    const auto r = random_tensor<double>({3, 1, 1, 5}, rng);
    auto f = [&] { return weighted_sum(fc_forward(x, w, std::span<const double>(bias)), r); };
    const auto g = fc_backward(x, w, r);
    const auto gw = numeric_gradient(w.storage(), f);
    const auto gx = numeric_gradient(x.storage(), f);
    const auto gb = numeric_gradient(bias, f);
    for (std::size_t i = 0; i < gw.size(); ++i)
        CHECK(rel_err(g.weights.data()[i], gw[i]) < 1e-6);
    for (std::size_t i = 0; i < gx.size(); ++i)
        CHECK(rel_err(g.input.data()[i], gx[i]) < 1e-6);
    for (std::size_t i = 0; i < gb.size(); ++i)
        CHECK(rel_err(g.bias[i], gb[i]) < 1e-6);
}

TEST_CASE("softmax cross-entropy values and gradient")
{
    Tensor4<double> uniform({2, 1, 1, 5}, 0.7);
    const std::vector<std::int32_t> labels{1, 4};
    CHECK(softmax_cross_entropy(uniform, labels).loss == doctest::Approx(std::log(5.0)));

    // logits (0, ln 3): p = (1/4, 3/4); label 1 -> loss ln(4/3)
    Tensor4<double> two({1, 1, 1, 2}, std::vector<double>{0.0, std::log(3.0)});
    const std::vector<std::int32_t> one{1};
    const auto lg = softmax_cross_entropy(two, one);
    CHECK(lg.loss == doctest::Approx(std::log(4.0 / 3.0)));
    CHECK(lg.grad(0, 0, 0, 0) == doctest::Approx(0.25));
    CHECK(lg.grad(0, 0, 0, 1) == doctest::Approx(-0.25));

    std::mt19937_64 rng(9);
    auto logits = random_tensor<double>({3, 1, 1, 4}, rng);
    const std::vector<std::int32_t> y{0, 3, 2};
    const auto g = softmax_cross_entropy(logits, y).grad;
    const auto num = numeric_gradient(logits.storage(), [&] { return double(softmax_cross_entropy(logits, y).loss); });
    for (std::size_t i = 0; i < num.size(); ++i)
        CHECK(rel_err(g.data()[i], num[i]) < 1e-6);

    const std::vector<std::int32_t> bad{0, 4, 1};
    CHECK_THROWS_AS(softmax_cross_entropy(logits, bad), InputError);
}

TEST_CASE("grad_check passes on a single conv layer at 1e-3")
{
    std::mt19937_64 rng(31);
    NetworkSpec spec = plain_spec(31, {4});
    auto net = build_network<float>(spec);
    randomize_statistics(net, rng);
    const auto x = random_tensor<float>({2, 6, 6, 1}, rng);
    const std::vector<std::int32_t> y{0, 2};
    GradCheckOptions o;
    o.tolerance = 1e-3;
    const auto r = grad_check(net, x, y, o);
    INFO(r.summary());
    CHECK(r.passed());
    CHECK(r.checked > 0);
}

TEST_CASE("grad_check names the layer of a corrupted backward")
{
    std::mt19937_64 rng(32);
    auto net = build_network<double>(residual_spec(32, {4}, 1));
    randomize_statistics(net, rng);
    const auto x = random_tensor<double>({2, 6, 6, 1}, rng);
    const std::vector<std::int32_t> y{1, 2};
    const LayerId victim = net.conv_layers()[1];
    GradientFn<double> corrupted = [victim](const Network<double>& n, const Tensor4<double>& in,
                                            const std::vector<std::int32_t>& lab) {
        auto g = loss_gradients(n, in, lab);
        for (auto& v : g.layers[victim].kernel.storage())
            v *= 1.1;
        return g;
    };
    const auto r = grad_check(net, x, y, {}, corrupted);
    REQUIRE_FALSE(r.passed());
    for (const auto& f : r.failures)
        CHECK(f.layer == victim);
    CHECK(r.summary().find(net.layer_name(victim)) != std::string::npos);
}
