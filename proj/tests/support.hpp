// Test-only oracles and fixtures.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "csgd/clustering.hpp"
#include "csgd/network.hpp"
#include "csgd/ops.hpp"
#include "csgd/tensor.hpp"

namespace testing {

using namespace csgd;

template <typename T>
Tensor4<T> random_tensor(const Shape4& s, std::mt19937_64& rng, double scale = 1.0)
{
    std::normal_distribution<double> d(0.0, scale);
    Tensor4<T> t(s);
    for (auto& v : t.storage())
        v = T(d(rng));
    return t;
}

template <typename T>
std::vector<T> random_vector(std::size_t n, std::mt19937_64& rng, double lo, double hi)
{
    std::uniform_real_distribution<double> d(lo, hi);
    std::vector<T> v(n);
    for (auto& x : v)
        x = T(d(rng));
    return v;
}

template <typename T>
LayerParams<T> random_layer(std::size_t k, std::size_t cin, std::size_t cout, std::size_t stride, std::size_t pad,
                            std::mt19937_64& rng)
{
    LayerParams<T> p;
    p.kernel = random_tensor<T>({k, k, cin, cout}, rng, 0.5);
    p.mu = random_vector<T>(cout, rng, -0.5, 0.5);
    p.sigma = random_vector<T>(cout, rng, 0.5, 1.5);
    p.gamma = random_vector<T>(cout, rng, 0.5, 1.5);
    p.beta = random_vector<T>(cout, rng, -0.5, 0.5);
    p.stride = stride;
    p.padding = pad;
    return p;
}

/// Direct six-loop evaluation of the folded conv + normalization, in double.
template <typename T>
Tensor4<double> naive_conv_bn(const Tensor4<T>& x, const LayerParams<T>& p)
{
    const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), cin = x.dim(3);
    const std::size_t u = p.kernel.dim(0), v = p.kernel.dim(1), cout = p.kernel.dim(3);
    const std::size_t s = p.stride, pad = p.padding;
    const std::size_t oh = (h + 2 * pad - u) / s + 1, ow = (w + 2 * pad - v) / s + 1;
    Tensor4<double> out({n, oh, ow, cout});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j)
                for (std::size_t o = 0; o < cout; ++o) {
                    double acc = 0;
                    for (std::size_t a = 0; a < u; ++a)
                        for (std::size_t c = 0; c < v; ++c)
                            for (std::size_t k = 0; k < cin; ++k) {
                                const long yy = long(i * s + a) - long(pad), xx = long(j * s + c) - long(pad);
                                if (yy < 0 || xx < 0 || yy >= long(h) || xx >= long(w))
                                    continue;
                                acc += double(x(b, std::size_t(yy), std::size_t(xx), k)) * double(p.kernel(a, c, k, o));
                            }
                    out(b, i, j, o) = (acc - double(p.mu[o])) / double(p.sigma[o]) * double(p.gamma[o]) + double(p.beta[o]);
                }
    return out;
}

/// Central differences of a scalar function of a parameter vector.
inline std::vector<double> numeric_gradient(std::vector<double>& x, const std::function<double()>& f, double h = 1e-6)
{
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double saved = x[i];
        x[i] = saved + h;
        const double fp = f();
        x[i] = saved - h;
        const double fm = f();
        x[i] = saved;
        g[i] = (fp - fm) / (2 * h);
    }
    return g;
}

template <typename A, typename B>
double max_abs_diff(const A& a, const B& b)
{
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(double(a.data()[i]) - double(b.data()[i])));
    return m;
}

inline NetworkSpec plain_spec(std::uint64_t seed = 1, std::vector<std::size_t> widths = {6, 8, 6})
{
    NetworkSpec s;
    s.topology = Topology::Plain;
    s.widths = std::move(widths);
    s.classes = 3;
    s.seed = seed;
    return s;
}

inline NetworkSpec residual_spec(std::uint64_t seed = 1, std::vector<std::size_t> widths = {8, 8},
                                 std::size_t blocks = 2)
{
    NetworkSpec s;
    s.topology = Topology::Residual;
    s.widths = std::move(widths);
    s.blocks_per_stage = blocks;
    s.classes = 3;
    s.seed = seed;
    return s;
}

inline NetworkSpec dense_spec(std::uint64_t seed = 1)
{
    NetworkSpec s;
    s.topology = Topology::Dense;
    s.stem_width = 6;
    s.growth = 4;
    s.dense_layers = 3;
    s.dense_stages = 2;
    s.transition_width = 8;
    s.classes = 3;
    s.seed = seed;
    return s;
}

/// Randomizes every normalization vector so tests do not rely on identity statistics.
template <typename T>
void randomize_statistics(Network<T>& net, std::mt19937_64& rng)
{
    for (LayerId id : net.conv_layers()) {
        auto& p = net.params(id);
        const std::size_t c = p.out_channels();
        p.mu = random_vector<T>(c, rng, -0.3, 0.3);
        p.sigma = random_vector<T>(c, rng, 0.6, 1.4);
        p.gamma = random_vector<T>(c, rng, 0.6, 1.4);
        p.beta = random_vector<T>(c, rng, -0.3, 0.3);
    }
    auto& fc = net.params(LayerId(net.size() - 1));
    fc.beta = random_vector<T>(fc.out_channels(), rng, -0.3, 0.3);
}

/// Copies the first member's five-tuple onto every other member of each cluster.
template <typename T>
void make_identical(Network<T>& net, const ClusterAssignment& clusters)
{
    for (const auto& [id, cs] : clusters) {
        auto& p = net.params(id);
        const std::size_t c = p.out_channels(), rows = p.fan_in();
        for (const auto& h : cs.clusters())
            for (std::size_t m = 1; m < h.size(); ++m) {
                for (std::size_t r = 0; r < rows; ++r)
                    p.kernel.data()[r * c + h[m]] = p.kernel.data()[r * c + h[0]];
                p.mu[h[m]] = p.mu[h[0]];
                p.sigma[h[m]] = p.sigma[h[0]];
                p.gamma[h[m]] = p.gamma[h[0]];
                p.beta[h[m]] = p.beta[h[0]];
            }
    }
}

/// Random partition of `filters` into `r` nonempty clusters.
inline ClusterSet random_clusters(LayerId layer, std::size_t filters, std::size_t r, std::mt19937_64& rng)
{
    std::vector<FilterIndex> perm(filters);
    for (std::size_t i = 0; i < filters; ++i)
        perm[i] = FilterIndex(i);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::vector<FilterIndex>> cl(r);
    for (std::size_t i = 0; i < filters; ++i)
        cl[i < r ? i : std::uniform_int_distribution<std::size_t>(0, r - 1)(rng)].push_back(perm[i]);
    return ClusterSet(layer, filters, std::move(cl));
}

} // namespace testing
