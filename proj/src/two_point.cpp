#include "csgd/two_point.hpp"

#include <algorithm>
#include <cmath>

#include "csgd/error.hpp"

namespace csgd {

namespace {

double distance(const Point& a, const Point& b)
{
    double d = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        d += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(d);
}

} // namespace

double TwoPointTrajectory::max_contraction_error(double expected) const
{
    double worst = 0;
    for (std::size_t t = 0; t + 1 < gaps.size(); ++t)
        if (gaps[t] > 0)
            worst = std::max(worst, std::abs(gaps[t + 1] / gaps[t] - expected));
    return worst;
}

double TwoPointTrajectory::max_relative_residual() const
{
    double worst = 0;
    for (const auto& s : steps)
        if (s.identity_scale > 0)
            worst = std::max(worst, s.identity_residual / s.identity_scale);
    return worst;
}

TwoPointTrajectory two_point_simulation(const Point& a0, const Point& b0, double tau, double eta, double eps,
                                        std::size_t steps, const PairGradient& gradient, bool merged)
{
    if (a0.size() != b0.size())
        throw DimensionError("two_point_simulation: points differ in dimension");
    TwoPointTrajectory out;
    Point a = a0, b = b0;
    const std::size_t n = a.size();
    out.gaps.push_back(distance(a, b));
    for (std::size_t t = 0; t < steps; ++t) {
        auto [ga, gb] = gradient(a, b);
        if (ga.size() != n || gb.size() != n)
            throw DimensionError("two_point_simulation: gradient dimension mismatch");
        if (merged)
            for (std::size_t i = 0; i < n; ++i)
                ga[i] = gb[i] = (ga[i] + gb[i]) / 2;
        TwoPointStep step;
        step.gap = out.gaps.back();
        Point da(n), db(n);
        double dd = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double mid = (a[i] + b[i]) / 2;
            da[i] = -ga[i] - eta * a[i] + eps * (mid - a[i]);
            db[i] = -gb[i] - eta * b[i] + eps * (mid - b[i]);
            const double diff = da[i] - db[i];
            dd += diff * diff;
            const double predicted = (eta + eps) * (b[i] - a[i]);
            step.identity_residual = std::max(step.identity_residual, std::abs(diff - predicted));
            step.identity_scale = std::max({step.identity_scale, std::abs(ga[i]), std::abs(gb[i]),
                                            std::abs(eta * a[i]), std::abs(eta * b[i]), std::abs(eps * mid),
                                            std::abs(predicted)});
        }
        step.delta_gap = std::sqrt(dd);
        for (std::size_t i = 0; i < n; ++i) {
            a[i] += tau * da[i];
            b[i] += tau * db[i];
        }
        out.steps.push_back(step);
        out.gaps.push_back(distance(a, b));
    }
    out.a = std::move(a);
    out.b = std::move(b);
    return out;
}

} // namespace csgd
