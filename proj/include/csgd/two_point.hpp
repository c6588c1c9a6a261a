#pragma once

#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

namespace csgd {

using Point = std::vector<double>;

/// Returns (dL/da, dL/db) at the current pair of points.
using PairGradient = std::function<std::pair<Point, Point>(const Point& a, const Point& b)>;

struct TwoPointStep {
    double gap = 0;               // ||a - b|| before the step
    double delta_gap = 0;         // ||(delta a) - (delta b)||
    double identity_residual = 0; // max_i |(delta a - delta b)_i - (eta + eps)(b - a)_i|
    double identity_scale = 0;    // max_i of the magnitudes entering the identity, for relative checks
};

struct TwoPointTrajectory {
    std::vector<TwoPointStep> steps;
    std::vector<double> gaps; // ||a - b|| after 0..steps updates
    Point a, b;               // final points

    /// Largest |gap[t+1] / gap[t] - expected| over steps with a nonzero gap.
    double max_contraction_error(double expected) const;
    /// Largest identity residual relative to its scale (machine-precision check).
    double max_relative_residual() const;
};

/// Two points pulled together by the centripetal rule. With `merged` both
/// points receive the mean of their raw gradients, so
/// (delta a) - (delta b) = (eta + eps)(b - a) and ||a - b|| shrinks by
/// |1 - tau (eta + eps)| per step. Without merging the raw gradients enter
/// the difference and the identity generally fails.
TwoPointTrajectory two_point_simulation(const Point& a0, const Point& b0, double tau, double eta, double eps,
                                        std::size_t steps, const PairGradient& gradient, bool merged = true);

} // namespace csgd
