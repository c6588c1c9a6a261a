#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "csgd/clustering.hpp"
#include "csgd/network.hpp"

namespace csgd {

/// Sorted surviving filter indices of one layer.
struct RemainingSet {
    LayerId layer = 0;
    std::vector<FilterIndex> indices;

    friend bool operator==(const RemainingSet& a, const RemainingSet& b) = default;
};

/// The smallest member of every cluster, sorted.
RemainingSet remaining_set(const ClusterSet& cs);

/// Default per-parameter tolerance for treating clustered filters as identical.
inline constexpr double kIdenticalTolerance = 1e-7;

/// Largest |x - cluster mean| over kernel, gamma and beta of one layer.
template <typename T>
double cluster_deviation(const LayerParams<T>& p, const ClusterSet& cs);

/// Sums, for every consumer of `layer`, the input-channel slices of each cluster
/// into the slice of its surviving (smallest) member. Refuses with
/// NotIdenticalError when the layer's filters deviate from their cluster means by
/// more than `tolerance`; a negative tolerance skips the check.
template <typename T>
void merge_consumer_inputs(Network<T>& net, LayerId layer, const ClusterSet& cs,
                           double tolerance = kIdenticalTolerance);

/// Keeps the output channels in `rs` (kernel, mu, sigma, gamma, beta).
template <typename T>
LayerParams<T> slice_layer(const LayerParams<T>& p, const RemainingSet& rs, std::size_t width);

/// Keeps input channels offset + rs.indices out of the block [offset, offset + width).
template <typename T>
LayerParams<T> slice_consumer_inputs(const LayerParams<T>& p, const RemainingSet& rs, std::size_t width,
                                     std::size_t offset);

enum class CollapsePolicy {
    Force,            // write cluster means into every member first
    RequireIdentical, // refuse if any cluster deviates by more than the tolerance
    None,             // trim as-is (lossy unless the filters already coincide)
};

struct TrimOptions {
    CollapsePolicy collapse = CollapsePolicy::Force;
    double tolerance = kIdenticalTolerance;
};

/// Writes the cluster mean of kernel, gamma, beta, mu and sigma into every member.
template <typename T>
void collapse_clusters(Network<T>& net, const ClusterAssignment& clusters);

/// Writes the cluster mean of mu and sigma into every member, leaving the trained
/// parameters alone. With shared statistics, members whose kernel, gamma and beta
/// coincide compute the same channel.
template <typename T>
void share_statistics(Network<T>& net, const ClusterAssignment& clusters);

/// Rejects assignments where a constraint-group follower's partition differs from its pacesetter's.
/// Layers without an entry count as all singletons.
void check_constraints(const std::vector<ConstraintGroup>& groups, const ClusterAssignment& clusters);

/// Lossless trim: collapse, sum consumer input channels, slice. The input is not modified.
template <typename T>
Network<T> trim_network(const Network<T>& net, const ClusterAssignment& clusters,
                        const std::vector<ConstraintGroup>& groups, const TrimOptions& options = {});

/// Deletes the listed filters and the matching consumer input channels without any summation.
/// Every member of a constraint group must list the same filters.
template <typename T>
Network<T> prune_filters(const Network<T>& net, const std::map<LayerId, std::vector<FilterIndex>>& prune,
                         const std::vector<ConstraintGroup>& groups);

/// Magnitude baseline: keeps the `keep[id]` filters with the largest kernel l2 norm.
/// Constraint groups follow the pacesetter's ranking and count; a follower listed
/// with a different count is rejected.
template <typename T>
Network<T> magnitude_prune(const Network<T>& net, const std::map<LayerId, std::size_t>& keep,
                           const std::vector<ConstraintGroup>& groups);

struct EquivalenceReport {
    double max_abs_diff = 0;
    double tolerance = 0;
    bool passed = false;
    std::size_t samples = 0;
    ParamCounts before, after;
    double param_reduction = 0; // fraction in [0, 1]
    double flop_reduction = 0;
};

struct VerifyOptions {
    std::size_t samples = 100;
    double tolerance = 1e-4;
    std::size_t height = 12;
    std::size_t width = 12;
    std::uint64_t seed = 7;
};

/// Max-abs logit difference on standard-normal inputs plus cost reductions.
template <typename T>
EquivalenceReport verify_equivalence(const Network<T>& original, const Network<T>& trimmed,
                                     const VerifyOptions& options = {});

/// Multi-line JSON text describing widths, parameter counts and MACs before and after.
template <typename T>
std::string trim_report(const Network<T>& before, const Network<T>& after, std::size_t height, std::size_t width);

} // namespace csgd
