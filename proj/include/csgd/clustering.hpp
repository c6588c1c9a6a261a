#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "csgd/network.hpp"
#include "csgd/tensor.hpp"

namespace csgd {

using FilterIndex = std::uint32_t;

/// Partition of one layer's filters. Members of each cluster are sorted and
/// clusters are ordered by their smallest member, so equal partitions compare equal.
class ClusterSet {
public:
    ClusterSet() = default;
    /// Validates that `clusters` partitions {0..filters-1} (disjoint, nonempty, complete).
    ClusterSet(LayerId layer, std::size_t filters, std::vector<std::vector<FilterIndex>> clusters);

    static ClusterSet singletons(LayerId layer, std::size_t filters);

    LayerId layer() const noexcept { return layer_; }
    std::size_t filters() const noexcept { return filters_; }
    std::size_t size() const noexcept { return clusters_.size(); }
    const std::vector<std::vector<FilterIndex>>& clusters() const noexcept { return clusters_; }
    /// H(j): index of the cluster holding filter j.
    std::size_t cluster_of(FilterIndex j) const { return lookup_.at(j); }
    const std::vector<FilterIndex>& members_of(FilterIndex j) const { return clusters_[lookup_.at(j)]; }
    bool all_singletons() const noexcept { return clusters_.size() == filters_; }

    /// Same partition relabelled for another layer.
    ClusterSet for_layer(LayerId layer) const;

    /// Partition equality, ignoring the layer id.
    bool same_partition(const ClusterSet& other) const noexcept
    {
        return filters_ == other.filters_ && clusters_ == other.clusters_;
    }
    friend bool operator==(const ClusterSet& a, const ClusterSet& b) = default;

private:
    LayerId layer_ = 0;
    std::size_t filters_ = 0;
    std::vector<std::vector<FilterIndex>> clusters_;
    std::vector<std::size_t> lookup_;
};

using ClusterAssignment = std::map<LayerId, ClusterSet>;

/// Contiguous blocks; the first c mod r clusters hold ceil(c/r) filters.
ClusterSet even_clusters(std::size_t filters, std::size_t clusters, LayerId layer = 0);

/// k-means++ seeding then Lloyd iterations on flattened per-filter kernels.
/// Deterministic for a given seed; ties go to the lowest cluster index; an empty
/// cluster takes the member farthest from the centre of the largest cluster.
template <typename T>
ClusterSet kmeans_clusters(const Tensor4<T>& kernel, std::size_t clusters, std::uint64_t seed, LayerId layer = 0);

inline constexpr std::size_t kKmeansMaxIterations = 100;

/// Copies every pacesetter's ClusterSet onto its followers. `layer_widths`
/// (indexed by layer id), when given, is checked against the pacesetter's filter count.
ClusterAssignment propagate_constraints(const std::vector<ConstraintGroup>& groups, ClusterAssignment assignment,
                                        std::span<const std::size_t> layer_widths = {});

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

/// Averaging matrix: 1/|H(m)| where m and n share a cluster, else 0.
template <typename T>
Matrix<T> build_gamma(const ClusterSet& cs);

/// Decaying matrix (eta + eps) I - eps * Gamma: diagonal eta + (1 - 1/|H(m)|) eps,
/// -eps/|H(m)| between distinct members of one cluster, 0 elsewhere.
template <typename T>
Matrix<T> build_lambda(const ClusterSet& cs, T eta, T eps);

/// Text manifest, one line per layer: `layer_id: [i,j,...];[k,...];...` (0-based indices).
using Manifest = std::map<LayerId, std::vector<std::vector<FilterIndex>>>;

std::string format_manifest(const Manifest& manifest);
Manifest parse_manifest(const std::string& text);
Manifest read_manifest_file(const std::string& path);
void write_manifest_file(const std::string& path, const Manifest& manifest);

Manifest to_manifest(const ClusterAssignment& assignment);
/// Builds ClusterSets for the listed layers, validating against the network's widths.
template <typename T>
ClusterAssignment to_assignment(const Manifest& manifest, const Network<T>& net);

} // namespace csgd
