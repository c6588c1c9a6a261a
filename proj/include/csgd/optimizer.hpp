#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "csgd/clustering.hpp"
#include "csgd/network.hpp"

namespace csgd {

enum class OptimizerMode { Sgd, CsgdDirect, CsgdMatrix, GroupLasso };

std::string to_string(OptimizerMode mode);
OptimizerMode parse_optimizer_mode(const std::string& s);

/// Piecewise-constant learning rate: (first epoch, tau) pairs sorted by epoch.
struct LrSchedule {
    std::vector<std::pair<std::size_t, double>> points{{0, 3e-2}};

    double at(std::size_t epoch) const;
    /// Parses "0:0.03,30:0.003,50:0.0003" or a single constant "0.03".
    static LrSchedule parse(const std::string& text);
    std::string format() const;
};

struct OptimizerConfig {
    OptimizerMode mode = OptimizerMode::CsgdDirect;
    LrSchedule tau;
    double eta = 1e-4;            // weight decay
    double eps = 3e-3;            // centripetal strength
    double lasso_strength = 0.0;  // group-Lasso coefficient
    std::size_t start_epoch = 0;  // epochs of plain SGD before clusters / penalty take effect

    void validate() const;
};

/// Hyper-parameters of one step.
struct StepSettings {
    double tau = 3e-2;
    double eta = 1e-4;
    double eps = 3e-3;
    double lasso_strength = 0.0;
};

/// Filters targeted by zeroing-out regularization, per layer.
using PruneSets = std::map<LayerId, std::vector<FilterIndex>>;

/// F <- F - tau (dL/dF + eta F) on every trainable tensor (kernel, gamma, beta; fc weights and bias).
template <typename T>
void sgd_step(Network<T>& net, const Gradients<T>& grads, const StepSettings& s);

/// Centripetal update, filter by filter: cluster-averaged gradient, weight decay,
/// and a pull of strength eps toward the cluster mean. Applies to kernel, gamma
/// and beta of clustered conv layers; other layers take the plain SGD step.
template <typename T>
void csgd_step_direct(Network<T>& net, const Gradients<T>& grads, const ClusterAssignment& clusters,
                      const StepSettings& s);

/// Same update as a matrix product on the (u*v*c_in) x c_out kernel view:
/// W <- W - tau (G Gamma + W Lambda); gamma/beta are 1 x c_out matrices.
template <typename T>
void csgd_step_matrix(Network<T>& net, const Gradients<T>& grads, const ClusterAssignment& clusters,
                      const StepSettings& s);

/// SGD step plus the group-Lasso sub-gradient lasso_strength * K_j / ||K_j|| on
/// every kernel in `prune_sets` (zero at the origin). The penalty never carries
/// a kernel past the origin.
template <typename T>
void group_lasso_step(Network<T>& net, const Gradients<T>& grads, const PruneSets& prune_sets, const StepSettings& s);

/// Checks that every clustered layer is a conv layer whose width matches its ClusterSet.
template <typename T>
void check_clusters(const Network<T>& net, const ClusterAssignment& clusters);

/// Sum of squared kernel deviation from the cluster means.
template <typename T>
double chi(const Network<T>& net, const ClusterAssignment& clusters);

/// Sum of squared magnitudes of the kernels in `prune_sets`.
template <typename T>
double phi(const Network<T>& net, const PruneSets& prune_sets);

/// Largest distance of a clustered parameter (kernel, gamma, beta) from its cluster mean.
template <typename T>
double max_cluster_deviation(const Network<T>& net, const ClusterAssignment& clusters);

/// Penalized filters for the Lasso baseline: the last (width - keep) filters of each listed layer.
PruneSets prune_sets_from_keep_counts(const std::map<LayerId, std::size_t>& keep,
                                      const std::vector<std::size_t>& widths);

} // namespace csgd
