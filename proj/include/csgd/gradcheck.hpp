#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "csgd/network.hpp"

namespace csgd {

/// Analytic gradient of the mean cross-entropy at (net, input, labels).
template <typename T>
using GradientFn = std::function<Gradients<T>(const Network<T>&, const Tensor4<T>&, const std::vector<std::int32_t>&)>;

/// Backprop through Network::forward / backward and softmax_cross_entropy.
template <typename T>
Gradients<T> loss_gradients(const Network<T>& net, const Tensor4<T>& input, const std::vector<std::int32_t>& labels);

struct GradCheckOptions {
    double step = 1e-5;        // central-difference step, applied in double precision
    double tolerance = 1e-6;   // on |analytic - numeric| / max(|analytic|, |numeric|, floor)
    double floor = 1e-3;       // denominator floor so near-zero gradients are compared absolutely
    std::size_t max_per_tensor = 0; // 0 checks every entry; otherwise an evenly spaced subset
    int retries = 2;           // step shrinks 10x per retry when a ReLU changes state
};

struct GradCheckFailure {
    LayerId layer = 0;
    std::string layer_name;
    std::string component; // kernel, gamma, beta
    std::size_t index = 0;
    double analytic = 0, numeric = 0, rel_error = 0;
};

struct GradCheckReport {
    std::size_t checked = 0;
    std::size_t skipped = 0; // entries whose perturbation kept crossing a ReLU kink
    double max_rel_error = 0;
    std::vector<GradCheckFailure> failures; // every entry above tolerance
    bool passed() const noexcept { return failures.empty(); }
    /// One line, naming the worst offending layer on failure.
    std::string summary() const;
};

/// Compares the analytic gradients of every kernel, gamma and beta entry (fc: weights, bias)
/// against central differences of the loss evaluated on a double copy of the network.
template <typename T>
GradCheckReport grad_check(const Network<T>& net, const Tensor4<T>& input, const std::vector<std::int32_t>& labels,
                           const GradCheckOptions& options = {}, GradientFn<T> analytic = {});

} // namespace csgd
