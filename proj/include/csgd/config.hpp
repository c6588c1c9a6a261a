#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "csgd/network.hpp"
#include "csgd/optimizer.hpp"

namespace csgd {

enum class ClusterMethod { Even, Kmeans };

std::string to_string(ClusterMethod m);
ClusterMethod parse_cluster_method(const std::string& s);

/// Per-layer counts: either a uniform fraction ("5/8") of every listed layer's
/// width or explicit "id=count,id=count". An empty spec means none.
struct CountSpec {
    std::size_t numerator = 0, denominator = 0; // fraction form when denominator > 0
    std::map<LayerId, std::size_t> explicit_counts;

    bool empty() const noexcept { return denominator == 0 && explicit_counts.empty(); }
    static CountSpec parse(const std::string& text);
    std::string format() const;

    /// Resolves counts for the conv layers of `net`. With a fraction every conv
    /// layer except constraint-group followers gets round(width * n / d), at
    /// least 1; followers inherit from their pacesetter. Explicit counts for
    /// followers, non-conv layers or above the width are config errors.
    template <typename T>
    std::map<LayerId, std::size_t> resolve(const Network<T>& net) const;
};

struct DataConfig {
    std::uint64_t seed = 1;
    std::size_t size = 12;      // image height = width
    std::size_t classes = 4;
    std::size_t samples = 600;
    double noise = 0.1;

    void validate() const;
};

struct ClusterConfig {
    ClusterMethod method = ClusterMethod::Even;
    CountSpec counts;           // clusters per layer (csgd) or filters kept (lasso)
    std::uint64_t seed = 1;
    std::string manifest;       // optional: reuse clusters from this file instead
};

struct RunConfig {
    std::size_t epochs = 60;
    std::size_t batch_size = 16;
    std::size_t eval_interval = 1;
    std::string output_dir = "run";
    int precision = 32;          // 32 or 64
    std::uint64_t shuffle_seed = 1;
    bool log_steps = false;      // one CSV row per iteration instead of per epoch
    double bn_momentum = 1.0;   // 1 keeps the first-batch calibration fixed
};

struct ExperimentConfig {
    NetworkSpec network;
    OptimizerConfig optimizer;
    ClusterConfig cluster;
    DataConfig data;
    RunConfig run;

    void validate() const;
};

/// Flat `section.key = value` lines; `#` starts a comment. Unknown keys are errors.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);
std::string format_config(const ExperimentConfig& cfg);

} // namespace csgd
