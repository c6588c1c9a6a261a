#pragma once

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "csgd/clustering.hpp"
#include "csgd/config.hpp"
#include "csgd/dataset.hpp"
#include "csgd/network.hpp"
#include "csgd/optimizer.hpp"

namespace csgd {

/// One metrics CSV row. NaN marks a value that was not computed (written as an empty field).
struct MetricsRow {
    static constexpr double kNone = std::numeric_limits<double>::quiet_NaN();

    std::size_t epoch = 0;
    std::size_t iteration = 0; // optimizer steps completed so far
    double loss = kNone;
    double train_acc = kNone;
    double eval_acc = kNone;
    double chi = kNone;
    double phi = kNone;
    double tau = kNone;
};

inline constexpr const char* kMetricsHeader = "epoch,iteration,loss,train-acc,eval-acc,chi,phi,tau";

std::string format_metrics_csv(const std::vector<MetricsRow>& rows);

/// Fraction of `data` classified correctly.
template <typename T>
double accuracy(const Network<T>& net, const Dataset& data, std::size_t batch = 64);

/// Clusters for every conv layer listed in `counts` (followers inherit from their pacesetter).
template <typename T>
ClusterAssignment make_clusters(const Network<T>& net, ClusterMethod method, const CountSpec& counts,
                                std::uint64_t seed);

/// Filters penalized by the Lasso baseline: all but the first keep[id] of each layer, shared across groups.
template <typename T>
PruneSets make_prune_sets(const Network<T>& net, const CountSpec& keep);

/// Single-threaded, deterministic training loop for every optimizer mode.
template <typename T>
class Trainer {
public:
    using Observer = std::function<void(const Trainer&, double loss)>;

    /// Builds the network from cfg.network and calibrates its statistics on the first training batch.
    Trainer(ExperimentConfig cfg, DatasetSplit data);
    /// Continues from an existing network (no calibration).
    Trainer(ExperimentConfig cfg, DatasetSplit data, Network<T> net);

    const ExperimentConfig& config() const noexcept { return cfg_; }
    const DatasetSplit& data() const noexcept { return data_; }
    const Network<T>& network() const noexcept { return net_; }
    Network<T>& network() noexcept { return net_; }
    const ClusterAssignment& clusters() const noexcept { return clusters_; }
    const PruneSets& prune_sets() const noexcept { return prune_; }
    const std::vector<MetricsRow>& metrics() const noexcept { return rows_; }
    std::size_t epoch() const noexcept { return epoch_; }
    std::size_t iteration() const noexcept { return iteration_; }
    /// Whether clusters / prune sets are in force for the current epoch.
    bool regularizing() const noexcept { return epoch_ >= cfg_.optimizer.start_epoch; }

    /// Called after every optimizer step.
    void set_observer(Observer obs) { observer_ = std::move(obs); }

    void run();
    void run_epoch();

    /// chi over the active clusters (NaN outside csgd modes).
    double current_chi() const;
    /// phi over the active prune sets (NaN outside the Lasso mode).
    double current_phi() const;

private:
    void prepare_regularization();
    double step(const std::vector<std::size_t>& idx, std::size_t& correct);
    [[noreturn]] void diverged(const Activations<T>& cache, const char* what) const;

    ExperimentConfig cfg_;
    DatasetSplit data_;
    Network<T> net_;
    ClusterAssignment clusters_;
    PruneSets prune_;
    bool prepared_ = false;
    std::vector<MetricsRow> rows_;
    std::size_t epoch_ = 0, iteration_ = 0;
    Observer observer_;
};

struct RunSummary {
    std::string model_path, metrics_path, manifest_path;
    double train_acc = 0, eval_acc = 0;
    double chi = MetricsRow::kNone, phi = MetricsRow::kNone;
};

/// Generates the dataset, trains at cfg.run.precision and writes metrics.csv,
/// model.csgd, config.txt and clusters.manifest (csgd) or prune.manifest (Lasso)
/// into cfg.run.output_dir.
RunSummary run_experiment(const ExperimentConfig& cfg);

} // namespace csgd
