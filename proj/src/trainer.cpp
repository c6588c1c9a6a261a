#include "csgd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "csgd/serialize.hpp"
#include "csgd/trimming.hpp"

namespace csgd {

namespace {

std::string field(double v)
{
    if (std::isnan(v))
        return {};
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

bool is_csgd(OptimizerMode m)
{
    return m == OptimizerMode::CsgdDirect || m == OptimizerMode::CsgdMatrix;
}

template <typename T>
std::size_t argmax_row(const Tensor4<T>& logits, std::size_t n)
{
    const std::size_t c = logits.dim(3);
    const T* row = logits.data() + n * c;
    return std::size_t(std::max_element(row, row + c) - row);
}

void write_text(const std::filesystem::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw InputError("cannot write '" + path.string() + "'");
    out << text;
}

} // namespace

std::string format_metrics_csv(const std::vector<MetricsRow>& rows)
{
    std::string out = std::string(kMetricsHeader) + "\n";
    for (const auto& r : rows)
        out += std::to_string(r.epoch) + "," + std::to_string(r.iteration) + "," + field(r.loss) + "," +
               field(r.train_acc) + "," + field(r.eval_acc) + "," + field(r.chi) + "," + field(r.phi) + "," +
               field(r.tau) + "\n";
    return out;
}

template <typename T>
double accuracy(const Network<T>& net, const Dataset& data, std::size_t batch)
{
    if (data.size() == 0)
        return 0.0;
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < data.size(); begin += batch) {
        std::vector<std::size_t> idx(std::min(batch, data.size() - begin));
        std::iota(idx.begin(), idx.end(), begin);
        const Tensor4<T> logits = net.forward(data.template batch<T>(idx));
        for (std::size_t i = 0; i < idx.size(); ++i)
            correct += argmax_row(logits, i) == std::size_t(data.labels[idx[i]]);
    }
    return double(correct) / double(data.size());
}

template <typename T>
ClusterAssignment make_clusters(const Network<T>& net, ClusterMethod method, const CountSpec& counts,
                                std::uint64_t seed)
{
    const auto resolved = counts.resolve(net);
    const auto groups = constraint_groups(net);
    std::set<LayerId> followers;
    for (const auto& g : groups)
        followers.insert(g.followers.begin(), g.followers.end());
    ClusterAssignment out;
    for (const auto& [id, r] : resolved) {
        if (followers.count(id))
            continue;
        out.emplace(id, method == ClusterMethod::Even ? even_clusters(net.channels()[id], r, id)
                                                      : kmeans_clusters(net.params(id).kernel, r, seed, id));
    }
    return propagate_constraints(groups, std::move(out), net.channels());
}

template <typename T>
PruneSets make_prune_sets(const Network<T>& net, const CountSpec& keep)
{
    return prune_sets_from_keep_counts(keep.resolve(net), net.channels());
}

template <typename T>
Trainer<T>::Trainer(ExperimentConfig cfg, DatasetSplit data)
    : Trainer(cfg, std::move(data), build_network<T>(cfg.network))
{
    const std::size_t n = std::min(cfg_.run.batch_size, data_.train.size());
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t(0));
    calibrate_statistics(net_, data_.train.template batch<T>(idx));
}

template <typename T>
Trainer<T>::Trainer(ExperimentConfig cfg, DatasetSplit data, Network<T> net)
    : cfg_(std::move(cfg)), data_(std::move(data)), net_(std::move(net))
{
    cfg_.validate();
    if (data_.train.size() == 0)
        throw ConfigError("data.samples: training split is empty");
    if (net_.input_channels() != data_.train.images.dim(3))
        throw ConfigError("network expects " + std::to_string(net_.input_channels()) +
                          " input channels but the data has " + std::to_string(data_.train.images.dim(3)));
    if (net_.num_classes() != cfg_.data.classes)
        throw ConfigError("network has " + std::to_string(net_.num_classes()) + " outputs but data.classes is " +
                          std::to_string(cfg_.data.classes));
}

template <typename T>
void Trainer<T>::prepare_regularization()
{
    prepared_ = true;
    const OptimizerMode mode = cfg_.optimizer.mode;
    if (is_csgd(mode)) {
        if (!cfg_.cluster.manifest.empty()) {
            clusters_ = to_assignment(read_manifest_file(cfg_.cluster.manifest), net_);
            check_constraints(constraint_groups(net_), clusters_);
        } else {
            if (cfg_.cluster.counts.empty())
                throw ConfigError("cluster.counts: required for the " + to_string(mode) + " mode");
            clusters_ = make_clusters(net_, cfg_.cluster.method, cfg_.cluster.counts, cfg_.cluster.seed);
        }
        check_clusters(net_, clusters_);
        share_statistics(net_, clusters_);
    } else if (mode == OptimizerMode::GroupLasso) {
        if (cfg_.cluster.counts.empty())
            throw ConfigError("cluster.counts: required for the group-lasso mode (filters kept per layer)");
        prune_ = make_prune_sets(net_, cfg_.cluster.counts);
    }
}

template <typename T>
void Trainer<T>::diverged(const Activations<T>& cache, const char* what) const
{
    std::ostringstream msg;
    msg << "non-finite " << what << " at epoch " << epoch_ << ", iteration " << iteration_;
    for (std::size_t id = 0; id < cache.outputs.size(); ++id) {
        const auto& p = net_.layer(LayerId(id)).params;
        const bool bad_params = net_.layer(LayerId(id)).parametric() &&
                                (!p.kernel.all_finite() ||
                                 !std::all_of(p.gamma.begin(), p.gamma.end(), [](T v) { return std::isfinite(v); }) ||
                                 !std::all_of(p.beta.begin(), p.beta.end(), [](T v) { return std::isfinite(v); }));
        if (bad_params || !cache.outputs[id].all_finite()) {
            msg << ": first non-finite layer is " << net_.layer_name(LayerId(id))
                << (bad_params ? " (parameters)" : " (output)");
            throw TrainingError(msg.str());
        }
    }
    msg << ": every layer output is finite, the loss itself overflowed";
    throw TrainingError(msg.str());
}

template <typename T>
double Trainer<T>::step(const std::vector<std::size_t>& idx, std::size_t& correct)
{
    const Tensor4<T> x = data_.train.template batch<T>(idx);
    const auto y = data_.train.batch_labels(idx);
    Activations<T> cache;
    const Tensor4<T> logits = net_.forward(x, &cache);
    const LossAndGrad<T> lg = softmax_cross_entropy(logits, y);
    if (!std::isfinite(double(lg.loss)))
        diverged(cache, "loss");
    for (std::size_t i = 0; i < idx.size(); ++i)
        correct += argmax_row(logits, i) == std::size_t(y[i]);
    const Gradients<T> grads = net_.backward(cache, lg.grad);
    for (const auto& g : grads.layers)
        if (!g.kernel.all_finite() || !std::all_of(g.beta.begin(), g.beta.end(), [](T v) { return std::isfinite(v); }))
            diverged(cache, "gradient");

    StepSettings s{cfg_.optimizer.tau.at(epoch_), cfg_.optimizer.eta, cfg_.optimizer.eps,
                   cfg_.optimizer.lasso_strength};
    const bool active = regularizing();
    switch (cfg_.optimizer.mode) {
    case OptimizerMode::Sgd: sgd_step(net_, grads, s); break;
    case OptimizerMode::CsgdDirect:
        active ? csgd_step_direct(net_, grads, clusters_, s) : sgd_step(net_, grads, s);
        break;
    case OptimizerMode::CsgdMatrix:
        active ? csgd_step_matrix(net_, grads, clusters_, s) : sgd_step(net_, grads, s);
        break;
    case OptimizerMode::GroupLasso:
        active ? group_lasso_step(net_, grads, prune_, s) : sgd_step(net_, grads, s);
        break;
    }
    if (cfg_.run.bn_momentum < 1)
        update_running_statistics(net_, cache, T(cfg_.run.bn_momentum));
    ++iteration_;
    return double(lg.loss);
}

template <typename T>
double Trainer<T>::current_chi() const
{
    if (!is_csgd(cfg_.optimizer.mode) || !prepared_)
        return MetricsRow::kNone;
    return chi(net_, clusters_);
}

template <typename T>
double Trainer<T>::current_phi() const
{
    if (cfg_.optimizer.mode != OptimizerMode::GroupLasso || !prepared_)
        return MetricsRow::kNone;
    return phi(net_, prune_);
}

template <typename T>
void Trainer<T>::run_epoch()
{
    if (regularizing() && !prepared_)
        prepare_regularization();
    const std::size_t n = data_.train.size(), bs = cfg_.run.batch_size;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::mt19937_64 rng(cfg_.run.shuffle_seed * 1000003u + epoch_);
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0;
    std::size_t correct = 0, seen = 0, batches = 0;
    for (std::size_t begin = 0; begin < n; begin += bs) {
        std::vector<std::size_t> idx(order.begin() + std::ptrdiff_t(begin),
                                     order.begin() + std::ptrdiff_t(std::min(n, begin + bs)));
        std::size_t batch_correct = 0;
        const double loss = step(idx, batch_correct);
        loss_sum += loss;
        correct += batch_correct;
        seen += idx.size();
        ++batches;
        if (cfg_.run.log_steps) {
            MetricsRow r;
            r.epoch = epoch_;
            r.iteration = iteration_;
            r.loss = loss;
            r.train_acc = double(batch_correct) / double(idx.size());
            r.chi = current_chi();
            r.phi = current_phi();
            r.tau = cfg_.optimizer.tau.at(epoch_);
            rows_.push_back(r);
        }
        if (observer_)
            observer_(*this, loss);
    }
    const bool eval = (epoch_ + 1) % cfg_.run.eval_interval == 0 || epoch_ + 1 == cfg_.run.epochs;
    const double eval_acc = eval ? accuracy(net_, data_.test) : MetricsRow::kNone;
    if (cfg_.run.log_steps) {
        rows_.back().eval_acc = eval_acc;
    } else {
        MetricsRow r;
        r.epoch = epoch_;
        r.iteration = iteration_;
        r.loss = loss_sum / double(batches);
        r.train_acc = double(correct) / double(seen);
        r.eval_acc = eval_acc;
        r.chi = current_chi();
        r.phi = current_phi();
        r.tau = cfg_.optimizer.tau.at(epoch_);
        rows_.push_back(r);
    }
    ++epoch_;
}

template <typename T>
void Trainer<T>::run()
{
    while (epoch_ < cfg_.run.epochs)
        run_epoch();
}

namespace {

template <typename T>
RunSummary run_typed(const ExperimentConfig& cfg)
{
    Trainer<T> trainer(cfg, generate_dataset(cfg.data));
    trainer.run();
    namespace fs = std::filesystem;
    const fs::path dir(cfg.run.output_dir);
    fs::create_directories(dir);
    RunSummary out;
    out.metrics_path = (dir / "metrics.csv").string();
    out.model_path = (dir / "model.csgd").string();
    write_text(out.metrics_path, format_metrics_csv(trainer.metrics()));
    write_text(dir / "config.txt", format_config(cfg));
    save_model(out.model_path, trainer.network().template cast<float>());
    if (!trainer.clusters().empty()) {
        out.manifest_path = (dir / "clusters.manifest").string();
        write_manifest_file(out.manifest_path, to_manifest(trainer.clusters()));
    }
    if (!trainer.prune_sets().empty()) {
        Manifest m;
        for (const auto& [id, filters] : trainer.prune_sets())
            if (!filters.empty())
                m[id] = {filters};
        out.manifest_path = (dir / "prune.manifest").string();
        write_manifest_file(out.manifest_path, m);
    }
    out.train_acc = accuracy(trainer.network(), trainer.data().train);
    out.eval_acc = accuracy(trainer.network(), trainer.data().test);
    out.chi = trainer.current_chi();
    out.phi = trainer.current_phi();
    return out;
}

} // namespace

RunSummary run_experiment(const ExperimentConfig& cfg)
{
    cfg.validate();
    return cfg.run.precision == 64 ? run_typed<double>(cfg) : run_typed<float>(cfg);
}

#define CSGD_INSTANTIATE_TRAINER(T)                                                                         \
    template double accuracy(const Network<T>&, const Dataset&, std::size_t);                               \
    template ClusterAssignment make_clusters(const Network<T>&, ClusterMethod, const CountSpec&, std::uint64_t); \
    template PruneSets make_prune_sets(const Network<T>&, const CountSpec&);                                \
    template class Trainer<T>;

CSGD_INSTANTIATE_TRAINER(float)
CSGD_INSTANTIATE_TRAINER(double)

} // namespace csgd
