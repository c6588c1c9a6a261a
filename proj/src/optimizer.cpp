#include "csgd/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <Eigen/Core>

namespace csgd {

std::string to_string(OptimizerMode mode)
{
    switch (mode) {
    case OptimizerMode::Sgd: return "sgd";
    case OptimizerMode::CsgdDirect: return "csgd-direct";
    case OptimizerMode::CsgdMatrix: return "csgd-matrix";
    case OptimizerMode::GroupLasso: return "group-lasso";
    }
    return "unknown";
}

OptimizerMode parse_optimizer_mode(const std::string& s)
{
    if (s == "sgd")
        return OptimizerMode::Sgd;
    if (s == "csgd-direct" || s == "csgd")
        return OptimizerMode::CsgdDirect;
    if (s == "csgd-matrix")
        return OptimizerMode::CsgdMatrix;
    if (s == "group-lasso" || s == "lasso")
        return OptimizerMode::GroupLasso;
    throw ConfigError("optimizer.mode: unknown mode '" + s + "' (expected sgd, csgd-direct, csgd-matrix, group-lasso)");
}

double LrSchedule::at(std::size_t epoch) const
{
    double tau = points.front().second;
    for (const auto& [start, value] : points)
        if (epoch >= start)
            tau = value;
    return tau;
}

LrSchedule LrSchedule::parse(const std::string& text)
{
    LrSchedule out;
    out.points.clear();
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        const auto colon = item.find(':');
        try {
            if (colon == std::string::npos)
                out.points.emplace_back(0, std::stod(item));
            else
                out.points.emplace_back(std::stoul(item.substr(0, colon)), std::stod(item.substr(colon + 1)));
        } catch (const std::exception&) {
            throw ConfigError("optimizer.tau: cannot parse '" + item + "'");
        }
    }
    if (out.points.empty())
        throw ConfigError("optimizer.tau: empty schedule");
    if (out.points.front().first != 0)
        throw ConfigError("optimizer.tau: schedule must start at epoch 0");
    for (std::size_t i = 1; i < out.points.size(); ++i)
        if (out.points[i].first <= out.points[i - 1].first)
            throw ConfigError("optimizer.tau: epochs must be increasing");
    for (const auto& p : out.points)
        if (!(p.second > 0))
            throw ConfigError("optimizer.tau: learning rates must be positive");
    return out;
}

std::string LrSchedule::format() const
{
    std::ostringstream out;
    out.precision(17);
    for (std::size_t i = 0; i < points.size(); ++i)
        out << (i ? "," : "") << points[i].first << ":" << points[i].second;
    return out.str();
}

void OptimizerConfig::validate() const
{
    for (const auto& p : tau.points)
        if (!(p.second > 0))
            throw ConfigError("optimizer.tau: learning rates must be positive");
    if (!(eta >= 0))
        throw ConfigError("optimizer.eta: must be >= 0");
    if (!(eps >= 0))
        throw ConfigError("optimizer.eps: must be >= 0");
    if (!(lasso_strength >= 0))
        throw ConfigError("optimizer.lasso_strength: must be >= 0");
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A trainable tensor seen as rows x cols with one column per filter.
template <typename T>
struct Trainable {
    T* values;
    const T* grads;
    std::size_t rows;
    std::size_t cols;
};

template <typename T>
std::vector<Trainable<T>> trainables(LayerParams<T>& p, const LayerParams<T>& g, OpKind kind)
{
    const std::size_t c = p.out_channels();
    std::vector<Trainable<T>> out{{p.kernel.data(), g.kernel.data(), p.fan_in(), c}};
    if (kind == OpKind::Conv)
        out.push_back({p.gamma.data(), g.gamma.data(), 1, c});
    out.push_back({p.beta.data(), g.beta.data(), 1, c});
    return out;
}

template <typename T>
void check_grads(const Network<T>& net, const Gradients<T>& grads)
{
    if (grads.layers.size() != net.size())
        throw StructuralError("gradient set has " + std::to_string(grads.layers.size()) + " layers, network has " +
                              std::to_string(net.size()));
    for (std::size_t id = 0; id < net.size(); ++id)
        if (net.layer(LayerId(id)).parametric() &&
            grads.layers[id].kernel.shape() != net.params(LayerId(id)).kernel.shape())
            throw StructuralError("gradient shape mismatch at " + net.layer_name(LayerId(id)));
}

template <typename T>
void plain_update(const Trainable<T>& t, T tau, T eta)
{
    const std::size_t n = t.rows * t.cols;
    for (std::size_t i = 0; i < n; ++i)
        t.values[i] = t.values[i] - tau * (t.grads[i] + eta * t.values[i]);
}

template <typename T>
const ClusterSet* clusters_for(const ClusterAssignment& clusters, LayerId id)
{
    const auto it = clusters.find(id);
    return it == clusters.end() ? nullptr : &it->second;
}

template <typename T>
void direct_update(const Trainable<T>& t, const ClusterSet& cs, T tau, T eta, T eps)
{
    for (const auto& h : cs.clusters()) {
        const T size = T(h.size());
        for (std::size_t row = 0; row < t.rows; ++row) {
            T* f = t.values + row * t.cols;
            const T* g = t.grads + row * t.cols;
            T gsum = 0, fsum = 0;
            for (FilterIndex k : h) {
                gsum += g[k];
                fsum += f[k];
            }
            const T gavg = gsum / size;
            const T mean = fsum / size;
            for (FilterIndex j : h)
                f[j] = f[j] + tau * (-gavg - eta * f[j] + eps * (mean - f[j]));
        }
    }
}

} // namespace

template <typename T>
void check_clusters(const Network<T>& net, const ClusterAssignment& clusters)
{
    for (const auto& [id, cs] : clusters) {
        if (id >= net.size() || net.layer(id).kind != OpKind::Conv)
            throw StructuralError("clusters given for layer " + std::to_string(id) + ", which is not a conv layer");
        if (cs.filters() != net.channels()[id])
            throw StructuralError("cluster set for " + net.layer_name(id) + " covers " + std::to_string(cs.filters()) +
                                  " filters, layer has " + std::to_string(net.channels()[id]));
    }
}

template <typename T>
void sgd_step(Network<T>& net, const Gradients<T>& grads, const StepSettings& s)
{
    check_grads(net, grads);
    for (std::size_t id = 0; id < net.size(); ++id) {
        const Layer<T>& layer = net.layer(LayerId(id));
        if (!layer.parametric())
            continue;
        for (const auto& t : trainables(net.params(LayerId(id)), grads.layers[id], layer.kind))
            plain_update(t, T(s.tau), T(s.eta));
    }
}

template <typename T>
void csgd_step_direct(Network<T>& net, const Gradients<T>& grads, const ClusterAssignment& clusters,
                      const StepSettings& s)
{
    check_grads(net, grads);
    check_clusters(net, clusters);
    for (std::size_t id = 0; id < net.size(); ++id) {
        const Layer<T>& layer = net.layer(LayerId(id));
        if (!layer.parametric())
            continue;
        const ClusterSet* cs = clusters_for<T>(clusters, LayerId(id));
        for (const auto& t : trainables(net.params(LayerId(id)), grads.layers[id], layer.kind)) {
            if (cs)
                direct_update(t, *cs, T(s.tau), T(s.eta), T(s.eps));
            else
                plain_update(t, T(s.tau), T(s.eta));
        }
    }
}

template <typename T>
void csgd_step_matrix(Network<T>& net, const Gradients<T>& grads, const ClusterAssignment& clusters,
                      const StepSettings& s)
{
    check_grads(net, grads);
    check_clusters(net, clusters);
    for (std::size_t id = 0; id < net.size(); ++id) {
        const Layer<T>& layer = net.layer(LayerId(id));
        if (!layer.parametric())
            continue;
        const ClusterSet* cs = clusters_for<T>(clusters, LayerId(id));
        if (!cs) {
            for (const auto& t : trainables(net.params(LayerId(id)), grads.layers[id], layer.kind))
                plain_update(t, T(s.tau), T(s.eta));
            continue;
        }
        const Matrix<T> gamma = build_gamma<T>(*cs);
        const Matrix<T> lambda = build_lambda<T>(*cs, T(s.eta), T(s.eps));
        for (const auto& t : trainables(net.params(LayerId(id)), grads.layers[id], layer.kind)) {
            Eigen::Map<RowMat<T>> w(t.values, Eigen::Index(t.rows), Eigen::Index(t.cols));
            Eigen::Map<const RowMat<T>> g(t.grads, Eigen::Index(t.rows), Eigen::Index(t.cols));
            const RowMat<T> step = g * gamma + w * lambda;
            w = w - T(s.tau) * step;
        }
    }
}

template <typename T>
void group_lasso_step(Network<T>& net, const Gradients<T>& grads, const PruneSets& prune_sets, const StepSettings& s)
{
    check_grads(net, grads);
    const T tau = T(s.tau), lasso = T(s.lasso_strength);
    // Penalty directions are taken at the pre-step point.
    std::map<LayerId, std::vector<std::pair<FilterIndex, std::vector<T>>>> shrink;
    for (const auto& [id, filters] : prune_sets) {
        if (id >= net.size() || net.layer(id).kind != OpKind::Conv)
            throw StructuralError("prune set given for layer " + std::to_string(id) + ", which is not a conv layer");
        const LayerParams<T>& p = net.params(id);
        const std::size_t c = p.out_channels(), rows = p.fan_in();
        for (FilterIndex j : filters) {
            if (j >= c)
                throw StructuralError("prune set index " + std::to_string(j) + " out of range at " +
                                      net.layer_name(id));
            T norm2 = 0;
            for (std::size_t r = 0; r < rows; ++r)
                norm2 += p.kernel.data()[r * c + j] * p.kernel.data()[r * c + j];
            const T norm = std::sqrt(norm2);
            std::vector<T> delta(rows, T(0));
            if (norm > T(0)) {
                const T step = std::min(tau * lasso, norm) / norm;
                for (std::size_t r = 0; r < rows; ++r)
                    delta[r] = step * p.kernel.data()[r * c + j];
            }
            shrink[id].emplace_back(j, std::move(delta));
        }
    }
    sgd_step(net, grads, s);
    for (const auto& [id, items] : shrink) {
        LayerParams<T>& p = net.params(id);
        const std::size_t c = p.out_channels();
        for (const auto& [j, delta] : items)
            for (std::size_t r = 0; r < delta.size(); ++r)
                p.kernel.data()[r * c + j] -= delta[r];
    }
}

template <typename T>
double chi(const Network<T>& net, const ClusterAssignment& clusters)
{
    check_clusters(net, clusters);
    double total = 0;
    for (const auto& [id, cs] : clusters) {
        const LayerParams<T>& p = net.params(id);
        const std::size_t c = p.out_channels(), rows = p.fan_in();
        for (const auto& h : cs.clusters()) {
            if (h.size() < 2)
                continue;
            for (std::size_t r = 0; r < rows; ++r) {
                const T* row = p.kernel.data() + r * c;
                double mean = 0;
                for (FilterIndex k : h)
                    mean += double(row[k]);
                mean /= double(h.size());
                for (FilterIndex j : h)
                    total += (double(row[j]) - mean) * (double(row[j]) - mean);
            }
        }
    }
    return total;
}

template <typename T>
double phi(const Network<T>& net, const PruneSets& prune_sets)
{
    double total = 0;
    for (const auto& [id, filters] : prune_sets) {
        if (id >= net.size() || net.layer(id).kind != OpKind::Conv)
            throw StructuralError("prune set given for layer " + std::to_string(id) + ", which is not a conv layer");
        const LayerParams<T>& p = net.params(id);
        const std::size_t c = p.out_channels(), rows = p.fan_in();
        for (FilterIndex j : filters) {
            if (j >= c)
                throw StructuralError("prune set index " + std::to_string(j) + " out of range at " +
                                      net.layer_name(id));
            for (std::size_t r = 0; r < rows; ++r)
                total += double(p.kernel.data()[r * c + j]) * double(p.kernel.data()[r * c + j]);
        }
    }
    return total;
}

template <typename T>
double max_cluster_deviation(const Network<T>& net, const ClusterAssignment& clusters)
{
    check_clusters(net, clusters);
    double worst = 0;
    for (const auto& [id, cs] : clusters) {
        LayerParams<T> p = net.params(id);
        for (const auto& t : trainables(p, p, OpKind::Conv))
            for (const auto& h : cs.clusters())
                for (std::size_t r = 0; r < t.rows; ++r) {
                    const T* row = t.values + r * t.cols;
                    double mean = 0;
                    for (FilterIndex k : h)
                        mean += double(row[k]);
                    mean /= double(h.size());
                    for (FilterIndex j : h)
                        worst = std::max(worst, std::abs(double(row[j]) - mean));
                }
    }
    return worst;
}

PruneSets prune_sets_from_keep_counts(const std::map<LayerId, std::size_t>& keep,
                                      const std::vector<std::size_t>& widths)
{
    PruneSets out;
    for (const auto& [id, k] : keep) {
        if (id >= widths.size() || k == 0 || k > widths[id])
            throw ConfigError("keep count " + std::to_string(k) + " invalid for layer " + std::to_string(id));
        auto& set = out[id];
        for (std::size_t j = k; j < widths[id]; ++j)
            set.push_back(FilterIndex(j));
    }
    return out;
}

#define CSGD_INSTANTIATE_OPT(T)                                                                                   \
    template void sgd_step(Network<T>&, const Gradients<T>&, const StepSettings&);                                \
    template void csgd_step_direct(Network<T>&, const Gradients<T>&, const ClusterAssignment&, const StepSettings&); \
    template void csgd_step_matrix(Network<T>&, const Gradients<T>&, const ClusterAssignment&, const StepSettings&); \
    template void group_lasso_step(Network<T>&, const Gradients<T>&, const PruneSets&, const StepSettings&);       \
    template void check_clusters(const Network<T>&, const ClusterAssignment&);                                    \
    template double chi(const Network<T>&, const ClusterAssignment&);                                             \
    template double phi(const Network<T>&, const PruneSets&);                                                     \
    template double max_cluster_deviation(const Network<T>&, const ClusterAssignment&);

CSGD_INSTANTIATE_OPT(float)
CSGD_INSTANTIATE_OPT(double)

} // namespace csgd
