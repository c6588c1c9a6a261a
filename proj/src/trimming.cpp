#include "csgd/trimming.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <optional>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "csgd/optimizer.hpp"

namespace csgd {

RemainingSet remaining_set(const ClusterSet& cs)
{
    RemainingSet rs{cs.layer(), {}};
    for (const auto& h : cs.clusters())
        rs.indices.push_back(h.front());
    std::sort(rs.indices.begin(), rs.indices.end());
    return rs;
}

namespace {

// Per-filter parameter rows of a conv layer: every kernel row, then gamma, beta.
template <typename T>
double deviation_over(const std::vector<T>& values, std::size_t rows, std::size_t cols, const ClusterSet& cs)
{
    double worst = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = values.data() + r * cols;
        for (const auto& h : cs.clusters()) {
            if (h.size() < 2)
                continue;
            double mean = 0;
            for (FilterIndex k : h)
                mean += double(row[k]);
            mean /= double(h.size());
            for (FilterIndex k : h)
                worst = std::max(worst, std::abs(double(row[k]) - mean));
        }
    }
    return worst;
}

template <typename T>
void collapse_rows(std::vector<T>& values, std::size_t rows, std::size_t cols, const ClusterSet& cs)
{
    for (std::size_t r = 0; r < rows; ++r) {
        T* row = values.data() + r * cols;
        for (const auto& h : cs.clusters()) {
            if (h.size() < 2)
                continue;
            double mean = 0;
            for (FilterIndex k : h)
                mean += double(row[k]);
            const T m = T(mean / double(h.size()));
            for (FilterIndex k : h)
                row[k] = m;
        }
    }
}

template <typename T>
void sum_input_block(LayerParams<T>& consumer, std::size_t offset, const ClusterSet& cs)
{
    Tensor4<T>& k = consumer.kernel;
    for (const auto& h : cs.clusters()) {
        if (h.size() < 2)
            continue;
        const std::size_t keep = offset + h.front();
        for (std::size_t m = 1; m < h.size(); ++m) {
            const std::size_t drop = offset + h[m];
            for (std::size_t a = 0; a < k.dim(0); ++a)
                for (std::size_t b = 0; b < k.dim(1); ++b)
                    for (std::size_t o = 0; o < k.dim(3); ++o)
                        k(a, b, keep, o) += k(a, b, drop, o);
        }
    }
}

void check_indices(const RemainingSet& rs, std::size_t width, const char* what)
{
    for (std::size_t i = 0; i < rs.indices.size(); ++i) {
        if (rs.indices[i] >= width)
            throw InputError(std::string(what) + ": index " + std::to_string(rs.indices[i]) + " out of range for " +
                             std::to_string(width) + " channels");
        if (i > 0 && rs.indices[i] <= rs.indices[i - 1])
            throw InputError(std::string(what) + ": indices must be sorted and distinct");
    }
}

template <typename T>
std::vector<T> pick(const std::vector<T>& v, const std::vector<FilterIndex>& idx)
{
    std::vector<T> out;
    out.reserve(idx.size());
    for (FilterIndex i : idx)
        out.push_back(v[i]);
    return out;
}

template <typename T>
LayerParams<T> keep_inputs(const LayerParams<T>& p, const std::vector<bool>& keep)
{
    const Tensor4<T>& k = p.kernel;
    std::vector<std::size_t> idx;
    for (std::size_t c = 0; c < keep.size(); ++c)
        if (keep[c])
            idx.push_back(c);
    Tensor4<T> out({k.dim(0), k.dim(1), idx.size(), k.dim(3)});
    for (std::size_t a = 0; a < k.dim(0); ++a)
        for (std::size_t b = 0; b < k.dim(1); ++b)
            for (std::size_t c = 0; c < idx.size(); ++c)
                for (std::size_t o = 0; o < k.dim(3); ++o)
                    out(a, b, c, o) = k(a, b, idx[c], o);
    LayerParams<T> q = p;
    q.kernel = std::move(out);
    return q;
}

// Removes the complement of each RemainingSet from its layer and from every consumer's input block.
template <typename T>
Network<T> apply_slices(const Network<T>& net, std::vector<Layer<T>> layers, const std::map<LayerId, RemainingSet>& keep)
{
    const ConsumerMap cmap = consumer_map(net);
    std::map<LayerId, std::vector<bool>> masks;
    for (const auto& [id, rs] : keep) {
        const std::size_t width = net.channels()[id];
        for (const ConsumerEntry& e : cmap.at(id)) {
            auto [it, inserted] = masks.try_emplace(e.consumer, layers[e.consumer].params.in_channels(), true);
            std::vector<bool> drop(width, true);
            for (FilterIndex j : rs.indices)
                drop[j] = false;
            for (std::size_t j = 0; j < width; ++j)
                if (drop[j])
                    it->second[e.offset + j] = false;
        }
        layers[id].params = slice_layer(layers[id].params, rs, width);
    }
    for (const auto& [consumer, mask] : masks)
        layers[consumer].params = keep_inputs(layers[consumer].params, mask);
    return Network<T>(std::move(layers), net.edges());
}

template <typename T>
std::vector<ConstraintGroup> all_groups(const Network<T>& net, const std::vector<ConstraintGroup>& given)
{
    std::vector<ConstraintGroup> out = given;
    for (auto& g : constraint_groups(net))
        out.push_back(std::move(g));
    return out;
}

} // namespace

template <typename T>
double cluster_deviation(const LayerParams<T>& p, const ClusterSet& cs)
{
    const std::size_t c = p.out_channels();
    return std::max({deviation_over(p.kernel.storage(), p.fan_in(), c, cs), deviation_over(p.gamma, 1, c, cs),
                     deviation_over(p.beta, 1, c, cs)});
}

template <typename T>
void merge_consumer_inputs(Network<T>& net, LayerId layer, const ClusterSet& cs, double tolerance)
{
    if (net.layer(layer).kind != OpKind::Conv)
        throw InputError("merge_consumer_inputs: " + net.layer_name(layer) + " is not a conv layer");
    if (cs.filters() != net.channels()[layer])
        throw DimensionError("merge_consumer_inputs: cluster set covers " + std::to_string(cs.filters()) +
                             " filters but " + net.layer_name(layer) + " has " +
                             std::to_string(net.channels()[layer]));
    if (tolerance >= 0) {
        const double dev = cluster_deviation(net.params(layer), cs);
        if (dev > tolerance) {
            std::ostringstream msg;
            msg.precision(6);
            msg << "filters not identical in " << net.layer_name(layer) << ": worst deviation " << dev
                << " exceeds " << tolerance;
            throw NotIdenticalError(msg.str());
        }
    }
    const ConsumerMap cmap = consumer_map(net);
    for (const ConsumerEntry& e : cmap.at(layer))
        sum_input_block(net.params(e.consumer), e.offset, cs);
}

template <typename T>
LayerParams<T> slice_layer(const LayerParams<T>& p, const RemainingSet& rs, std::size_t width)
{
    if (p.out_channels() != width)
        throw DimensionError("slice_layer: layer has " + std::to_string(p.out_channels()) + " filters, expected " +
                             std::to_string(width));
    check_indices(rs, width, "slice_layer");
    const Tensor4<T>& k = p.kernel;
    Tensor4<T> out({k.dim(0), k.dim(1), k.dim(2), rs.indices.size()});
    for (std::size_t a = 0; a < k.dim(0); ++a)
        for (std::size_t b = 0; b < k.dim(1); ++b)
            for (std::size_t c = 0; c < k.dim(2); ++c)
                for (std::size_t o = 0; o < rs.indices.size(); ++o)
                    out(a, b, c, o) = k(a, b, c, rs.indices[o]);
    LayerParams<T> q;
    q.kernel = std::move(out);
    q.mu = pick(p.mu, rs.indices);
    q.sigma = pick(p.sigma, rs.indices);
    q.gamma = pick(p.gamma, rs.indices);
    q.beta = pick(p.beta, rs.indices);
    q.stride = p.stride;
    q.padding = p.padding;
    return q;
}

template <typename T>
LayerParams<T> slice_consumer_inputs(const LayerParams<T>& p, const RemainingSet& rs, std::size_t width,
                                     std::size_t offset)
{
    if (offset + width > p.in_channels())
        throw InputError("slice_consumer_inputs: block [" + std::to_string(offset) + ", " +
                         std::to_string(offset + width) + ") exceeds " + std::to_string(p.in_channels()) +
                         " input channels");
    check_indices(rs, width, "slice_consumer_inputs");
    std::vector<bool> mask(p.in_channels(), true);
    for (std::size_t j = 0; j < width; ++j)
        mask[offset + j] = false;
    for (FilterIndex j : rs.indices)
        mask[offset + j] = true;
    return keep_inputs(p, mask);
}

template <typename T>
void collapse_clusters(Network<T>& net, const ClusterAssignment& clusters)
{
    check_clusters(net, clusters);
    for (const auto& [id, cs] : clusters) {
        LayerParams<T>& p = net.params(id);
        const std::size_t c = p.out_channels();
        collapse_rows(p.kernel.storage(), p.fan_in(), c, cs);
        collapse_rows(p.gamma, 1, c, cs);
        collapse_rows(p.beta, 1, c, cs);
        collapse_rows(p.mu, 1, c, cs);
        collapse_rows(p.sigma, 1, c, cs);
    }
}

template <typename T>
void share_statistics(Network<T>& net, const ClusterAssignment& clusters)
{
    check_clusters(net, clusters);
    for (const auto& [id, cs] : clusters) {
        LayerParams<T>& p = net.params(id);
        collapse_rows(p.mu, 1, p.out_channels(), cs);
        collapse_rows(p.sigma, 1, p.out_channels(), cs);
    }
}

void check_constraints(const std::vector<ConstraintGroup>& groups, const ClusterAssignment& clusters)
{
    for (const ConstraintGroup& g : groups) {
        const auto pace = clusters.find(g.pacesetter);
        for (LayerId f : g.followers) {
            const auto fol = clusters.find(f);
            const bool pace_trivial = pace == clusters.end() || pace->second.all_singletons();
            const bool fol_trivial = fol == clusters.end() || fol->second.all_singletons();
            if (pace_trivial && fol_trivial)
                continue;
            if (pace_trivial != fol_trivial || !pace->second.same_partition(fol->second))
                throw StructuralError("constraint violation: clusters of follower layer " + std::to_string(f) +
                                      " differ from pacesetter layer " + std::to_string(g.pacesetter));
        }
    }
}

template <typename T>
Network<T> trim_network(const Network<T>& net, const ClusterAssignment& clusters,
                        const std::vector<ConstraintGroup>& groups, const TrimOptions& options)
{
    check_clusters(net, clusters);
    check_constraints(all_groups(net, groups), clusters);

    ClusterAssignment active;
    for (const auto& [id, cs] : clusters)
        if (!cs.all_singletons())
            active.emplace(id, cs);
    if (active.empty())
        return net;

    if (options.collapse == CollapsePolicy::RequireIdentical)
        for (const auto& [id, cs] : active) {
            const double dev = cluster_deviation(net.params(id), cs);
            if (dev > options.tolerance) {
                std::ostringstream msg;
                msg.precision(6);
                msg << "filters not identical in " << net.layer_name(id) << ": worst deviation " << dev
                    << " exceeds " << options.tolerance;
                throw NotIdenticalError(msg.str());
            }
        }

    Network<T> work = net;
    if (options.collapse != CollapsePolicy::None)
        collapse_clusters(work, active);

    const ConsumerMap cmap = consumer_map(work);
    std::set<std::pair<LayerId, std::size_t>> merged;
    for (const auto& [id, cs] : active)
        for (const ConsumerEntry& e : cmap.at(id))
            if (merged.emplace(e.consumer, e.offset).second)
                sum_input_block(work.params(e.consumer), e.offset, cs);

    std::map<LayerId, RemainingSet> keep;
    for (const auto& [id, cs] : active)
        keep.emplace(id, remaining_set(cs));
    return apply_slices(work, work.layers(), keep);
}

template <typename T>
Network<T> prune_filters(const Network<T>& net, const std::map<LayerId, std::vector<FilterIndex>>& prune,
                         const std::vector<ConstraintGroup>& groups)
{
    std::map<LayerId, RemainingSet> keep;
    for (const auto& [id, list] : prune) {
        if (id >= net.size() || net.layer(id).kind != OpKind::Conv)
            throw InputError("prune: layer " + std::to_string(id) + " is not a conv layer");
        const std::size_t width = net.channels()[id];
        std::vector<bool> removed(width, false);
        for (FilterIndex j : list) {
            if (j >= width)
                throw InputError("prune: filter " + std::to_string(j) + " out of range for " + net.layer_name(id));
            removed[j] = true;
        }
        RemainingSet rs{id, {}};
        for (std::size_t j = 0; j < width; ++j)
            if (!removed[j])
                rs.indices.push_back(FilterIndex(j));
        if (rs.indices.empty())
            throw InputError("prune: cannot remove every filter of " + net.layer_name(id));
        if (rs.indices.size() < width)
            keep.emplace(id, std::move(rs));
    }
    for (const ConstraintGroup& g : all_groups(net, groups)) {
        const auto pace = keep.find(g.pacesetter);
        for (LayerId f : g.followers) {
            const auto fol = keep.find(f);
            const bool same = (pace == keep.end() && fol == keep.end()) ||
                              (pace != keep.end() && fol != keep.end() && pace->second.indices == fol->second.indices);
            if (!same)
                throw StructuralError("constraint violation: pruned filters of follower layer " + std::to_string(f) +
                                      " differ from pacesetter layer " + std::to_string(g.pacesetter));
        }
    }
    if (keep.empty())
        return net;
    return apply_slices(net, net.layers(), keep);
}

template <typename T>
Network<T> magnitude_prune(const Network<T>& net, const std::map<LayerId, std::size_t>& keep,
                           const std::vector<ConstraintGroup>& groups)
{
    auto ranked_prune = [&](LayerId id, std::size_t count) {
        if (id >= net.size() || net.layer(id).kind != OpKind::Conv)
            throw InputError("magnitude_prune: layer " + std::to_string(id) + " is not a conv layer");
        const std::size_t width = net.channels()[id];
        if (count == 0 || count > width)
            throw InputError("magnitude_prune: keep count " + std::to_string(count) + " invalid for " +
                             net.layer_name(id) + " with " + std::to_string(width) + " filters");
        const LayerParams<T>& p = net.params(id);
        std::vector<double> norm(width, 0.0);
        for (std::size_t r = 0; r < p.fan_in(); ++r)
            for (std::size_t j = 0; j < width; ++j) {
                const double v = double(p.kernel.data()[r * width + j]);
                norm[j] += v * v;
            }
        std::vector<FilterIndex> order(width);
        for (std::size_t j = 0; j < width; ++j)
            order[j] = FilterIndex(j);
        std::stable_sort(order.begin(), order.end(), [&](FilterIndex a, FilterIndex b) { return norm[a] > norm[b]; });
        std::vector<FilterIndex> pruned(order.begin() + std::ptrdiff_t(count), order.end());
        std::sort(pruned.begin(), pruned.end());
        return pruned;
    };

    std::map<LayerId, std::vector<FilterIndex>> prune;
    std::set<LayerId> handled;
    for (const ConstraintGroup& g : all_groups(net, groups)) {
        const auto members = g.members();
        std::optional<std::size_t> count;
        for (LayerId m : members) {
            const auto it = keep.find(m);
            if (it == keep.end())
                continue;
            if (count && *count != it->second)
                throw StructuralError("constraint violation: keep count of layer " + std::to_string(m) +
                                      " differs from the rest of the group led by layer " +
                                      std::to_string(g.pacesetter));
            count = it->second;
        }
        if (!count)
            continue;
        const auto pruned = ranked_prune(g.pacesetter, *count);
        for (LayerId m : members) {
            if (handled.count(m) && prune[m] != pruned)
                throw StructuralError("magnitude_prune: layer " + std::to_string(m) +
                                      " belongs to conflicting constraint groups");
            prune[m] = pruned;
            handled.insert(m);
        }
    }
    for (const auto& [id, count] : keep)
        if (!handled.count(id))
            prune[id] = ranked_prune(id, count);
    return prune_filters(net, prune, groups);
}

template <typename T>
EquivalenceReport verify_equivalence(const Network<T>& original, const Network<T>& trimmed,
                                     const VerifyOptions& options)
{
    if (original.input_channels() != trimmed.input_channels())
        throw DimensionError("verify: networks expect " + std::to_string(original.input_channels()) + " and " +
                             std::to_string(trimmed.input_channels()) + " input channels");
    EquivalenceReport r;
    r.tolerance = options.tolerance;
    r.samples = options.samples;
    r.before = count_cost(original, options.height, options.width);
    r.after = count_cost(trimmed, options.height, options.width);
    if (r.before.parameters > 0)
        r.param_reduction = 1.0 - double(r.after.parameters) / double(r.before.parameters);
    if (r.before.macs > 0)
        r.flop_reduction = 1.0 - double(r.after.macs) / double(r.before.macs);

    std::mt19937_64 rng(options.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    constexpr std::size_t kChunk = 32;
    const std::size_t c = original.input_channels();
    for (std::size_t done = 0; done < options.samples;) {
        const std::size_t n = std::min(kChunk, options.samples - done);
        Tensor4<T> x({n, options.height, options.width, c});
        for (auto& v : x.storage())
            v = T(normal(rng));
        const Tensor4<T> a = original.forward(x);
        const Tensor4<T> b = trimmed.forward(x);
        if (a.shape() != b.shape())
            throw DimensionError("verify: logit shapes differ: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double d = std::abs(double(a.data()[i]) - double(b.data()[i]));
            r.max_abs_diff = std::isnan(d) ? d : std::max(r.max_abs_diff, d);
        }
        done += n;
    }
    r.passed = !std::isnan(r.max_abs_diff) && r.max_abs_diff <= options.tolerance;
    return r;
}

template <typename T>
std::string trim_report(const Network<T>& before, const Network<T>& after, std::size_t height, std::size_t width)
{
    auto side = [&](const Network<T>& net) {
        nlohmann::ordered_json j;
        nlohmann::ordered_json widths = nlohmann::ordered_json::object();
        for (LayerId id : net.conv_layers())
            widths[std::to_string(id)] = net.channels()[id];
        const ParamCounts cost = count_cost(net, height, width);
        j["widths"] = widths;
        j["parameters"] = cost.parameters;
        j["macs"] = cost.macs;
        return j;
    };
    const ParamCounts a = count_cost(before, height, width), b = count_cost(after, height, width);
    nlohmann::ordered_json out;
    out["input"] = {height, width, before.input_channels()};
    out["before"] = side(before);
    out["after"] = side(after);
    out["parameter_reduction"] = a.parameters ? 1.0 - double(b.parameters) / double(a.parameters) : 0.0;
    out["flop_reduction"] = a.macs ? 1.0 - double(b.macs) / double(a.macs) : 0.0;
    return out.dump(2);
}

#define CSGD_INSTANTIATE_TRIM(T)                                                                                  \
    template double cluster_deviation(const LayerParams<T>&, const ClusterSet&);                                 \
    template void merge_consumer_inputs(Network<T>&, LayerId, const ClusterSet&, double);                        \
    template LayerParams<T> slice_layer(const LayerParams<T>&, const RemainingSet&, std::size_t);                \
    template LayerParams<T> slice_consumer_inputs(const LayerParams<T>&, const RemainingSet&, std::size_t,       \
                                                  std::size_t);                                                  \
    template void collapse_clusters(Network<T>&, const ClusterAssignment&);                                      \
    template void share_statistics(Network<T>&, const ClusterAssignment&);                                       \
    template Network<T> trim_network(const Network<T>&, const ClusterAssignment&,                                \
                                     const std::vector<ConstraintGroup>&, const TrimOptions&);                   \
    template Network<T> prune_filters(const Network<T>&, const std::map<LayerId, std::vector<FilterIndex>>&,     \
                                      const std::vector<ConstraintGroup>&);                                      \
    template Network<T> magnitude_prune(const Network<T>&, const std::map<LayerId, std::size_t>&,                \
                                        const std::vector<ConstraintGroup>&);                                    \
    template EquivalenceReport verify_equivalence(const Network<T>&, const Network<T>&, const VerifyOptions&);   \
    template std::string trim_report(const Network<T>&, const Network<T>&, std::size_t, std::size_t);

CSGD_INSTANTIATE_TRIM(float)
CSGD_INSTANTIATE_TRIM(double)

} // namespace csgd
