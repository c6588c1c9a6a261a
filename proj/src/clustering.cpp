#include "csgd/clustering.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

namespace csgd {

ClusterSet::ClusterSet(LayerId layer, std::size_t filters, std::vector<std::vector<FilterIndex>> clusters)
    : layer_(layer), filters_(filters), clusters_(std::move(clusters)), lookup_(filters, filters)
{
    const std::string where = "layer " + std::to_string(layer) + ": ";
    for (auto& h : clusters_) {
        if (h.empty())
            throw InputError(where + "empty cluster");
        std::sort(h.begin(), h.end());
    }
    std::sort(clusters_.begin(), clusters_.end(), [](const auto& a, const auto& b) { return a.front() < b.front(); });
    for (std::size_t c = 0; c < clusters_.size(); ++c)
        for (FilterIndex j : clusters_[c]) {
            if (j >= filters)
                throw InputError(where + "filter index " + std::to_string(j) + " out of range for " +
                                 std::to_string(filters) + " filters");
            if (lookup_[j] != filters)
                throw InputError(where + "filter " + std::to_string(j) + " appears in two clusters");
            lookup_[j] = c;
        }
    for (std::size_t j = 0; j < filters; ++j)
        if (lookup_[j] == filters)
            throw InputError(where + "filter " + std::to_string(j) + " is in no cluster");
}

ClusterSet ClusterSet::singletons(LayerId layer, std::size_t filters)
{
    std::vector<std::vector<FilterIndex>> clusters(filters);
    for (std::size_t j = 0; j < filters; ++j)
        clusters[j] = {FilterIndex(j)};
    return ClusterSet(layer, filters, std::move(clusters));
}

ClusterSet ClusterSet::for_layer(LayerId layer) const
{
    ClusterSet copy = *this;
    copy.layer_ = layer;
    return copy;
}

ClusterSet even_clusters(std::size_t filters, std::size_t clusters, LayerId layer)
{
    if (clusters == 0 || clusters > filters)
        throw InputError("even_clusters: need 1 <= r <= c, got r=" + std::to_string(clusters) +
                         " c=" + std::to_string(filters));
    const std::size_t base = filters / clusters, extra = filters % clusters;
    std::vector<std::vector<FilterIndex>> out(clusters);
    FilterIndex next = 0;
    for (std::size_t c = 0; c < clusters; ++c)
        for (std::size_t k = 0; k < base + (c < extra ? 1 : 0); ++k)
            out[c].push_back(next++);
    return ClusterSet(layer, filters, std::move(out));
}

namespace {

double squared_distance(const std::vector<double>& a, const std::vector<double>& b)
{
    double d = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        d += (a[i] - b[i]) * (a[i] - b[i]);
    return d;
}

} // namespace

template <typename T>
ClusterSet kmeans_clusters(const Tensor4<T>& kernel, std::size_t r, std::uint64_t seed, LayerId layer)
{
    const std::size_t c = kernel.dim(3);
    const std::size_t dim = kernel.size() / std::max<std::size_t>(c, 1);
    if (r == 0 || r > c)
        throw InputError("kmeans_clusters: need 1 <= r <= c_out, got r=" + std::to_string(r) +
                         " c_out=" + std::to_string(c));

    std::vector<std::vector<double>> points(c, std::vector<double>(dim));
    for (std::size_t row = 0; row < dim; ++row)
        for (std::size_t j = 0; j < c; ++j)
            points[j][row] = double(kernel.data()[row * c + j]);

    // k-means++ seeding.
    std::mt19937_64 rng(seed);
    std::vector<std::vector<double>> centers;
    std::vector<bool> chosen(c, false);
    std::size_t first = std::uniform_int_distribution<std::size_t>(0, c - 1)(rng);
    centers.push_back(points[first]);
    chosen[first] = true;
    std::vector<double> d2(c, std::numeric_limits<double>::infinity());
    while (centers.size() < r) {
        double total = 0;
        for (std::size_t j = 0; j < c; ++j) {
            d2[j] = std::min(d2[j], squared_distance(points[j], centers.back()));
            if (!chosen[j])
                total += d2[j];
        }
        std::size_t pick = c;
        if (total > 0) {
            double u = std::uniform_real_distribution<double>(0.0, total)(rng);
            for (std::size_t j = 0; j < c; ++j) {
                if (chosen[j] || d2[j] <= 0)
                    continue;
                pick = j;
                if (u < d2[j])
                    break;
                u -= d2[j];
            }
        }
        if (pick == c) {
            // All remaining points coincide with a centre: pick uniformly among the unchosen.
            std::vector<std::size_t> rest;
            for (std::size_t j = 0; j < c; ++j)
                if (!chosen[j])
                    rest.push_back(j);
            pick = rest[std::uniform_int_distribution<std::size_t>(0, rest.size() - 1)(rng)];
        }
        centers.push_back(points[pick]);
        chosen[pick] = true;
    }

    std::vector<std::size_t> assign(c, r), previous;
    for (std::size_t iter = 0; iter < kKmeansMaxIterations; ++iter) {
        for (std::size_t j = 0; j < c; ++j) {
            double best = std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < r; ++k) {
                const double d = squared_distance(points[j], centers[k]);
                if (d < best) {
                    best = d;
                    assign[j] = k;
                }
            }
        }
        // Repair empty clusters by splitting the largest one at its farthest member.
        for (;;) {
            std::vector<std::size_t> count(r, 0);
            for (std::size_t a : assign)
                ++count[a];
            const auto empty = std::find(count.begin(), count.end(), 0);
            if (empty == count.end())
                break;
            const std::size_t largest = std::size_t(std::max_element(count.begin(), count.end()) - count.begin());
            std::size_t far = c;
            double far_d = -1;
            for (std::size_t j = 0; j < c; ++j)
                if (assign[j] == largest) {
                    const double d = squared_distance(points[j], centers[largest]);
                    if (d > far_d) {
                        far_d = d;
                        far = j;
                    }
                }
            const std::size_t target = std::size_t(empty - count.begin());
            assign[far] = target;
            centers[target] = points[far];
        }
        const bool stable = assign == previous;
        previous = assign;
        for (std::size_t k = 0; k < r; ++k) {
            std::vector<double> sum(dim, 0.0);
            std::size_t n = 0;
            for (std::size_t j = 0; j < c; ++j)
                if (assign[j] == k) {
                    for (std::size_t i = 0; i < dim; ++i)
                        sum[i] += points[j][i];
                    ++n;
                }
            for (auto& s : sum)
                s /= double(n);
            centers[k] = std::move(sum);
        }
        if (stable)
            break;
    }

    std::vector<std::vector<FilterIndex>> out(r);
    for (std::size_t j = 0; j < c; ++j)
        out[assign[j]].push_back(FilterIndex(j));
    return ClusterSet(layer, c, std::move(out));
}

ClusterAssignment propagate_constraints(const std::vector<ConstraintGroup>& groups, ClusterAssignment assignment,
                                        std::span<const std::size_t> layer_widths)
{
    for (const ConstraintGroup& g : groups) {
        const auto it = assignment.find(g.pacesetter);
        if (it == assignment.end())
            throw StructuralError("no cluster set for pacesetter layer " + std::to_string(g.pacesetter));
        const ClusterSet pace = it->second;
        for (LayerId f : g.followers) {
            std::size_t width = 0;
            if (f < layer_widths.size())
                width = layer_widths[f];
            else if (auto existing = assignment.find(f); existing != assignment.end())
                width = existing->second.filters();
            if (width != 0 && width != pace.filters())
                throw StructuralError("follower layer " + std::to_string(f) + " has " + std::to_string(width) +
                                      " filters, pacesetter layer " + std::to_string(g.pacesetter) + " has " +
                                      std::to_string(pace.filters()));
            assignment.insert_or_assign(f, pace.for_layer(f));
        }
    }
    return assignment;
}

template <typename T>
Matrix<T> build_gamma(const ClusterSet& cs)
{
    const auto c = Eigen::Index(cs.filters());
    Matrix<T> gamma = Matrix<T>::Zero(c, c);
    for (const auto& h : cs.clusters())
        for (FilterIndex m : h)
            for (FilterIndex n : h)
                gamma(m, n) = T(1) / T(h.size());
    return gamma;
}

template <typename T>
Matrix<T> build_lambda(const ClusterSet& cs, T eta, T eps)
{
    if (eta < T(0) || eps < T(0))
        throw InputError("build_lambda: eta and eps must be non-negative");
    const auto c = Eigen::Index(cs.filters());
    Matrix<T> lambda = Matrix<T>::Zero(c, c);
    for (const auto& h : cs.clusters()) {
        const T size = T(h.size());
        for (FilterIndex m : h)
            for (FilterIndex n : h)
                lambda(m, n) = m == n ? eta + (T(1) - T(1) / size) * eps : -eps / size;
    }
    return lambda;
}

std::string format_manifest(const Manifest& manifest)
{
    std::ostringstream out;
    for (const auto& [layer, clusters] : manifest) {
        out << layer << ":";
        for (std::size_t c = 0; c < clusters.size(); ++c) {
            out << (c ? ";[" : " [");
            for (std::size_t k = 0; k < clusters[c].size(); ++k)
                out << (k ? "," : "") << clusters[c][k];
            out << "]";
        }
        out << "\n";
    }
    return out.str();
}

Manifest parse_manifest(const std::string& text)
{
    Manifest manifest;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string where = "manifest line " + std::to_string(lineno) + ": ";
        line.erase(std::remove_if(line.begin(), line.end(), [](unsigned char ch) { return std::isspace(ch); }),
                   line.end());
        if (line.empty() || line.front() == '#')
            continue;
        const auto colon = line.find(':');
        if (colon == std::string::npos || colon == 0)
            throw ConfigError(where + "expected 'layer_id: [i,j,...];...'");
        LayerId layer = 0;
        try {
            std::size_t used = 0;
            const unsigned long v = std::stoul(line.substr(0, colon), &used);
            if (used != colon)
                throw std::invalid_argument("trailing");
            layer = LayerId(v);
        } catch (const std::exception&) {
            throw ConfigError(where + "bad layer id '" + line.substr(0, colon) + "'");
        }
        if (manifest.count(layer))
            throw ConfigError(where + "layer " + std::to_string(layer) + " listed twice");
        std::vector<std::vector<FilterIndex>> clusters;
        std::size_t pos = colon + 1;
        while (pos < line.size()) {
            if (line[pos] != '[')
                throw ConfigError(where + "expected '[' at column " + std::to_string(pos + 1));
            const auto close = line.find(']', pos);
            if (close == std::string::npos)
                throw ConfigError(where + "unterminated '['");
            std::vector<FilterIndex> cluster;
            std::stringstream items(line.substr(pos + 1, close - pos - 1));
            std::string item;
            while (std::getline(items, item, ',')) {
                if (item.empty() || !std::all_of(item.begin(), item.end(), ::isdigit))
                    throw ConfigError(where + "bad filter index '" + item + "'");
                cluster.push_back(FilterIndex(std::stoul(item)));
            }
            clusters.push_back(std::move(cluster));
            pos = close + 1;
            if (pos < line.size()) {
                if (line[pos] != ';')
                    throw ConfigError(where + "expected ';' between clusters");
                ++pos;
            }
        }
        manifest.emplace(layer, std::move(clusters));
    }
    return manifest;
}

Manifest read_manifest_file(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot open manifest '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_manifest(buf.str());
}

void write_manifest_file(const std::string& path, const Manifest& manifest)
{
    std::ofstream out(path);
    if (!out)
        throw ConfigError("cannot write manifest '" + path + "'");
    out << format_manifest(manifest);
}

Manifest to_manifest(const ClusterAssignment& assignment)
{
    Manifest m;
    for (const auto& [layer, cs] : assignment)
        m[layer] = cs.clusters();
    return m;
}

template <typename T>
ClusterAssignment to_assignment(const Manifest& manifest, const Network<T>& net)
{
    ClusterAssignment out;
    for (const auto& [layer, clusters] : manifest) {
        if (layer >= net.size() || net.layer(layer).kind != OpKind::Conv)
            throw ConfigError("manifest: layer " + std::to_string(layer) + " is not a conv layer of the model");
        out.emplace(layer, ClusterSet(layer, net.channels()[layer], clusters));
    }
    return out;
}

template ClusterSet kmeans_clusters(const Tensor4<float>&, std::size_t, std::uint64_t, LayerId);
template ClusterSet kmeans_clusters(const Tensor4<double>&, std::size_t, std::uint64_t, LayerId);
template Matrix<float> build_gamma<float>(const ClusterSet&);
template Matrix<double> build_gamma<double>(const ClusterSet&);
template Matrix<float> build_lambda<float>(const ClusterSet&, float, float);
template Matrix<double> build_lambda<double>(const ClusterSet&, double, double);
template ClusterAssignment to_assignment(const Manifest&, const Network<float>&);
template ClusterAssignment to_assignment(const Manifest&, const Network<double>&);

} // namespace csgd
