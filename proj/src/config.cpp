#include "csgd/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace csgd {

std::string to_string(ClusterMethod m)
{
    return m == ClusterMethod::Even ? "even" : "kmeans";
}

ClusterMethod parse_cluster_method(const std::string& s)
{
    if (s == "even")
        return ClusterMethod::Even;
    if (s == "kmeans" || s == "k-means")
        return ClusterMethod::Kmeans;
    throw ConfigError("cluster.method: unknown method '" + s + "' (expected even or kmeans)");
}

namespace {

std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos)
        return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::size_t to_size(const std::string& key, const std::string& v)
{
    std::size_t pos = 0;
    unsigned long long out = 0;
    try {
        if (!v.empty() && v[0] == '-')
            throw std::invalid_argument(v);
        out = std::stoull(v, &pos);
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    }
    if (pos != v.size())
        throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return std::size_t(out);
}

double to_double(const std::string& key, const std::string& v)
{
    std::size_t pos = 0;
    double out = 0;
    try {
        out = std::stod(v, &pos);
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
    if (pos != v.size())
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    return out;
}

bool to_bool(const std::string& key, const std::string& v)
{
    if (v == "true" || v == "1" || v == "yes")
        return true;
    if (v == "false" || v == "0" || v == "no")
        return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::vector<std::size_t> to_list(const std::string& key, const std::string& v)
{
    std::vector<std::size_t> out;
    std::stringstream in(v);
    std::string item;
    while (std::getline(in, item, ','))
        out.push_back(to_size(key, trim(item)));
    return out;
}

std::string join(const std::vector<std::size_t>& v)
{
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i)
        out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

} // namespace

CountSpec CountSpec::parse(const std::string& text)
{
    CountSpec out;
    const std::string t = trim(text);
    if (t.empty() || t == "none")
        return out;
    const auto slash = t.find('/');
    if (slash != std::string::npos && t.find('=') == std::string::npos) {
        out.numerator = to_size("counts", trim(t.substr(0, slash)));
        out.denominator = to_size("counts", trim(t.substr(slash + 1)));
        if (out.denominator == 0 || out.numerator == 0 || out.numerator > out.denominator)
            throw ConfigError("counts: fraction '" + t + "' must satisfy 0 < n <= d");
        return out;
    }
    std::stringstream in(t);
    std::string item;
    while (std::getline(in, item, ',')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos)
            throw ConfigError("counts: expected 'n/d' or 'layer=count,...', got '" + t + "'");
        const auto id = LayerId(to_size("counts", trim(item.substr(0, eq))));
        if (!out.explicit_counts.emplace(id, to_size("counts", trim(item.substr(eq + 1)))).second)
            throw ConfigError("counts: layer " + std::to_string(id) + " listed twice");
    }
    return out;
}

std::string CountSpec::format() const
{
    if (denominator > 0)
        return std::to_string(numerator) + "/" + std::to_string(denominator);
    std::string out;
    for (const auto& [id, c] : explicit_counts)
        out += (out.empty() ? "" : ",") + std::to_string(id) + "=" + std::to_string(c);
    return out.empty() ? "none" : out;
}

template <typename T>
std::map<LayerId, std::size_t> CountSpec::resolve(const Network<T>& net) const
{
    std::map<LayerId, LayerId> leader;
    for (const auto& g : constraint_groups(net))
        for (LayerId f : g.followers)
            leader[f] = g.pacesetter;
    std::map<LayerId, std::size_t> out;
    if (denominator > 0) {
        for (LayerId id : net.conv_layers()) {
            if (leader.count(id))
                continue;
            const std::size_t w = net.channels()[id];
            const auto c = std::size_t(std::llround(double(w) * double(numerator) / double(denominator)));
            out[id] = std::clamp<std::size_t>(c, 1, w);
        }
    } else {
        for (const auto& [id, c] : explicit_counts) {
            if (id >= net.size() || net.layer(id).kind != OpKind::Conv)
                throw ConfigError("counts: layer " + std::to_string(id) + " is not a conv layer");
            if (leader.count(id))
                throw ConfigError("counts: layer " + std::to_string(id) +
                                  " follows a constraint group and inherits from layer " +
                                  std::to_string(leader.at(id)));
            if (c == 0 || c > net.channels()[id])
                throw ConfigError("counts: " + std::to_string(c) + " exceeds the width " +
                                  std::to_string(net.channels()[id]) + " of " + net.layer_name(id));
            out[id] = c;
        }
    }
    for (const auto& [f, p] : leader)
        if (out.count(p))
            out[f] = out[p];
    return out;
}

template std::map<LayerId, std::size_t> CountSpec::resolve(const Network<float>&) const;
template std::map<LayerId, std::size_t> CountSpec::resolve(const Network<double>&) const;

void DataConfig::validate() const
{
    if (classes < 2 || classes > 6)
        throw ConfigError("data.classes: must be between 2 and 6, got " + std::to_string(classes));
    if (samples < classes)
        throw ConfigError("data.samples: need at least one sample per class");
    if (size < 4)
        throw ConfigError("data.size: images must be at least 4x4");
    if (!(noise >= 0))
        throw ConfigError("data.noise: must be non-negative");
}

void ExperimentConfig::validate() const
{
    network.validate();
    optimizer.validate();
    data.validate();
    if (network.classes != data.classes)
        throw ConfigError("network.classes must equal data.classes");
    const bool needs_counts = optimizer.mode != OptimizerMode::Sgd;
    if (needs_counts && cluster.counts.empty() && (optimizer.mode == OptimizerMode::GroupLasso || cluster.manifest.empty()))
        throw ConfigError("cluster.counts: required for the " + to_string(optimizer.mode) + " mode");
    if (run.batch_size == 0)
        throw ConfigError("run.batch_size: must be positive");
    if (run.eval_interval == 0)
        throw ConfigError("run.eval_interval: must be positive");
    if (run.precision != 32 && run.precision != 64)
        throw ConfigError("run.precision: must be 32 or 64");
    if (!(run.bn_momentum >= 0 && run.bn_momentum <= 1))
        throw ConfigError("run.bn_momentum: must lie in [0, 1]");
}

ExperimentConfig parse_config(const std::string& text)
{
    ExperimentConfig cfg;
    using Setter = std::function<void(const std::string& key, const std::string& value)>;
    std::map<std::string, Setter> setters = {
        {"network.topology", [&](auto&, auto& v) { cfg.network.topology = parse_topology(v); }},
        {"network.kernel_size", [&](auto& k, auto& v) { cfg.network.kernel_size = to_size(k, v); }},
        {"network.widths", [&](auto& k, auto& v) { cfg.network.widths = to_list(k, v); }},
        {"network.strides", [&](auto& k, auto& v) { cfg.network.strides = to_list(k, v); }},
        {"network.blocks_per_stage", [&](auto& k, auto& v) { cfg.network.blocks_per_stage = to_size(k, v); }},
        {"network.stem_width", [&](auto& k, auto& v) { cfg.network.stem_width = to_size(k, v); }},
        {"network.growth", [&](auto& k, auto& v) { cfg.network.growth = to_size(k, v); }},
        {"network.dense_layers", [&](auto& k, auto& v) { cfg.network.dense_layers = to_size(k, v); }},
        {"network.dense_stages", [&](auto& k, auto& v) { cfg.network.dense_stages = to_size(k, v); }},
        {"network.transition_width", [&](auto& k, auto& v) { cfg.network.transition_width = to_size(k, v); }},
        {"network.seed", [&](auto& k, auto& v) { cfg.network.seed = to_size(k, v); }},
        {"optimizer.mode", [&](auto&, auto& v) { cfg.optimizer.mode = parse_optimizer_mode(v); }},
        {"optimizer.tau", [&](auto&, auto& v) { cfg.optimizer.tau = LrSchedule::parse(v); }},
        {"optimizer.eta", [&](auto& k, auto& v) { cfg.optimizer.eta = to_double(k, v); }},
        {"optimizer.eps", [&](auto& k, auto& v) { cfg.optimizer.eps = to_double(k, v); }},
        {"optimizer.lasso_strength", [&](auto& k, auto& v) { cfg.optimizer.lasso_strength = to_double(k, v); }},
        {"optimizer.start_epoch", [&](auto& k, auto& v) { cfg.optimizer.start_epoch = to_size(k, v); }},
        {"cluster.method", [&](auto&, auto& v) { cfg.cluster.method = parse_cluster_method(v); }},
        {"cluster.counts", [&](auto&, auto& v) { cfg.cluster.counts = CountSpec::parse(v); }},
        {"cluster.seed", [&](auto& k, auto& v) { cfg.cluster.seed = to_size(k, v); }},
        {"cluster.manifest", [&](auto&, auto& v) { cfg.cluster.manifest = v; }},
        {"data.seed", [&](auto& k, auto& v) { cfg.data.seed = to_size(k, v); }},
        {"data.size", [&](auto& k, auto& v) { cfg.data.size = to_size(k, v); }},
        {"data.classes", [&](auto& k, auto& v) { cfg.data.classes = to_size(k, v); }},
        {"data.samples", [&](auto& k, auto& v) { cfg.data.samples = to_size(k, v); }},
        {"data.noise", [&](auto& k, auto& v) { cfg.data.noise = to_double(k, v); }},
        {"run.epochs", [&](auto& k, auto& v) { cfg.run.epochs = to_size(k, v); }},
        {"run.batch_size", [&](auto& k, auto& v) { cfg.run.batch_size = to_size(k, v); }},
        {"run.eval_interval", [&](auto& k, auto& v) { cfg.run.eval_interval = to_size(k, v); }},
        {"run.output_dir", [&](auto&, auto& v) { cfg.run.output_dir = v; }},
        {"run.precision", [&](auto& k, auto& v) { cfg.run.precision = int(to_size(k, v)); }},
        {"run.shuffle_seed", [&](auto& k, auto& v) { cfg.run.shuffle_seed = to_size(k, v); }},
        {"run.log_steps", [&](auto& k, auto& v) { cfg.run.log_steps = to_bool(k, v); }},
        {"run.bn_momentum", [&](auto& k, auto& v) { cfg.run.bn_momentum = to_double(k, v); }},
    };
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
        const auto hash = line.find('#');
        if (hash != std::string::npos)
            line.erase(hash);
        line = trim(line);
        if (line.empty())
            continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        const auto it = setters.find(key);
        if (it == setters.end())
            throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        if (!seen.insert(key).second)
            throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
        try {
            it->second(key, value);
        } catch (const ConfigError& e) {
            throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    cfg.network.classes = cfg.data.classes;
    cfg.network.in_channels = 1;
    cfg.validate();
    return cfg;
}

ExperimentConfig load_config(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

std::string format_config(const ExperimentConfig& cfg)
{
    std::ostringstream out;
    out.precision(17);
    const auto& n = cfg.network;
    out << "network.topology = " << to_string(n.topology) << "\n"
        << "network.kernel_size = " << n.kernel_size << "\n"
        << "network.widths = " << join(n.widths) << "\n";
    if (!n.strides.empty())
        out << "network.strides = " << join(n.strides) << "\n";
    out << "network.blocks_per_stage = " << n.blocks_per_stage << "\n"
        << "network.stem_width = " << n.stem_width << "\n"
        << "network.growth = " << n.growth << "\n"
        << "network.dense_layers = " << n.dense_layers << "\n"
        << "network.dense_stages = " << n.dense_stages << "\n"
        << "network.transition_width = " << n.transition_width << "\n"
        << "network.seed = " << n.seed << "\n"
        << "optimizer.mode = " << to_string(cfg.optimizer.mode) << "\n"
        << "optimizer.tau = " << cfg.optimizer.tau.format() << "\n"
        << "optimizer.eta = " << cfg.optimizer.eta << "\n"
        << "optimizer.eps = " << cfg.optimizer.eps << "\n"
        << "optimizer.lasso_strength = " << cfg.optimizer.lasso_strength << "\n"
        << "optimizer.start_epoch = " << cfg.optimizer.start_epoch << "\n"
        << "cluster.method = " << to_string(cfg.cluster.method) << "\n"
        << "cluster.counts = " << cfg.cluster.counts.format() << "\n"
        << "cluster.seed = " << cfg.cluster.seed << "\n";
    if (!cfg.cluster.manifest.empty())
        out << "cluster.manifest = " << cfg.cluster.manifest << "\n";
    out << "data.seed = " << cfg.data.seed << "\n"
        << "data.size = " << cfg.data.size << "\n"
        << "data.classes = " << cfg.data.classes << "\n"
        << "data.samples = " << cfg.data.samples << "\n"
        << "data.noise = " << cfg.data.noise << "\n"
        << "run.epochs = " << cfg.run.epochs << "\n"
        << "run.batch_size = " << cfg.run.batch_size << "\n"
        << "run.eval_interval = " << cfg.run.eval_interval << "\n"
        << "run.output_dir = " << cfg.run.output_dir << "\n"
        << "run.precision = " << cfg.run.precision << "\n"
        << "run.shuffle_seed = " << cfg.run.shuffle_seed << "\n"
        << "run.log_steps = " << (cfg.run.log_steps ? "true" : "false") << "\n"
        << "run.bn_momentum = " << cfg.run.bn_momentum << "\n";
    return out.str();
}

} // namespace csgd
