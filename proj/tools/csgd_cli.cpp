// Command-line driver: train, cluster, trim, prune-magnitude, verify, gradcheck, metrics.
#include <cstdio>
#include <iostream>
#include <random>

#include <CLI11.hpp>

#include "csgd/config.hpp"
#include "csgd/gradcheck.hpp"
#include "csgd/serialize.hpp"
#include "csgd/trainer.hpp"
#include "csgd/trimming.hpp"

using namespace csgd;

namespace {

int cmd_train(const std::string& config, const std::string& out_dir)
{
    ExperimentConfig cfg = load_config(config);
    if (!out_dir.empty())
        cfg.run.output_dir = out_dir;
    const RunSummary s = run_experiment(cfg);
    std::printf("trained %s (%d-bit): train-acc %.4f eval-acc %.4f\n", to_string(cfg.optimizer.mode).c_str(),
                cfg.run.precision, s.train_acc, s.eval_acc);
    if (!std::isnan(s.chi))
        std::printf("chi %.6g\n", s.chi);
    if (!std::isnan(s.phi))
        std::printf("phi %.6g\n", s.phi);
    std::printf("model %s\nmetrics %s\n", s.model_path.c_str(), s.metrics_path.c_str());
    if (!s.manifest_path.empty())
        std::printf("manifest %s\n", s.manifest_path.c_str());
    return 0;
}

int cmd_cluster(const std::string& model, const std::string& method, const std::string& counts,
                std::uint64_t seed, const std::string& out)
{
    const Network<float> net = load_model(model);
    const ClusterAssignment a = make_clusters(net, parse_cluster_method(method), CountSpec::parse(counts), seed);
    write_manifest_file(out, to_manifest(a));
    std::printf("wrote clusters for %zu layers to %s\n", a.size(), out.c_str());
    return 0;
}

CollapsePolicy parse_policy(const std::string& s)
{
    if (s == "force")
        return CollapsePolicy::Force;
    if (s == "require")
        return CollapsePolicy::RequireIdentical;
    if (s == "none")
        return CollapsePolicy::None;
    throw ConfigError("--collapse: expected force, require or none");
}

int cmd_trim(const std::string& model, const std::string& clusters, const std::string& out,
             const std::string& policy, std::size_t size)
{
    const Network<float> net = load_model(model);
    const ClusterAssignment a = to_assignment(read_manifest_file(clusters), net);
    const Network<float> trimmed = trim_network(net, a, constraint_groups(net), {parse_policy(policy)});
    save_model(out, trimmed);
    std::printf("%s\n", trim_report(net, trimmed, size, size).c_str());
    return 0;
}

int cmd_prune(const std::string& model, const std::string& counts, const std::string& out, std::size_t size)
{
    const Network<float> net = load_model(model);
    const auto keep = CountSpec::parse(counts).resolve(net);
    const Network<float> pruned = magnitude_prune(net, keep, constraint_groups(net));
    save_model(out, pruned);
    std::printf("%s\n", trim_report(net, pruned, size, size).c_str());
    return 0;
}

int cmd_verify(const std::string& original, const std::string& trimmed, const VerifyOptions& opts)
{
    const EquivalenceReport r = verify_equivalence(load_model(original), load_model(trimmed), opts);
    std::printf("max-abs logit diff %.6g over %zu samples (tol %.3g): %s\n", r.max_abs_diff, r.samples, r.tolerance,
                r.passed ? "PASS" : "FAIL");
    std::printf("parameters %zu -> %zu (%.2f%% fewer), MACs %zu -> %zu (%.2f%% fewer)\n", r.before.parameters,
                r.after.parameters, 100 * r.param_reduction, r.before.macs, r.after.macs, 100 * r.flop_reduction);
    return r.passed ? 0 : 1;
}

template <typename T>
int gradcheck_typed(const ExperimentConfig& cfg, std::size_t batch)
{
    const Network<T> net = build_network<T>(cfg.network);
    std::mt19937_64 rng(cfg.data.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Tensor4<T> x({batch, cfg.data.size, cfg.data.size, net.input_channels()});
    for (auto& v : x.storage())
        v = T(unit(rng));
    std::vector<std::int32_t> y(batch);
    for (std::size_t i = 0; i < batch; ++i)
        y[i] = std::int32_t(i % cfg.data.classes);
    GradCheckOptions opts;
    opts.tolerance = sizeof(T) == 4 ? 1e-3 : 1e-6;
    const GradCheckReport r = grad_check(net, x, y, opts);
    std::printf("%s\n", r.summary().c_str());
    return r.passed() ? 0 : 1;
}

int cmd_gradcheck(const std::string& config, std::size_t batch)
{
    const ExperimentConfig cfg = load_config(config);
    return cfg.run.precision == 64 ? gradcheck_typed<double>(cfg, batch) : gradcheck_typed<float>(cfg, batch);
}

int cmd_metrics(const std::string& model, const std::string& clusters, const std::string& prune)
{
    const Network<float> net = load_model(model);
    if (!clusters.empty()) {
        const ClusterAssignment a = to_assignment(read_manifest_file(clusters), net);
        std::printf("chi %.17g\nmax cluster deviation %.6g\n", chi(net, a), max_cluster_deviation(net, a));
    }
    if (!prune.empty()) {
        PruneSets sets;
        for (const auto& [id, lists] : read_manifest_file(prune))
            for (const auto& l : lists)
                sets[id].insert(sets[id].end(), l.begin(), l.end());
        std::printf("phi %.17g\n", phi(net, sets));
    }
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Centripetal SGD training and lossless filter trimming"};
    app.require_subcommand(1);

    std::string config, out, model, method = "even", counts, clusters, original, trimmed, policy = "force", prune;
    std::uint64_t seed = 1;
    std::size_t size = 12, batch = 2;
    VerifyOptions vopts;

    auto* train = app.add_subcommand("train", "Run a training experiment from a config file");
    train->add_option("--config", config, "Config file")->required();
    train->add_option("--out", out, "Override run.output_dir");

    auto* cluster = app.add_subcommand("cluster", "Write a cluster manifest for a model");
    cluster->add_option("--model", model)->required();
    cluster->add_option("--method", method, "even or kmeans");
    cluster->add_option("--counts", counts, "Clusters per layer: n/d or id=count,...")->required();
    cluster->add_option("--seed", seed);
    cluster->add_option("--out", out)->required();

    auto* trim = app.add_subcommand("trim", "Remove clustered filters without changing the function");
    trim->add_option("--model", model)->required();
    trim->add_option("--clusters", clusters)->required();
    trim->add_option("--out", out)->required();
    trim->add_option("--collapse", policy, "force, require or none");
    trim->add_option("--size", size, "Input height/width for the cost report");

    auto* pm = app.add_subcommand("prune-magnitude", "Keep the largest-norm filters (destructive baseline)");
    pm->add_option("--model", model)->required();
    pm->add_option("--counts", counts, "Filters kept per layer: n/d or id=count,...")->required();
    pm->add_option("--out", out)->required();
    pm->add_option("--size", size, "Input height/width for the cost report");

    auto* verify = app.add_subcommand("verify", "Compare logits of two models on random inputs");
    verify->add_option("--original", original)->required();
    verify->add_option("--trimmed", trimmed)->required();
    verify->add_option("--samples", vopts.samples);
    verify->add_option("--tol", vopts.tolerance);
    verify->add_option("--size", size, "Input height/width");
    verify->add_option("--seed", vopts.seed);

    auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the configured network");
    gc->add_option("--config", config)->required();
    gc->add_option("--batch", batch);

    auto* metrics = app.add_subcommand("metrics", "Print chi for a cluster manifest and phi for a prune manifest");
    metrics->add_option("--model", model)->required();
    metrics->add_option("--clusters", clusters);
    metrics->add_option("--prune", prune);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (*train)
            return cmd_train(config, out);
        if (*cluster)
            return cmd_cluster(model, method, counts, seed, out);
        if (*trim)
            return cmd_trim(model, clusters, out, policy, size);
        if (*pm)
            return cmd_prune(model, counts, out, size);
        if (*verify) {
            vopts.height = vopts.width = size;
            return cmd_verify(original, trimmed, vopts);
        }
        if (*gc)
            return cmd_gradcheck(config, batch);
        if (*metrics) {
            if (clusters.empty() && prune.empty())
                throw InputError("metrics: give --clusters and/or --prune");
            return cmd_metrics(model, clusters, prune);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
