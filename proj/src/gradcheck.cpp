#include "csgd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace csgd {

template <typename T>
Gradients<T> loss_gradients(const Network<T>& net, const Tensor4<T>& input, const std::vector<std::int32_t>& labels)
{
    Activations<T> cache;
    const Tensor4<T> logits = net.forward(input, &cache);
    const LossAndGrad<T> lg = softmax_cross_entropy(logits, labels);
    return net.backward(cache, lg.grad);
}

std::string GradCheckReport::summary() const
{
    std::ostringstream out;
    out.precision(3);
    if (passed()) {
        out << "gradients ok: " << checked << " entries checked, " << skipped << " skipped at ReLU kinks, max rel error "
            << max_rel_error;
        return out.str();
    }
    const auto worst = std::max_element(failures.begin(), failures.end(),
                                        [](const auto& a, const auto& b) { return a.rel_error < b.rel_error; });
    out << "gradient mismatch in " << worst->layer_name << " " << worst->component << "[" << worst->index
        << "]: analytic " << worst->analytic << " vs numeric " << worst->numeric << " (rel error " << worst->rel_error
        << ", " << failures.size() << " of " << checked << " entries fail)";
    return out.str();
}

namespace {

struct Probe {
    const Network<double>* net;
    const Tensor4<double>* input;
    const std::vector<std::int32_t>* labels;

    double loss(std::vector<std::vector<bool>>* masks) const
    {
        Activations<double> cache;
        const Tensor4<double> logits = net->forward(*input, &cache);
        if (masks) {
            masks->assign(net->size(), {});
            for (std::size_t id = 0; id < net->size(); ++id)
                if (net->layer(LayerId(id)).kind == OpKind::ReLU) {
                    const auto& x = cache.layer_inputs[id];
                    auto& m = (*masks)[id];
                    m.resize(x.size());
                    for (std::size_t i = 0; i < x.size(); ++i)
                        m[i] = x.data()[i] > 0;
                }
        }
        return double(softmax_cross_entropy(logits, *labels).loss);
    }
};

std::vector<std::size_t> pick_indices(std::size_t size, std::size_t limit)
{
    std::vector<std::size_t> out;
    if (limit == 0 || size <= limit) {
        for (std::size_t i = 0; i < size; ++i)
            out.push_back(i);
    } else {
        for (std::size_t k = 0; k < limit; ++k)
            out.push_back(k * size / limit);
    }
    return out;
}

} // namespace

template <typename T>
GradCheckReport grad_check(const Network<T>& net, const Tensor4<T>& input, const std::vector<std::int32_t>& labels,
                           const GradCheckOptions& options, GradientFn<T> analytic)
{
    const Gradients<T> grads = analytic ? analytic(net, input, labels) : loss_gradients(net, input, labels);
    if (grads.layers.size() != net.size())
        throw DimensionError("grad_check: gradient list has " + std::to_string(grads.layers.size()) +
                             " layers, network has " + std::to_string(net.size()));
    Network<double> work = net.template cast<double>();
    const Tensor4<double> x = input.template cast<double>();
    Probe probe{&work, &x, &labels};
    std::vector<std::vector<bool>> base, plus, minus;
    probe.loss(&base);

    GradCheckReport report;
    for (std::size_t id = 0; id < net.size(); ++id) {
        const Layer<T>& layer = net.layer(LayerId(id));
        if (!layer.parametric())
            continue;
        const LayerParams<T>& g = grads.layers[id];
        LayerParams<double>& p = work.params(LayerId(id));
        struct Component {
            const char* name;
            std::vector<double>* values;
            const std::vector<T>* grad;
        };
        std::vector<Component> comps{{"kernel", &p.kernel.storage(), &g.kernel.storage()}};
        if (layer.kind == OpKind::Conv)
            comps.push_back({"gamma", &p.gamma, &g.gamma});
        comps.push_back({"beta", &p.beta, &g.beta});
        for (const Component& c : comps) {
            if (c.grad->size() != c.values->size())
                throw DimensionError("grad_check: " + net.layer_name(LayerId(id)) + " " + c.name + " gradient has " +
                                     std::to_string(c.grad->size()) + " entries, expected " +
                                     std::to_string(c.values->size()));
            for (std::size_t i : pick_indices(c.values->size(), options.max_per_tensor)) {
                double& v = (*c.values)[i];
                const double saved = v;
                double h = options.step;
                bool ok = false;
                double numeric = 0;
                for (int attempt = 0; attempt <= options.retries && !ok; ++attempt, h /= 10) {
                    v = saved + h;
                    const double lp = probe.loss(&plus);
                    v = saved - h;
                    const double lm = probe.loss(&minus);
                    v = saved;
                    if (plus == base && minus == base) {
                        numeric = (lp - lm) / (2 * h);
                        ok = true;
                    }
                }
                if (!ok) {
                    ++report.skipped;
                    continue;
                }
                const double a = double((*c.grad)[i]);
                const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), options.floor});
                ++report.checked;
                report.max_rel_error = std::max(report.max_rel_error, rel);
                if (!(rel <= options.tolerance))
                    report.failures.push_back({LayerId(id), net.layer_name(LayerId(id)), c.name, i, a, numeric, rel});
            }
        }
    }
    return report;
}

#define CSGD_INSTANTIATE_GRADCHECK(T)                                                                          \
    template Gradients<T> loss_gradients(const Network<T>&, const Tensor4<T>&, const std::vector<std::int32_t>&); \
    template GradCheckReport grad_check(const Network<T>&, const Tensor4<T>&, const std::vector<std::int32_t>&,  \
                                        const GradCheckOptions&, GradientFn<T>);

CSGD_INSTANTIATE_GRADCHECK(float)
CSGD_INSTANTIATE_GRADCHECK(double)

} // namespace csgd
