#include "csgd/network.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

namespace csgd {

std::string to_string(OpKind kind)
{
    switch (kind) {
    case OpKind::Conv: return "conv";
    case OpKind::FullyConnected: return "fc";
    case OpKind::ReLU: return "relu";
    case OpKind::AvgPool: return "avgpool";
    case OpKind::GlobalAvgPool: return "global_avgpool";
    }
    return "unknown";
}

std::string to_string(Combine kind)
{
    switch (kind) {
    case Combine::Sequential: return "sequential";
    case Combine::ResidualAdd: return "residual-add";
    case Combine::DenseConcat: return "dense-concat";
    }
    return "unknown";
}

std::string to_string(Topology t)
{
    switch (t) {
    case Topology::Plain: return "plain";
    case Topology::Residual: return "resnet";
    case Topology::Dense: return "densenet";
    }
    return "unknown";
}

Topology parse_topology(const std::string& s)
{
    if (s == "plain")
        return Topology::Plain;
    if (s == "resnet" || s == "residual")
        return Topology::Residual;
    if (s == "densenet" || s == "dense")
        return Topology::Dense;
    throw ConfigError("network.topology: unknown topology '" + s + "' (expected plain, resnet or densenet)");
}

std::vector<LayerId> ConstraintGroup::members() const
{
    std::vector<LayerId> out{pacesetter};
    out.insert(out.end(), followers.begin(), followers.end());
    return out;
}

template <typename T>
Network<T>::Network(std::vector<Layer<T>> layers, std::vector<Edge> edges)
    : layers_(std::move(layers)), edges_(std::move(edges))
{
    validate();
}

template <typename T>
void Network<T>::revalidate()
{
    validate();
}

template <typename T>
std::string Network<T>::layer_name(LayerId id) const
{
    return "layer " + std::to_string(id) + " (" + to_string(layers_.at(id).kind) + ")";
}

template <typename T>
void Network<T>::validate()
{
    const std::size_t n = layers_.size();
    if (n < 2)
        throw StructuralError("network needs at least an input conv and a fully connected head");
    producers_.assign(n, {});
    consumers_.assign(n, {});
    combine_.assign(n, Combine::Sequential);
    std::vector<std::optional<Combine>> kinds(n);
    for (const Edge& e : edges_) {
        if (e.producer >= n || e.consumer >= n)
            throw StructuralError("edge " + std::to_string(e.producer) + "->" + std::to_string(e.consumer) +
                                  " references a missing layer");
        if (e.producer >= e.consumer)
            throw StructuralError("edge " + std::to_string(e.producer) + "->" + std::to_string(e.consumer) +
                                  " is not in topological order");
        if (kinds[e.consumer] && *kinds[e.consumer] != e.kind)
            throw StructuralError(layer_name(e.consumer) + " mixes combine kinds on its input edges");
        kinds[e.consumer] = e.kind;
        producers_[e.consumer].push_back(e.producer);
        consumers_[e.producer].push_back(e.consumer);
    }
    for (std::size_t id = 0; id < n; ++id) {
        const auto& prods = producers_[id];
        if (id == 0 && !prods.empty())
            throw StructuralError("layer 0 must read the network input");
        if (id > 0 && prods.empty())
            throw StructuralError(layer_name(LayerId(id)) + " has no producer; only layer 0 may read the input");
        if (prods.size() == 1 && *kinds[id] != Combine::Sequential)
            throw StructuralError(layer_name(LayerId(id)) + ": a single input edge must be sequential");
        if (prods.size() > 1 && *kinds[id] == Combine::Sequential)
            throw StructuralError(layer_name(LayerId(id)) + ": multiple inputs need residual-add or dense-concat");
        if (std::set<LayerId>(prods.begin(), prods.end()).size() != prods.size())
            throw StructuralError(layer_name(LayerId(id)) + " lists a producer twice");
        if (kinds[id])
            combine_[id] = *kinds[id];
        if (id + 1 < n && consumers_[id].empty())
            throw StructuralError(layer_name(LayerId(id)) + " has no consumer; the loss head must be the only sink");
    }
    if (layers_.front().kind != OpKind::Conv)
        throw StructuralError("layer 0 must be a conv layer");
    if (layers_.back().kind != OpKind::FullyConnected)
        throw StructuralError("the last layer must be the fully connected loss head");

    channels_.assign(n, 0);
    for (std::size_t id = 0; id < n; ++id) {
        const Layer<T>& layer = layers_[id];
        const std::string name = layer_name(LayerId(id));
        std::size_t in = 0;
        const auto& prods = producers_[id];
        if (prods.empty()) {
            in = layer.params.in_channels();
        } else if (combine_[id] == Combine::DenseConcat) {
            for (LayerId p : prods)
                in += channels_[p];
        } else {
            in = channels_[prods.front()];
            for (LayerId p : prods)
                if (channels_[p] != in)
                    throw DimensionError("residual-add edge " + std::to_string(p) + "->" + std::to_string(id) +
                                         ": " + std::to_string(channels_[p]) + " channels, expected " +
                                         std::to_string(in));
        }
        switch (layer.kind) {
        case OpKind::Conv:
            layer.params.validate(name);
            if (layer.params.in_channels() != in)
                throw DimensionError(name + ": kernel expects " + std::to_string(layer.params.in_channels()) +
                                     " input channels, producers deliver " + std::to_string(in));
            if (layer.params.out_channels() == 0)
                throw DimensionError(name + ": zero output channels");
            channels_[id] = layer.params.out_channels();
            break;
        case OpKind::FullyConnected:
            layer.params.validate(name);
            if (layer.params.kernel_h() != 1 || layer.params.kernel_w() != 1 || layer.params.in_channels() != in)
                throw DimensionError(name + ": weights " + to_string(layer.params.kernel.shape()) +
                                     " incompatible with " + std::to_string(in) + " inputs");
            channels_[id] = layer.params.out_channels();
            break;
        case OpKind::AvgPool:
            if (layer.window == 0)
                throw InputError(name + ": pooling window must be positive");
            channels_[id] = in;
            break;
        case OpKind::ReLU:
        case OpKind::GlobalAvgPool: channels_[id] = in; break;
        }
    }
}

template <typename T>
std::size_t Network<T>::input_channels() const
{
    return layers_.front().params.in_channels();
}

template <typename T>
std::size_t Network<T>::num_classes() const
{
    return layers_.back().params.out_channels();
}

template <typename T>
std::vector<LayerId> Network<T>::conv_layers() const
{
    std::vector<LayerId> out;
    for (std::size_t id = 0; id < layers_.size(); ++id)
        if (layers_[id].kind == OpKind::Conv)
            out.push_back(LayerId(id));
    return out;
}

template <typename T>
Tensor4<T> Network<T>::combine_inputs(LayerId id, const Tensor4<T>& input,
                                      const std::vector<Tensor4<T>>& outputs) const
{
    const auto& prods = producers_[id];
    if (prods.empty())
        return input;
    if (prods.size() == 1)
        return outputs[prods.front()];
    const Shape4 first = outputs[prods.front()].shape();
    if (combine_[id] == Combine::ResidualAdd) {
        Tensor4<T> sum = outputs[prods.front()];
        for (std::size_t i = 1; i < prods.size(); ++i) {
            const Tensor4<T>& x = outputs[prods[i]];
            if (x.shape() != first)
                throw DimensionError("residual-add edge " + std::to_string(prods[i]) + "->" + std::to_string(id) +
                                     ": shape " + to_string(x.shape()) + " != " + to_string(first));
            for (std::size_t k = 0; k < sum.size(); ++k)
                sum.data()[k] += x.data()[k];
        }
        return sum;
    }
    std::size_t total = 0;
    for (LayerId p : prods) {
        const Shape4& s = outputs[p].shape();
        if (s[0] != first[0] || s[1] != first[1] || s[2] != first[2])
            throw DimensionError("dense-concat edge " + std::to_string(p) + "->" + std::to_string(id) + ": shape " +
                                 to_string(s) + " incompatible with " + to_string(first));
        total += s[3];
    }
    Tensor4<T> out({first[0], first[1], first[2], total});
    const std::size_t pixels = first[0] * first[1] * first[2];
    std::size_t offset = 0;
    for (LayerId p : prods) {
        const Tensor4<T>& x = outputs[p];
        const std::size_t c = x.dim(3);
        for (std::size_t px = 0; px < pixels; ++px)
            std::copy_n(x.data() + px * c, c, out.data() + px * total + offset);
        offset += c;
    }
    return out;
}

template <typename T>
Tensor4<T> Network<T>::forward(const Tensor4<T>& input, Activations<T>* cache) const
{
    const std::size_t n = layers_.size();
    if (input.dim(3) != input_channels())
        throw DimensionError("network input has " + std::to_string(input.dim(3)) + " channels, expected " +
                             std::to_string(input_channels()));
    std::vector<Tensor4<T>> outputs(n);
    std::vector<Tensor4<T>> inputs(n);
    std::vector<ConvCache<T>> conv(cache ? n : 0);
    for (std::size_t id = 0; id < n; ++id) {
        const Layer<T>& layer = layers_[id];
        inputs[id] = combine_inputs(LayerId(id), input, outputs);
        const Tensor4<T>& x = inputs[id];
        switch (layer.kind) {
        case OpKind::Conv:
            outputs[id] = conv_bn_forward(x, layer.params, cache ? &conv[id] : nullptr, layer_name(LayerId(id)));
            break;
        case OpKind::FullyConnected:
            outputs[id] = fc_forward(x, layer.params.kernel, std::span<const T>(layer.params.beta));
            break;
        case OpKind::ReLU: outputs[id] = relu_forward(x); break;
        case OpKind::AvgPool: outputs[id] = avgpool_forward(x, layer.window); break;
        case OpKind::GlobalAvgPool: outputs[id] = global_avgpool(x); break;
        }
        // Layer inputs are only needed again by backward.
        if (!cache)
            inputs[id] = Tensor4<T>();
    }
    Tensor4<T> logits = outputs.back();
    if (cache) {
        cache->input = input;
        cache->layer_inputs = std::move(inputs);
        cache->outputs = std::move(outputs);
        cache->conv = std::move(conv);
    }
    return logits;
}

template <typename T>
Gradients<T> Network<T>::backward(const Activations<T>& cache, const Tensor4<T>& grad_logits) const
{
    const std::size_t n = layers_.size();
    if (cache.outputs.size() != n)
        throw DimensionError("backward: activation cache does not belong to this network");
    if (grad_logits.shape() != cache.outputs.back().shape())
        throw DimensionError("backward: grad_logits shape " + to_string(grad_logits.shape()) + " != logits shape " +
                             to_string(cache.outputs.back().shape()));
    Gradients<T> grads;
    grads.layers.resize(n);
    std::vector<Tensor4<T>> gout(n);
    gout[n - 1] = grad_logits;

    auto accumulate = [](Tensor4<T>& dst, const Tensor4<T>& src) {
        if (dst.empty()) {
            dst = src;
            return;
        }
        for (std::size_t k = 0; k < dst.size(); ++k)
            dst.data()[k] += src.data()[k];
    };

    for (std::size_t i = n; i-- > 0;) {
        const Layer<T>& layer = layers_[i];
        const Tensor4<T>& x = cache.layer_inputs[i];
        Tensor4<T> gin;
        switch (layer.kind) {
        case OpKind::Conv: {
            auto g = conv_bn_backward(x, layer.params, gout[i], &cache.conv[i], layer_name(LayerId(i)));
            gin = std::move(g.input);
            grads.layers[i] = std::move(g.params);
            break;
        }
        case OpKind::FullyConnected: {
            auto g = fc_backward(x, layer.params.kernel, gout[i]);
            gin = std::move(g.input);
            LayerParams<T>& p = grads.layers[i];
            const std::size_t c = layer.params.out_channels();
            p.kernel = std::move(g.weights);
            p.beta = std::move(g.bias);
            p.mu.assign(c, T(0));
            p.sigma.assign(c, T(0));
            p.gamma.assign(c, T(0));
            break;
        }
        case OpKind::ReLU: gin = relu_backward(x, gout[i]); break;
        case OpKind::AvgPool: gin = avgpool_backward(x.shape(), gout[i], layer.window); break;
        case OpKind::GlobalAvgPool: gin = global_avgpool_backward(x.shape(), gout[i]); break;
        }
        gout[i] = Tensor4<T>();

        const auto& prods = producers_[i];
        if (prods.empty()) {
            grads.input = std::move(gin);
        } else if (combine_[i] != Combine::DenseConcat) {
            for (LayerId p : prods)
                accumulate(gout[p], gin);
        } else {
            const Shape4& s = gin.shape();
            const std::size_t pixels = s[0] * s[1] * s[2];
            std::size_t offset = 0;
            for (LayerId p : prods) {
                const std::size_t c = channels_[p];
                Tensor4<T> part({s[0], s[1], s[2], c});
                for (std::size_t px = 0; px < pixels; ++px)
                    std::copy_n(gin.data() + px * s[3] + offset, c, part.data() + px * c);
                accumulate(gout[p], part);
                offset += c;
            }
        }
    }
    return grads;
}

template <typename T>
std::vector<Shape4> Network<T>::infer_shapes(const Shape4& input) const
{
    const std::size_t n = layers_.size();
    std::vector<Shape4> shapes(n);
    for (std::size_t id = 0; id < n; ++id) {
        const auto& prods = producers_[id];
        Shape4 in = input;
        if (!prods.empty()) {
            in = shapes[prods.front()];
            for (LayerId p : prods) {
                const Shape4& s = shapes[p];
                const bool spatial_ok = s[0] == in[0] && s[1] == in[1] && s[2] == in[2];
                if (!spatial_ok || (combine_[id] == Combine::ResidualAdd && s[3] != in[3]))
                    throw DimensionError(to_string(combine_[id]) + " edge " + std::to_string(p) + "->" +
                                         std::to_string(id) + ": shape " + to_string(s) + " incompatible with " +
                                         to_string(in));
            }
            if (combine_[id] == Combine::DenseConcat) {
                in[3] = 0;
                for (LayerId p : prods)
                    in[3] += shapes[p][3];
            }
        }
        const Layer<T>& layer = layers_[id];
        switch (layer.kind) {
        case OpKind::Conv:
            shapes[id] = {in[0], conv_output_size(in[1], layer.params.kernel_h(), layer.params.stride, layer.params.padding),
                          conv_output_size(in[2], layer.params.kernel_w(), layer.params.stride, layer.params.padding),
                          layer.params.out_channels()};
            break;
        case OpKind::FullyConnected:
            if (in[1] != 1 || in[2] != 1)
                throw DimensionError(layer_name(LayerId(id)) + ": expects pooled (N, 1, 1, C) input, got " +
                                     to_string(in));
            shapes[id] = {in[0], 1, 1, layer.params.out_channels()};
            break;
        case OpKind::AvgPool:
            shapes[id] = {in[0], conv_output_size(in[1], layer.window, layer.window, 0),
                          conv_output_size(in[2], layer.window, layer.window, 0), in[3]};
            break;
        case OpKind::GlobalAvgPool: shapes[id] = {in[0], 1, 1, in[3]}; break;
        case OpKind::ReLU: shapes[id] = in; break;
        }
    }
    return shapes;
}

template <typename T>
ParamCounts count_cost(const Network<T>& net, std::size_t height, std::size_t width)
{
    const auto shapes = net.infer_shapes({1, height, width, net.input_channels()});
    ParamCounts counts;
    for (std::size_t id = 0; id < net.size(); ++id) {
        const Layer<T>& layer = net.layer(LayerId(id));
        if (layer.kind == OpKind::Conv) {
            counts.parameters += layer.params.kernel.size() + 4 * layer.params.out_channels();
            counts.macs += shapes[id][1] * shapes[id][2] * layer.params.kernel.size();
        } else if (layer.kind == OpKind::FullyConnected) {
            counts.parameters += layer.params.kernel.size() + layer.params.out_channels();
            counts.macs += layer.params.kernel.size();
        }
    }
    return counts;
}

template <typename T>
std::vector<std::vector<ChannelSegment>> input_segments(const Network<T>& net)
{
    const std::size_t n = net.size();
    std::vector<std::vector<ChannelSegment>> in(n), out(n);
    for (std::size_t id = 0; id < n; ++id) {
        const auto& prods = net.producers(LayerId(id));
        std::vector<ChannelSegment> segs;
        if (prods.empty()) {
            segs.push_back({0, net.input_channels(), {}});
        } else if (net.combine(LayerId(id)) == Combine::DenseConcat) {
            std::size_t offset = 0;
            for (LayerId p : prods) {
                for (ChannelSegment s : out[p]) {
                    s.offset += offset;
                    segs.push_back(std::move(s));
                }
                offset += net.channels()[p];
            }
        } else {
            segs = out[prods.front()];
            for (std::size_t k = 1; k < prods.size(); ++k) {
                const auto& other = out[prods[k]];
                if (other.size() != segs.size())
                    throw StructuralError("residual-add into " + net.layer_name(LayerId(id)) +
                                          " combines differently segmented feature maps");
                for (std::size_t s = 0; s < segs.size(); ++s) {
                    if (other[s].offset != segs[s].offset || other[s].width != segs[s].width)
                        throw StructuralError("residual-add into " + net.layer_name(LayerId(id)) +
                                              " combines differently segmented feature maps");
                    segs[s].sources.insert(segs[s].sources.end(), other[s].sources.begin(), other[s].sources.end());
                }
            }
            for (auto& s : segs) {
                std::sort(s.sources.begin(), s.sources.end());
                s.sources.erase(std::unique(s.sources.begin(), s.sources.end()), s.sources.end());
            }
        }
        in[id] = segs;
        if (net.layer(LayerId(id)).parametric())
            out[id] = {ChannelSegment{0, net.channels()[id], {LayerId(id)}}};
        else
            out[id] = std::move(segs);
    }
    return in;
}

template <typename T>
ConsumerMap consumer_map(const Network<T>& net)
{
    ConsumerMap map;
    for (LayerId id : net.conv_layers())
        map[id];
    const auto segs = input_segments(net);
    for (std::size_t id = 0; id < net.size(); ++id) {
        if (!net.layer(LayerId(id)).parametric())
            continue;
        for (const ChannelSegment& s : segs[id])
            for (LayerId src : s.sources)
                map[src].push_back({LayerId(id), s.offset});
    }
    return map;
}

template <typename T>
std::vector<ConstraintGroup> constraint_groups(const Network<T>& net)
{
    const std::size_t n = net.size();
    std::vector<LayerId> parent(n);
    std::iota(parent.begin(), parent.end(), LayerId(0));
    auto find = [&](LayerId x) {
        while (parent[x] != x)
            x = parent[x] = parent[parent[x]];
        return x;
    };
    std::vector<bool> grouped(n, false);
    for (const auto& layer_segs : input_segments(net))
        for (const ChannelSegment& s : layer_segs) {
            if (s.sources.size() < 2)
                continue;
            for (LayerId src : s.sources) {
                grouped[src] = true;
                const LayerId a = find(s.sources.front()), b = find(src);
                if (a != b)
                    parent[std::max(a, b)] = std::min(a, b);
            }
        }
    std::map<LayerId, ConstraintGroup> groups;
    for (std::size_t id = 0; id < n; ++id) {
        if (!grouped[id])
            continue;
        const LayerId root = find(LayerId(id));
        auto [it, inserted] = groups.try_emplace(root, ConstraintGroup{root, {}});
        if (LayerId(id) != root)
            it->second.followers.push_back(LayerId(id));
    }
    std::vector<ConstraintGroup> out;
    for (auto& [root, g] : groups)
        out.push_back(std::move(g));
    return out;
}

namespace {

template <typename T>
void channel_moments(const Tensor4<T>& raw, std::vector<double>& mean, std::vector<double>& var)
{
    const std::size_t c = raw.dim(3);
    const std::size_t count = raw.size() / std::max<std::size_t>(c, 1);
    mean.assign(c, 0.0);
    var.assign(c, 0.0);
    for (std::size_t i = 0; i < raw.size(); ++i)
        mean[i % c] += double(raw.data()[i]);
    for (auto& m : mean)
        m /= double(count);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const double d = double(raw.data()[i]) - mean[i % c];
        var[i % c] += d * d;
    }
    for (auto& v : var)
        v /= double(count);
}

} // namespace

template <typename T>
void update_running_statistics(Network<T>& net, const Activations<T>& cache, T momentum)
{
    std::vector<double> mean, var;
    for (LayerId id : net.conv_layers()) {
        const Tensor4<T>& raw = cache.conv.at(id).raw;
        if (raw.empty())
            continue;
        channel_moments(raw, mean, var);
        LayerParams<T>& p = net.params(id);
        for (std::size_t j = 0; j < mean.size(); ++j) {
            p.mu[j] = momentum * p.mu[j] + (T(1) - momentum) * T(mean[j]);
            const T s = momentum * p.sigma[j] + (T(1) - momentum) * T(std::sqrt(var[j] + kSigmaFloor));
            p.sigma[j] = std::max(s, T(kSigmaFloor));
        }
    }
}

template <typename T>
void calibrate_statistics(Network<T>& net, const Tensor4<T>& batch)
{
    std::vector<double> mean, var;
    for (LayerId id : net.conv_layers()) {
        Activations<T> cache;
        net.forward(batch, &cache);
        channel_moments(cache.conv[id].raw, mean, var);
        LayerParams<T>& p = net.params(id);
        for (std::size_t j = 0; j < mean.size(); ++j) {
            p.mu[j] = T(mean[j]);
            p.sigma[j] = std::max(T(std::sqrt(var[j] + kSigmaFloor)), T(kSigmaFloor));
        }
    }
}

void NetworkSpec::validate() const
{
    auto positive = [](std::size_t v, const char* field) {
        if (v == 0)
            throw ConfigError(std::string(field) + ": must be positive");
    };
    positive(in_channels, "network.in_channels");
    positive(kernel_size, "network.kernel_size");
    if (classes < 2)
        throw ConfigError("network.classes: need at least 2 classes");
    switch (topology) {
    case Topology::Plain:
    case Topology::Residual:
        if (widths.empty())
            throw ConfigError("network.widths: must list at least one width");
        for (std::size_t i = 0; i < widths.size(); ++i)
            if (widths[i] == 0)
                throw ConfigError("network.widths[" + std::to_string(i) + "]: must be positive");
        if (topology == Topology::Plain && !strides.empty() && strides.size() != widths.size())
            throw ConfigError("network.strides: expected " + std::to_string(widths.size()) + " entries");
        for (std::size_t i = 0; i < strides.size(); ++i)
            if (strides[i] == 0)
                throw ConfigError("network.strides[" + std::to_string(i) + "]: must be positive");
        if (topology == Topology::Residual)
            positive(blocks_per_stage, "network.blocks_per_stage");
        break;
    case Topology::Dense:
        positive(stem_width, "network.stem_width");
        positive(growth, "network.growth");
        positive(dense_layers, "network.dense_layers");
        positive(dense_stages, "network.dense_stages");
        break;
    }
}

namespace {

template <typename T>
class Builder {
public:
    explicit Builder(std::uint64_t seed) : rng_(seed) {}

    LayerId conv(std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride)
    {
        Tensor4<T> kernel({k, k, cin, cout});
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(k * k * cin)));
        for (auto& w : kernel.storage())
            w = T(dist(rng_));
        Layer<T> l;
        l.kind = OpKind::Conv;
        l.params = LayerParams<T>::identity_bn(std::move(kernel), stride, k / 2);
        return push(std::move(l));
    }

    LayerId fc(std::size_t cin, std::size_t cout)
    {
        Tensor4<T> w({1, 1, cin, cout});
        std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / double(cin)));
        for (auto& v : w.storage())
            v = T(dist(rng_));
        Layer<T> l;
        l.kind = OpKind::FullyConnected;
        l.params = LayerParams<T>::identity_bn(std::move(w));
        return push(std::move(l));
    }

    LayerId simple(OpKind kind, std::size_t window = 0)
    {
        Layer<T> l;
        l.kind = kind;
        l.window = window;
        return push(std::move(l));
    }

    void connect(const std::vector<LayerId>& producers, LayerId consumer, Combine multi)
    {
        const Combine kind = producers.size() == 1 ? Combine::Sequential : multi;
        for (LayerId p : producers)
            edges_.push_back({p, consumer, kind});
    }

    Network<T> finish() { return Network<T>(std::move(layers_), std::move(edges_)); }

private:
    LayerId push(Layer<T> l)
    {
        layers_.push_back(std::move(l));
        return LayerId(layers_.size() - 1);
    }

    std::mt19937_64 rng_;
    std::vector<Layer<T>> layers_;
    std::vector<Edge> edges_;
};

} // namespace

template <typename T>
Network<T> build_network(const NetworkSpec& spec)
{
    spec.validate();
    Builder<T> b(spec.seed);
    const std::size_t k = spec.kernel_size;
    std::size_t width = 0;
    std::vector<LayerId> tail; // producers feeding the head

    switch (spec.topology) {
    case Topology::Plain: {
        LayerId prev = b.conv(spec.in_channels, spec.widths[0], k, spec.strides.empty() ? 1 : spec.strides[0]);
        for (std::size_t i = 1; i < spec.widths.size(); ++i) {
            const LayerId r = b.simple(OpKind::ReLU);
            b.connect({prev}, r, Combine::Sequential);
            prev = b.conv(spec.widths[i - 1], spec.widths[i], k, spec.strides.empty() ? 1 : spec.strides[i]);
            b.connect({r}, prev, Combine::Sequential);
        }
        tail = {prev};
        width = spec.widths.back();
        break;
    }
    case Topology::Residual: {
        std::vector<LayerId> stem;
        for (std::size_t s = 0; s < spec.widths.size(); ++s) {
            const std::size_t w = spec.widths[s];
            LayerId pacesetter;
            if (s == 0) {
                pacesetter = b.conv(spec.in_channels, w, k, 1);
            } else {
                const LayerId r = b.simple(OpKind::ReLU);
                b.connect(stem, r, Combine::ResidualAdd);
                pacesetter = b.conv(spec.widths[s - 1], w, k, 2);
                b.connect({r}, pacesetter, Combine::Sequential);
            }
            stem = {pacesetter};
            for (std::size_t blk = 0; blk < spec.blocks_per_stage; ++blk) {
                const LayerId r1 = b.simple(OpKind::ReLU);
                b.connect(stem, r1, Combine::ResidualAdd);
                const LayerId inner = b.conv(w, w, k, 1);
                b.connect({r1}, inner, Combine::Sequential);
                const LayerId r2 = b.simple(OpKind::ReLU);
                b.connect({inner}, r2, Combine::Sequential);
                const LayerId follower = b.conv(w, w, k, 1);
                b.connect({r2}, follower, Combine::Sequential);
                stem.push_back(follower);
            }
        }
        tail = stem;
        width = spec.widths.back();
        break;
    }
    case Topology::Dense: {
        LayerId stage_input = b.conv(spec.in_channels, spec.stem_width, k, 1);
        width = spec.stem_width;
        for (std::size_t s = 0; s < spec.dense_stages; ++s) {
            std::vector<LayerId> parts{stage_input};
            std::size_t cin = width;
            for (std::size_t l = 0; l < spec.dense_layers; ++l) {
                const LayerId r = b.simple(OpKind::ReLU);
                b.connect(parts, r, Combine::DenseConcat);
                const LayerId c = b.conv(cin, spec.growth, k, 1);
                b.connect({r}, c, Combine::Sequential);
                parts.push_back(c);
                cin += spec.growth;
            }
            if (s + 1 == spec.dense_stages) {
                tail = parts;
                width = cin;
                break;
            }
            const LayerId r = b.simple(OpKind::ReLU);
            b.connect(parts, r, Combine::DenseConcat);
            const std::size_t tw = spec.transition_width ? spec.transition_width : cin;
            const LayerId t = b.conv(cin, tw, 1, 1);
            b.connect({r}, t, Combine::Sequential);
            const LayerId pool = b.simple(OpKind::AvgPool, 2);
            b.connect({t}, pool, Combine::Sequential);
            stage_input = pool;
            width = tw;
        }
        break;
    }
    }
    const Combine tail_kind = spec.topology == Topology::Dense ? Combine::DenseConcat : Combine::ResidualAdd;
    const LayerId r = b.simple(OpKind::ReLU);
    b.connect(tail, r, tail_kind);
    const LayerId gap = b.simple(OpKind::GlobalAvgPool);
    b.connect({r}, gap, Combine::Sequential);
    const LayerId head = b.fc(width, spec.classes);
    b.connect({gap}, head, Combine::Sequential);
    return b.finish();
}

#define CSGD_INSTANTIATE_NETWORK(T)                                                                  \
    template class Network<T>;                                                                       \
    template ParamCounts count_cost(const Network<T>&, std::size_t, std::size_t);                    \
    template std::vector<std::vector<ChannelSegment>> input_segments(const Network<T>&);             \
    template ConsumerMap consumer_map(const Network<T>&);                                            \
    template std::vector<ConstraintGroup> constraint_groups(const Network<T>&);                      \
    template void update_running_statistics(Network<T>&, const Activations<T>&, T);                  \
    template void calibrate_statistics(Network<T>&, const Tensor4<T>&);                              \
    template Network<T> build_network<T>(const NetworkSpec&);

CSGD_INSTANTIATE_NETWORK(float)
CSGD_INSTANTIATE_NETWORK(double)

} // namespace csgd
