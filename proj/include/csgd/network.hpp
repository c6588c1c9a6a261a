#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "csgd/ops.hpp"
#include "csgd/tensor.hpp"

namespace csgd {

using LayerId = std::uint32_t;

enum class OpKind : std::uint8_t {
    Conv = 0,           // convolution with folded normalization; the only prunable kind
    FullyConnected = 1, // loss head; kernel (1, 1, c_in, classes), beta is the bias
    ReLU = 2,
    AvgPool = 3,
    GlobalAvgPool = 4,
};

enum class Combine : std::uint8_t {
    Sequential = 0,
    ResidualAdd = 1,
    DenseConcat = 2,
};

std::string to_string(OpKind kind);
std::string to_string(Combine kind);

template <typename T>
struct Layer {
    OpKind kind = OpKind::ReLU;
    LayerParams<T> params; // Conv and FullyConnected only
    std::size_t window = 0; // AvgPool only

    bool parametric() const noexcept { return kind == OpKind::Conv || kind == OpKind::FullyConnected; }

    template <typename U>
    Layer<U> cast() const
    {
        return Layer<U>{kind, params.template cast<U>(), window};
    }

    friend bool operator==(const Layer& a, const Layer& b) = default;
};

struct Edge {
    LayerId producer;
    LayerId consumer;
    Combine kind;

    friend bool operator==(const Edge& a, const Edge& b) = default;
};

/// A contiguous channel range of a feature map and the conv/fc layers whose
/// outputs are summed into it. An empty source list means the network input.
struct ChannelSegment {
    std::size_t offset;
    std::size_t width;
    std::vector<LayerId> sources;
};

/// Where a producer's output channels land in a parametric consumer's input.
struct ConsumerEntry {
    LayerId consumer;
    std::size_t offset;

    friend bool operator==(const ConsumerEntry& a, const ConsumerEntry& b) = default;
};

/// Producer conv layer -> every parametric consumer and input-channel offset.
using ConsumerMap = std::map<LayerId, std::vector<ConsumerEntry>>;

/// Layers whose outputs are added together and therefore must share one channel pattern.
struct ConstraintGroup {
    LayerId pacesetter;
    std::vector<LayerId> followers;

    std::vector<LayerId> members() const;
    friend bool operator==(const ConstraintGroup& a, const ConstraintGroup& b) = default;
};

template <typename T>
struct Activations;

/// Per-layer parameter gradients (empty LayerParams for parameterless layers).
template <typename T>
struct Gradients {
    std::vector<LayerParams<T>> layers;
    Tensor4<T> input;
};

/// Layered DAG. Layer ids are positions and are topologically ordered: every
/// edge goes from a lower id to a higher one. Layer 0 reads the network input
/// and the last layer is the fully connected loss head.
template <typename T>
class Network {
public:
    Network() = default;
    Network(std::vector<Layer<T>> layers, std::vector<Edge> edges);

    const std::vector<Layer<T>>& layers() const noexcept { return layers_; }
    const std::vector<Edge>& edges() const noexcept { return edges_; }
    std::size_t size() const noexcept { return layers_.size(); }
    const Layer<T>& layer(LayerId id) const { return layers_.at(id); }
    /// Mutable parameter access. Shape changes must be followed by revalidate().
    LayerParams<T>& params(LayerId id) { return layers_.at(id).params; }
    const LayerParams<T>& params(LayerId id) const { return layers_.at(id).params; }

    const std::vector<LayerId>& producers(LayerId id) const { return producers_.at(id); }
    const std::vector<LayerId>& consumers(LayerId id) const { return consumers_.at(id); }
    Combine combine(LayerId id) const { return combine_.at(id); }

    std::size_t input_channels() const;
    std::size_t num_classes() const;
    /// Output channel count of every layer.
    const std::vector<std::size_t>& channels() const noexcept { return channels_; }
    std::vector<LayerId> conv_layers() const;
    std::string layer_name(LayerId id) const;

    /// Re-runs structural validation after in-place parameter edits.
    void revalidate();

    Tensor4<T> forward(const Tensor4<T>& input, Activations<T>* cache = nullptr) const;
    Gradients<T> backward(const Activations<T>& cache, const Tensor4<T>& grad_logits) const;

    /// Output shape of every layer for an (n, h, w, c) input; throws on incompatible residual shapes.
    std::vector<Shape4> infer_shapes(const Shape4& input) const;

    template <typename U>
    Network<U> cast() const
    {
        std::vector<Layer<U>> out;
        out.reserve(layers_.size());
        for (const auto& l : layers_)
            out.push_back(l.template cast<U>());
        return Network<U>(std::move(out), edges_);
    }

    friend bool operator==(const Network& a, const Network& b)
    {
        return a.layers_ == b.layers_ && a.edges_ == b.edges_;
    }

private:
    void validate();
    Tensor4<T> combine_inputs(LayerId id, const Tensor4<T>& input, const std::vector<Tensor4<T>>& outputs) const;

    std::vector<Layer<T>> layers_;
    std::vector<Edge> edges_;
    std::vector<std::vector<LayerId>> producers_, consumers_;
    std::vector<Combine> combine_;
    std::vector<std::size_t> channels_;
};

template <typename T>
struct Activations {
    Tensor4<T> input;
    std::vector<Tensor4<T>> layer_inputs; // combined input of every layer
    std::vector<Tensor4<T>> outputs;
    std::vector<ConvCache<T>> conv; // indexed by layer id; empty for other kinds
};

struct ParamCounts {
    std::size_t parameters = 0; // every stored value: kernels plus mu, sigma, gamma, beta (bias for fc)
    std::size_t macs = 0;       // multiply-accumulates of conv and fc layers for one input
};

template <typename T>
ParamCounts count_cost(const Network<T>& net, std::size_t height, std::size_t width);

/// Channel segments of every layer's combined input.
template <typename T>
std::vector<std::vector<ChannelSegment>> input_segments(const Network<T>& net);

template <typename T>
ConsumerMap consumer_map(const Network<T>& net);

/// Add-connected conv layers, pacesetter = lowest id. Layers outside any add are not listed.
template <typename T>
std::vector<ConstraintGroup> constraint_groups(const Network<T>& net);

/// Moves mu/sigma toward the batch statistics of each conv layer's raw output:
/// s <- momentum * s + (1 - momentum) * batch_s.
template <typename T>
void update_running_statistics(Network<T>& net, const Activations<T>& cache, T momentum);

/// Sets mu/sigma of every conv layer to the statistics of `batch`, layer by layer.
template <typename T>
void calibrate_statistics(Network<T>& net, const Tensor4<T>& batch);

enum class Topology { Plain, Residual, Dense };

std::string to_string(Topology t);
Topology parse_topology(const std::string& s);

/// Declarative description of the three supported families.
struct NetworkSpec {
    Topology topology = Topology::Plain;
    std::size_t in_channels = 1;
    std::size_t classes = 2;
    std::size_t kernel_size = 3;
    /// Plain: width of each conv. Residual: width of each stage.
    std::vector<std::size_t> widths{8, 8, 8};
    /// Plain only: stride per conv (default all 1).
    std::vector<std::size_t> strides;
    std::size_t blocks_per_stage = 2; // Residual
    std::size_t stem_width = 8;        // Dense
    std::size_t growth = 4;            // Dense
    std::size_t dense_layers = 3;      // Dense, per stage
    std::size_t dense_stages = 2;      // Dense
    std::size_t transition_width = 0;  // Dense, 0 keeps the concatenated width
    std::uint64_t seed = 1;

    void validate() const;
};

/// Builds and He-initializes a network (gamma = sigma = 1, beta = mu = 0).
template <typename T>
Network<T> build_network(const NetworkSpec& spec);

} // namespace csgd
