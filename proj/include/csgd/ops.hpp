#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "csgd/tensor.hpp"

namespace csgd {

/// Spatial output size of a zero-padded convolution or pooling window.
std::size_t conv_output_size(std::size_t in, std::size_t window, std::size_t stride, std::size_t padding);

/// Intermediate results kept by the forward pass so backward does not redo the convolution.
template <typename T>
struct ConvCache {
    std::vector<T> patches; // (N*oh*ow) x (u*v*c_in), row-major
    Tensor4<T> raw;         // convolution output before normalization, NHWC
};

/// Convolution with folded normalization/scaling on an NHWC batch, computed as a
/// patch-matrix product. `name` is used in dimension errors.
template <typename T>
Tensor4<T> conv_bn_forward(const Tensor4<T>& input, const LayerParams<T>& layer, ConvCache<T>* cache = nullptr,
                           std::string_view name = "conv");

template <typename T>
struct ConvGrads {
    Tensor4<T> input;
    LayerParams<T> params; // mu and sigma are zero: they are running statistics, not trained
};

template <typename T>
ConvGrads<T> conv_bn_backward(const Tensor4<T>& input, const LayerParams<T>& layer, const Tensor4<T>& grad_out,
                              const ConvCache<T>* cache = nullptr, std::string_view name = "conv");

template <typename T>
Tensor4<T> relu_forward(const Tensor4<T>& x);
/// Gradient of ReLU given its forward input.
template <typename T>
Tensor4<T> relu_backward(const Tensor4<T>& x, const Tensor4<T>& grad_out);

/// Non-overlapping average pooling (window == stride, no padding).
template <typename T>
Tensor4<T> avgpool_forward(const Tensor4<T>& x, std::size_t window);
template <typename T>
Tensor4<T> avgpool_backward(const Shape4& input_shape, const Tensor4<T>& grad_out, std::size_t window);

/// Mean over the spatial dims: (N, H, W, C) -> (N, 1, 1, C).
template <typename T>
Tensor4<T> global_avgpool(const Tensor4<T>& x);
template <typename T>
Tensor4<T> global_avgpool_backward(const Shape4& input_shape, const Tensor4<T>& grad_out);

/// Fully connected layer on (N, 1, 1, c_in) with weights (1, 1, c_in, c_out) and a bias.
template <typename T>
Tensor4<T> fc_forward(const Tensor4<T>& x, const Tensor4<T>& weights, std::span<const T> bias);

template <typename T>
struct FcGrads {
    Tensor4<T> input;
    Tensor4<T> weights;
    std::vector<T> bias;
};

template <typename T>
FcGrads<T> fc_backward(const Tensor4<T>& x, const Tensor4<T>& weights, const Tensor4<T>& grad_out);

template <typename T>
struct LossAndGrad {
    T loss;
    Tensor4<T> grad;
};

/// Mean softmax cross-entropy over the batch; logits are (N, 1, 1, classes).
template <typename T>
LossAndGrad<T> softmax_cross_entropy(const Tensor4<T>& logits, std::span<const std::int32_t> labels);

} // namespace csgd
