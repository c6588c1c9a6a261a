#include "csgd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include <Eigen/Core>

namespace csgd {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeometry {
    std::size_t n, h, w, cin, oh, ow, u, v, cout, stride, pad;
    std::size_t rows() const { return n * oh * ow; }
    std::size_t cols() const { return u * v * cin; }
};

template <typename T>
ConvGeometry geometry(const Tensor4<T>& input, const LayerParams<T>& layer, std::string_view name)
{
    const auto& s = input.shape();
    if (s[3] != layer.in_channels())
        throw DimensionError(std::string(name) + ": input has " + std::to_string(s[3]) + " channels, kernel expects " +
                             std::to_string(layer.in_channels()));
    if (layer.stride == 0)
        throw InputError(std::string(name) + ": stride must be positive");
    if (s[1] + 2 * layer.padding < layer.kernel_h() || s[2] + 2 * layer.padding < layer.kernel_w())
        throw DimensionError(std::string(name) + ": spatial input " + std::to_string(s[1]) + "x" + std::to_string(s[2]) +
                             " smaller than kernel " + std::to_string(layer.kernel_h()) + "x" +
                             std::to_string(layer.kernel_w()));
    ConvGeometry g{};
    g.n = s[0];
    g.h = s[1];
    g.w = s[2];
    g.cin = s[3];
    g.u = layer.kernel_h();
    g.v = layer.kernel_w();
    g.cout = layer.out_channels();
    g.stride = layer.stride;
    g.pad = layer.padding;
    g.oh = conv_output_size(g.h, g.u, g.stride, g.pad);
    g.ow = conv_output_size(g.w, g.v, g.stride, g.pad);
    return g;
}

template <typename T>
std::vector<T> im2col(const Tensor4<T>& input, const ConvGeometry& g)
{
    std::vector<T> patches(g.rows() * g.cols(), T(0));
    const T* src = input.data();
    T* dst = patches.data();
    for (std::size_t n = 0; n < g.n; ++n)
        for (std::size_t oy = 0; oy < g.oh; ++oy)
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
                for (std::size_t a = 0; a < g.u; ++a) {
                    const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + a) - static_cast<std::ptrdiff_t>(g.pad);
                    for (std::size_t b = 0; b < g.v; ++b, dst += g.cin) {
                        const auto x =
                            static_cast<std::ptrdiff_t>(ox * g.stride + b) - static_cast<std::ptrdiff_t>(g.pad);
                        if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(g.h) ||
                            x >= static_cast<std::ptrdiff_t>(g.w))
                            continue;
                        std::memcpy(dst, src + ((n * g.h + std::size_t(y)) * g.w + std::size_t(x)) * g.cin,
                                    g.cin * sizeof(T));
                    }
                }
            }
    return patches;
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, Tensor4<T>& grad_input)
{
    T* dst = grad_input.data();
    for (std::size_t n = 0; n < g.n; ++n)
        for (std::size_t oy = 0; oy < g.oh; ++oy)
            for (std::size_t ox = 0; ox < g.ow; ++ox)
                for (std::size_t a = 0; a < g.u; ++a) {
                    const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + a) - static_cast<std::ptrdiff_t>(g.pad);
                    for (std::size_t b = 0; b < g.v; ++b, cols += g.cin) {
                        const auto x =
                            static_cast<std::ptrdiff_t>(ox * g.stride + b) - static_cast<std::ptrdiff_t>(g.pad);
                        if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(g.h) ||
                            x >= static_cast<std::ptrdiff_t>(g.w))
                            continue;
                        T* d = dst + ((n * g.h + std::size_t(y)) * g.w + std::size_t(x)) * g.cin;
                        for (std::size_t k = 0; k < g.cin; ++k)
                            d[k] += cols[k];
                    }
                }
}

} // namespace

std::size_t conv_output_size(std::size_t in, std::size_t window, std::size_t stride, std::size_t padding)
{
    if (in + 2 * padding < window || stride == 0)
        throw DimensionError("window " + std::to_string(window) + " does not fit input " + std::to_string(in) +
                             " with padding " + std::to_string(padding));
    return (in + 2 * padding - window) / stride + 1;
}

template <typename T>
Tensor4<T> conv_bn_forward(const Tensor4<T>& input, const LayerParams<T>& layer, ConvCache<T>* cache,
                           std::string_view name)
{
    const ConvGeometry g = geometry(input, layer, name);
    std::vector<T> patches = im2col(input, g);
    Tensor4<T> raw({g.n, g.oh, g.ow, g.cout});
    {
        Eigen::Map<const RowMat<T>> p(patches.data(), Eigen::Index(g.rows()), Eigen::Index(g.cols()));
        Eigen::Map<const RowMat<T>> w(layer.kernel.data(), Eigen::Index(g.cols()), Eigen::Index(g.cout));
        Eigen::Map<RowMat<T>> y(raw.data(), Eigen::Index(g.rows()), Eigen::Index(g.cout));
        y.noalias() = p * w;
    }
    Tensor4<T> out(raw.shape());
    const T* r = raw.data();
    T* o = out.data();
    for (std::size_t row = 0; row < g.rows(); ++row)
        for (std::size_t j = 0; j < g.cout; ++j, ++r, ++o)
            *o = (*r - layer.mu[j]) / layer.sigma[j] * layer.gamma[j] + layer.beta[j];
    if (cache) {
        cache->patches = std::move(patches);
        cache->raw = std::move(raw);
    }
    return out;
}

template <typename T>
ConvGrads<T> conv_bn_backward(const Tensor4<T>& input, const LayerParams<T>& layer, const Tensor4<T>& grad_out,
                              const ConvCache<T>* cache, std::string_view name)
{
    const ConvGeometry g = geometry(input, layer, name);
    const Shape4 expected{g.n, g.oh, g.ow, g.cout};
    if (grad_out.shape() != expected)
        throw DimensionError(std::string(name) + ": grad_out shape " + to_string(grad_out.shape()) +
                             " does not match forward output " + to_string(expected));

    ConvCache<T> local;
    if (!cache) {
        conv_bn_forward(input, layer, &local, name);
        cache = &local;
    }

    ConvGrads<T> grads;
    grads.params.stride = layer.stride;
    grads.params.padding = layer.padding;
    grads.params.mu.assign(g.cout, T(0));
    grads.params.sigma.assign(g.cout, T(0));
    grads.params.gamma.assign(g.cout, T(0));
    grads.params.beta.assign(g.cout, T(0));

    // Gradient with respect to the raw convolution output.
    std::vector<T> graw(grad_out.size());
    std::vector<T> scale(g.cout);
    for (std::size_t j = 0; j < g.cout; ++j)
        scale[j] = layer.gamma[j] / layer.sigma[j];
    const T* go = grad_out.data();
    const T* r = cache->raw.data();
    for (std::size_t row = 0, i = 0; row < g.rows(); ++row)
        for (std::size_t j = 0; j < g.cout; ++j, ++i) {
            grads.params.beta[j] += go[i];
            grads.params.gamma[j] += go[i] * (r[i] - layer.mu[j]) / layer.sigma[j];
            graw[i] = go[i] * scale[j];
        }

    grads.params.kernel = Tensor4<T>(layer.kernel.shape());
    Eigen::Map<const RowMat<T>> p(cache->patches.data(), Eigen::Index(g.rows()), Eigen::Index(g.cols()));
    Eigen::Map<const RowMat<T>> w(layer.kernel.data(), Eigen::Index(g.cols()), Eigen::Index(g.cout));
    Eigen::Map<const RowMat<T>> dy(graw.data(), Eigen::Index(g.rows()), Eigen::Index(g.cout));
    Eigen::Map<RowMat<T>> dw(grads.params.kernel.data(), Eigen::Index(g.cols()), Eigen::Index(g.cout));
    dw.noalias() = p.transpose() * dy;

    RowMat<T> dcols = dy * w.transpose();
    grads.input = Tensor4<T>(input.shape());
    col2im_add(dcols.data(), g, grads.input);
    return grads;
}

template <typename T>
Tensor4<T> relu_forward(const Tensor4<T>& x)
{
    Tensor4<T> out(x.shape());
    const T* in = x.data();
    T* o = out.data();
    for (std::size_t i = 0; i < x.size(); ++i)
        o[i] = in[i] > T(0) ? in[i] : T(0);
    return out;
}

template <typename T>
Tensor4<T> relu_backward(const Tensor4<T>& x, const Tensor4<T>& grad_out)
{
    if (x.shape() != grad_out.shape())
        throw DimensionError("relu: grad_out shape " + to_string(grad_out.shape()) + " != input shape " +
                             to_string(x.shape()));
    Tensor4<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i)
        out.data()[i] = x.data()[i] > T(0) ? grad_out.data()[i] : T(0);
    return out;
}

template <typename T>
Tensor4<T> avgpool_forward(const Tensor4<T>& x, std::size_t window)
{
    if (window == 0)
        throw InputError("avgpool: window must be positive");
    const auto& s = x.shape();
    const std::size_t oh = conv_output_size(s[1], window, window, 0);
    const std::size_t ow = conv_output_size(s[2], window, window, 0);
    Tensor4<T> out({s[0], oh, ow, s[3]});
    const T inv = T(1) / T(window * window);
    for (std::size_t n = 0; n < s[0]; ++n)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox)
                for (std::size_t c = 0; c < s[3]; ++c) {
                    T acc = 0;
                    for (std::size_t a = 0; a < window; ++a)
                        for (std::size_t b = 0; b < window; ++b)
                            acc += x(n, oy * window + a, ox * window + b, c);
                    out(n, oy, ox, c) = acc * inv;
                }
    return out;
}

template <typename T>
Tensor4<T> avgpool_backward(const Shape4& input_shape, const Tensor4<T>& grad_out, std::size_t window)
{
    if (window == 0)
        throw InputError("avgpool: window must be positive");
    const std::size_t oh = conv_output_size(input_shape[1], window, window, 0);
    const std::size_t ow = conv_output_size(input_shape[2], window, window, 0);
    const Shape4 expected{input_shape[0], oh, ow, input_shape[3]};
    if (grad_out.shape() != expected)
        throw DimensionError("avgpool: grad_out shape " + to_string(grad_out.shape()) + " != " + to_string(expected));
    Tensor4<T> grad(input_shape);
    const T inv = T(1) / T(window * window);
    for (std::size_t n = 0; n < expected[0]; ++n)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox)
                for (std::size_t c = 0; c < expected[3]; ++c) {
                    const T g = grad_out(n, oy, ox, c) * inv;
                    for (std::size_t a = 0; a < window; ++a)
                        for (std::size_t b = 0; b < window; ++b)
                            grad(n, oy * window + a, ox * window + b, c) = g;
                }
    return grad;
}

template <typename T>
Tensor4<T> global_avgpool(const Tensor4<T>& x)
{
    const auto& s = x.shape();
    Tensor4<T> out({s[0], 1, 1, s[3]});
    const std::size_t hw = s[1] * s[2];
    if (hw == 0)
        throw DimensionError("global_avgpool: empty spatial extent");
    for (std::size_t n = 0; n < s[0]; ++n) {
        const T* src = x.data() + n * hw * s[3];
        T* dst = out.data() + n * s[3];
        for (std::size_t p = 0; p < hw; ++p)
            for (std::size_t c = 0; c < s[3]; ++c)
                dst[c] += src[p * s[3] + c];
        for (std::size_t c = 0; c < s[3]; ++c)
            dst[c] /= T(hw);
    }
    return out;
}

template <typename T>
Tensor4<T> global_avgpool_backward(const Shape4& input_shape, const Tensor4<T>& grad_out)
{
    const Shape4 expected{input_shape[0], 1, 1, input_shape[3]};
    if (grad_out.shape() != expected)
        throw DimensionError("global_avgpool: grad_out shape " + to_string(grad_out.shape()) + " != " +
                             to_string(expected));
    Tensor4<T> grad(input_shape);
    const std::size_t hw = input_shape[1] * input_shape[2];
    const std::size_t c = input_shape[3];
    for (std::size_t n = 0; n < input_shape[0]; ++n)
        for (std::size_t p = 0; p < hw; ++p)
            for (std::size_t k = 0; k < c; ++k)
                grad.data()[(n * hw + p) * c + k] = grad_out.data()[n * c + k] / T(hw);
    return grad;
}

template <typename T>
Tensor4<T> fc_forward(const Tensor4<T>& x, const Tensor4<T>& weights, std::span<const T> bias)
{
    const auto& s = x.shape();
    const std::size_t cin = weights.dim(2), cout = weights.dim(3);
    if (s[1] != 1 || s[2] != 1 || s[3] != cin || weights.dim(0) != 1 || weights.dim(1) != 1)
        throw DimensionError("fc: input " + to_string(s) + " incompatible with weights " + to_string(weights.shape()));
    if (bias.size() != cout)
        throw DimensionError("fc: bias length " + std::to_string(bias.size()) + " != " + std::to_string(cout));
    Tensor4<T> out({s[0], 1, 1, cout});
    Eigen::Map<const RowMat<T>> xm(x.data(), Eigen::Index(s[0]), Eigen::Index(cin));
    Eigen::Map<const RowMat<T>> wm(weights.data(), Eigen::Index(cin), Eigen::Index(cout));
    Eigen::Map<RowMat<T>> ym(out.data(), Eigen::Index(s[0]), Eigen::Index(cout));
    ym.noalias() = xm * wm;
    for (std::size_t n = 0; n < s[0]; ++n)
        for (std::size_t j = 0; j < cout; ++j)
            out.data()[n * cout + j] += bias[j];
    return out;
}

template <typename T>
FcGrads<T> fc_backward(const Tensor4<T>& x, const Tensor4<T>& weights, const Tensor4<T>& grad_out)
{
    const auto& s = x.shape();
    const std::size_t cin = weights.dim(2), cout = weights.dim(3);
    if (s[1] != 1 || s[2] != 1 || s[3] != cin)
        throw DimensionError("fc: input " + to_string(s) + " incompatible with weights " + to_string(weights.shape()));
    const Shape4 expected{s[0], 1, 1, cout};
    if (grad_out.shape() != expected)
        throw DimensionError("fc: grad_out shape " + to_string(grad_out.shape()) + " != " + to_string(expected));
    FcGrads<T> g;
    g.input = Tensor4<T>(s);
    g.weights = Tensor4<T>(weights.shape());
    g.bias.assign(cout, T(0));
    Eigen::Map<const RowMat<T>> xm(x.data(), Eigen::Index(s[0]), Eigen::Index(cin));
    Eigen::Map<const RowMat<T>> wm(weights.data(), Eigen::Index(cin), Eigen::Index(cout));
    Eigen::Map<const RowMat<T>> gy(grad_out.data(), Eigen::Index(s[0]), Eigen::Index(cout));
    Eigen::Map<RowMat<T>>(g.weights.data(), Eigen::Index(cin), Eigen::Index(cout)).noalias() = xm.transpose() * gy;
    Eigen::Map<RowMat<T>>(g.input.data(), Eigen::Index(s[0]), Eigen::Index(cin)).noalias() = gy * wm.transpose();
    for (std::size_t n = 0; n < s[0]; ++n)
        for (std::size_t j = 0; j < cout; ++j)
            g.bias[j] += grad_out.data()[n * cout + j];
    return g;
}

template <typename T>
LossAndGrad<T> softmax_cross_entropy(const Tensor4<T>& logits, std::span<const std::int32_t> labels)
{
    const auto& s = logits.shape();
    if (s[1] != 1 || s[2] != 1)
        throw DimensionError("softmax_cross_entropy: logits must be (N, 1, 1, C), got " + to_string(s));
    if (labels.size() != s[0])
        throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                             std::to_string(s[0]));
    const std::size_t n = s[0], c = s[3];
    LossAndGrad<T> result{T(0), Tensor4<T>(s)};
    if (n == 0)
        return result;
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const std::int32_t label = labels[i];
        if (label < 0 || std::size_t(label) >= c)
            throw InputError("softmax_cross_entropy: label " + std::to_string(label) + " outside [0, " +
                             std::to_string(c) + ")");
        const T* z = logits.data() + i * c;
        T* g = result.grad.data() + i * c;
        const T zmax = *std::max_element(z, z + c);
        T sum = 0;
        for (std::size_t j = 0; j < c; ++j) {
            g[j] = std::exp(z[j] - zmax);
            sum += g[j];
        }
        total += double(std::log(sum) + zmax - z[label]);
        for (std::size_t j = 0; j < c; ++j)
            g[j] = g[j] / sum / T(n);
        g[label] -= T(1) / T(n);
    }
    result.loss = T(total / double(n));
    return result;
}

#define CSGD_INSTANTIATE_OPS(T)                                                                                   \
    template Tensor4<T> conv_bn_forward(const Tensor4<T>&, const LayerParams<T>&, ConvCache<T>*, std::string_view); \
    template ConvGrads<T> conv_bn_backward(const Tensor4<T>&, const LayerParams<T>&, const Tensor4<T>&,           \
                                           const ConvCache<T>*, std::string_view);                                \
    template Tensor4<T> relu_forward(const Tensor4<T>&);                                                          \
    template Tensor4<T> relu_backward(const Tensor4<T>&, const Tensor4<T>&);                                      \
    template Tensor4<T> avgpool_forward(const Tensor4<T>&, std::size_t);                                          \
    template Tensor4<T> avgpool_backward(const Shape4&, const Tensor4<T>&, std::size_t);                          \
    template Tensor4<T> global_avgpool(const Tensor4<T>&);                                                        \
    template Tensor4<T> global_avgpool_backward(const Shape4&, const Tensor4<T>&);                                \
    template Tensor4<T> fc_forward(const Tensor4<T>&, const Tensor4<T>&, std::span<const T>);                     \
    template FcGrads<T> fc_backward(const Tensor4<T>&, const Tensor4<T>&, const Tensor4<T>&);                     \
    template LossAndGrad<T> softmax_cross_entropy(const Tensor4<T>&, std::span<const std::int32_t>);

CSGD_INSTANTIATE_OPS(float)
CSGD_INSTANTIATE_OPS(double)

} // namespace csgd
