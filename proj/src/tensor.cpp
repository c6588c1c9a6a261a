#include "csgd/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace csgd {

std::string to_string(const Shape4& shape)
{
    return "(" + std::to_string(shape[0]) + ", " + std::to_string(shape[1]) + ", " + std::to_string(shape[2]) +
           ", " + std::to_string(shape[3]) + ")";
}

template <typename T>
Tensor4<T>::Tensor4(const Shape4& shape, T fill) : shape_(shape), data_(shape[0] * shape[1] * shape[2] * shape[3], fill)
{
}

template <typename T>
Tensor4<T>::Tensor4(const Shape4& shape, std::vector<T> data) : shape_(shape), data_(std::move(data))
{
    if (data_.size() != shape[0] * shape[1] * shape[2] * shape[3])
        throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                             to_string(shape));
}

template <typename T>
void Tensor4<T>::fill(T value)
{
    std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
bool Tensor4<T>::all_finite() const noexcept
{
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
void LayerParams<T>::validate(const std::string& name) const
{
    const std::size_t c = out_channels();
    auto check = [&](const std::vector<T>& v, const char* what) {
        if (v.size() != c)
            throw DimensionError(name + ": " + what + " has length " + std::to_string(v.size()) + ", expected " +
                                 std::to_string(c) + " (kernel c_out)");
    };
    check(mu, "mu");
    check(sigma, "sigma");
    check(gamma, "gamma");
    check(beta, "beta");
    for (T s : sigma)
        if (!(s >= T(kSigmaFloor)))
            throw InputError(name + ": sigma entry " + std::to_string(double(s)) + " below floor 1e-5");
    if (stride == 0)
        throw InputError(name + ": stride must be positive");
}

template <typename T>
LayerParams<T> LayerParams<T>::identity_bn(Tensor4<T> kernel, std::size_t stride, std::size_t padding)
{
    LayerParams p;
    const std::size_t c = kernel.dim(3);
    p.kernel = std::move(kernel);
    p.mu.assign(c, T(0));
    p.sigma.assign(c, T(1));
    p.gamma.assign(c, T(1));
    p.beta.assign(c, T(0));
    p.stride = stride;
    p.padding = padding;
    return p;
}

template class Tensor4<float>;
template class Tensor4<double>;
template struct LayerParams<float>;
template struct LayerParams<double>;

} // namespace csgd
