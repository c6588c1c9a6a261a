#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "csgd/error.hpp"

namespace csgd {

using Shape4 = std::array<std::size_t, 4>;

std::string to_string(const Shape4& shape);

/// Dense row-major 4th-order array. Feature maps are NHWC, kernels are
/// (u, v, c_in, c_out) so that a kernel reshaped to (u*v*c_in) x c_out is a
/// no-op on memory.
template <typename T>
class Tensor4 {
public:
    Tensor4() = default;
    explicit Tensor4(const Shape4& shape, T fill = T(0));
    Tensor4(const Shape4& shape, std::vector<T> data);

    const Shape4& shape() const noexcept { return shape_; }
    std::size_t dim(std::size_t i) const noexcept { return shape_[i]; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    std::size_t index(std::size_t i0, std::size_t i1, std::size_t i2, std::size_t i3) const noexcept
    {
        return ((i0 * shape_[1] + i1) * shape_[2] + i2) * shape_[3] + i3;
    }
    T& operator()(std::size_t i0, std::size_t i1, std::size_t i2, std::size_t i3) noexcept
    {
        return data_[index(i0, i1, i2, i3)];
    }
    T operator()(std::size_t i0, std::size_t i1, std::size_t i2, std::size_t i3) const noexcept
    {
        return data_[index(i0, i1, i2, i3)];
    }

    void fill(T value);
    bool all_finite() const noexcept;

    template <typename U>
    Tensor4<U> cast() const
    {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor4<U>(shape_, std::move(out));
    }

    friend bool operator==(const Tensor4& a, const Tensor4& b) = default;

private:
    Shape4 shape_{0, 0, 0, 0};
    std::vector<T> data_;
};

/// Parameters of one convolution with folded normalization and scaling:
/// out_j = (sum_k in_k * K[:,:,k,j] - mu_j) / sigma_j * gamma_j + beta_j.
template <typename T>
struct LayerParams {
    Tensor4<T> kernel; // (u, v, c_in, c_out)
    std::vector<T> mu, sigma, gamma, beta;
    std::size_t stride = 1;
    std::size_t padding = 0;

    std::size_t kernel_h() const noexcept { return kernel.dim(0); }
    std::size_t kernel_w() const noexcept { return kernel.dim(1); }
    std::size_t in_channels() const noexcept { return kernel.dim(2); }
    std::size_t out_channels() const noexcept { return kernel.dim(3); }
    /// Number of rows of the (u*v*c_in) x c_out matrix view.
    std::size_t fan_in() const noexcept { return kernel.dim(0) * kernel.dim(1) * kernel.dim(2); }

    /// Checks vector lengths and the sigma floor; throws DimensionError / InputError.
    void validate(const std::string& name) const;

    /// Identity normalization (mu = 0, sigma = gamma = 1, beta = 0) around the given kernel.
    static LayerParams identity_bn(Tensor4<T> kernel, std::size_t stride = 1, std::size_t padding = 0);

    template <typename U>
    LayerParams<U> cast() const
    {
        LayerParams<U> out;
        out.kernel = kernel.template cast<U>();
        out.mu.assign(mu.begin(), mu.end());
        out.sigma.assign(sigma.begin(), sigma.end());
        out.gamma.assign(gamma.begin(), gamma.end());
        out.beta.assign(beta.begin(), beta.end());
        out.stride = stride;
        out.padding = padding;
        return out;
    }

    friend bool operator==(const LayerParams& a, const LayerParams& b) = default;
};

inline constexpr double kSigmaFloor = 1e-5;

} // namespace csgd
