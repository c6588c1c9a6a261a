#include "csgd/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace csgd {

template <typename T>
Tensor4<T> Dataset::batch(const std::vector<std::size_t>& idx) const
{
    const std::size_t h = images.dim(1), w = images.dim(2), c = images.dim(3), stride = h * w * c;
    Tensor4<T> out({idx.size(), h, w, c});
    for (std::size_t b = 0; b < idx.size(); ++b) {
        if (idx[b] >= size())
            throw InputError("dataset index " + std::to_string(idx[b]) + " out of range");
        const float* src = images.data() + idx[b] * stride;
        std::copy(src, src + stride, out.data() + b * stride);
    }
    return out;
}

template Tensor4<float> Dataset::batch(const std::vector<std::size_t>&) const;
template Tensor4<double> Dataset::batch(const std::vector<std::size_t>&) const;

std::vector<std::int32_t> Dataset::batch_labels(const std::vector<std::size_t>& idx) const
{
    std::vector<std::int32_t> out;
    out.reserve(idx.size());
    for (std::size_t i : idx)
        out.push_back(labels.at(i));
    return out;
}

namespace {

void draw(int cls, std::size_t size, std::mt19937_64& rng, float* out)
{
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double pi = std::numbers::pi;
    const double n = double(size);
    const double phase = unit(rng) * 2 * pi;
    const double freq = 2 * pi / (3.0 + 2.0 * unit(rng));
    const double cx = n * (0.25 + 0.5 * unit(rng)), cy = n * (0.25 + 0.5 * unit(rng));
    const double radius = n * (0.12 + 0.1 * unit(rng));
    const std::size_t cell = 2 + std::size_t(unit(rng) * 2);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const double fx = double(x), fy = double(y);
            double v = 0;
            switch (cls) {
            case 0: v = 0.5 + 0.5 * std::sin(freq * fy + phase); break;
            case 1: v = 0.5 + 0.5 * std::sin(freq * fx + phase); break;
            case 2: v = 0.5 + 0.5 * std::sin(freq * (fx + fy) / std::numbers::sqrt2 + phase); break;
            case 3: v = 0.5 + 0.5 * std::sin(freq * (fx - fy) / std::numbers::sqrt2 + phase); break;
            case 4: v = std::exp(-((fx - cx) * (fx - cx) + (fy - cy) * (fy - cy)) / (2 * radius * radius)); break;
            default: v = ((x / cell + y / cell) % 2) ? 1.0 : 0.0; break;
            }
            out[y * size + x] = float(v);
        }
}

} // namespace

DatasetSplit generate_dataset(const DataConfig& cfg)
{
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::int32_t> labels(cfg.samples);
    for (std::size_t i = 0; i < cfg.samples; ++i)
        labels[i] = std::int32_t(i % cfg.classes);
    std::shuffle(labels.begin(), labels.end(), rng);

    const std::size_t px = cfg.size * cfg.size;
    Tensor4<float> images({cfg.samples, cfg.size, cfg.size, 1});
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t i = 0; i < cfg.samples; ++i) {
        float* img = images.data() + i * px;
        draw(labels[i], cfg.size, rng, img);
        for (std::size_t p = 0; p < px; ++p)
            img[p] = float(std::clamp(double(img[p]) + cfg.noise * noise(rng), 0.0, 1.0));
    }

    const std::size_t n_train = cfg.samples * 8 / 10;
    DatasetSplit out;
    auto take = [&](std::size_t begin, std::size_t end) {
        Dataset d;
        d.images = Tensor4<float>({end - begin, cfg.size, cfg.size, 1},
                                  std::vector<float>(images.data() + begin * px, images.data() + end * px));
        d.labels.assign(labels.begin() + std::ptrdiff_t(begin), labels.begin() + std::ptrdiff_t(end));
        return d;
    };
    out.train = take(0, n_train);
    out.test = take(n_train, cfg.samples);
    return out;
}

} // namespace csgd
