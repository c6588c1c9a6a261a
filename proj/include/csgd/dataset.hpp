#pragma once

#include <cstdint>
#include <vector>

#include "csgd/config.hpp"
#include "csgd/tensor.hpp"

namespace csgd {

struct Dataset {
    Tensor4<float> images; // (n, size, size, 1), values in [0, 1]
    std::vector<std::int32_t> labels;

    std::size_t size() const noexcept { return labels.size(); }
    /// Rows `idx` as a batch, converted to T.
    template <typename T>
    Tensor4<T> batch(const std::vector<std::size_t>& idx) const;
    std::vector<std::int32_t> batch_labels(const std::vector<std::size_t>& idx) const;
};

struct DatasetSplit {
    Dataset train, test;
};

/// Procedural image classes: horizontal bars, vertical bars, diagonal bars,
/// anti-diagonal bars, a gaussian blob and a checkerboard, each with random
/// phase / frequency / position plus additive noise, clipped to [0, 1].
/// Labels cycle through the classes and are then shuffled, so each class holds
/// samples / classes samples up to one; the first 80% (rounded down) form the
/// training split.
DatasetSplit generate_dataset(const DataConfig& cfg);

} // namespace csgd
