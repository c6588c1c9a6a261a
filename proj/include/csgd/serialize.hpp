#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "csgd/network.hpp"

namespace csgd {

inline constexpr std::uint16_t kModelFormatVersion = 1;

/// Binary model layout, all integers and floats little-endian:
///   "CSGD" | u16 version | u32 layer count
///   per layer: u8 op kind | u32 x4 kernel dims | u32 stride | u32 padding
///              | kernel, mu, sigma, gamma, beta as f32 (dims[3] values each)
///   u32 edge count | per edge: u32 producer | u32 consumer | u8 combine kind
///   u32 CRC-32 of every preceding byte
/// Pooling layers store their window as the stride; parameterless layers have zero dims.
std::vector<std::uint8_t> encode_model(const Network<float>& net);
Network<float> decode_model(const std::vector<std::uint8_t>& bytes);

void save_model(const std::string& path, const Network<float>& net);
Network<float> load_model(const std::string& path);

} // namespace csgd
