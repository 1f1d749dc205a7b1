#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dedit/tensor.hpp"

namespace dedit {

// Binary P6 PPM, maxval 255. Input is a [3,h,w] image with values in [-1,1];
// each component maps through (v+1)/2 * 255, rounded and clamped.
std::vector<std::uint8_t> encode_ppm(const TensorF& image);
void write_ppm(const std::string& path, const TensorF& image);

}  // namespace dedit
