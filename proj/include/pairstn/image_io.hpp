#pragma once

#include <string>

#include "pairstn/tensor.hpp"

namespace pairstn {

// Reads an 8-bit grayscale or RGB PNG into a (channels, h, w) tensor of
// intensities in [0, 1] (value / 255). Anything else is an IoError.
Tensor load_image(const std::string& path);

// Inverse of load_image with round-half-up quantization; channels must be 1 or 3.
void save_image(const Tensor& image, const std::string& path);

}  // namespace pairstn
