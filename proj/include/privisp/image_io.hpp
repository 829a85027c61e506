#pragma once

#include <cstdint>
#include <filesystem>

#include "privisp/tensor.hpp"

// 8-bit image files. Codec values v map to v/255 and back by rounding.
namespace privisp::io {

/// Reads a PNG or JPEG (chosen by extension) as a [1,3,H,W] tensor in [0,1].
/// Grayscale and alpha inputs are converted to RGB.
Tensor read_image(const std::filesystem::path& path);

/// Writes [1,3,H,W] (or [3,H,W]) as 8-bit RGB; format from the extension.
void write_image(const Tensor& img, const std::filesystem::path& path, int jpeg_quality = 95);

/// 1-bit grayscale PNG of a binary mask [H,W] or [1,1,H,W]; non-zero -> 1.
void write_mask(const Tensor& mask, const std::filesystem::path& path);
/// Returns [1,1,H,W] with values in {0,1}.
Tensor read_mask(const std::filesystem::path& path);

std::uint8_t to_byte(double v);

}  // namespace privisp::io
