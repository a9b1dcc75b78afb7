#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "ctd/tensor.hpp"

namespace ctd {

/// Grayscale raster, 8- or 16-bit. Pixel values are stored widened to
/// uint16_t regardless of depth; `bit_depth` records the on-disk format.
struct GrayImage {
    int width = 0;
    int height = 0;
    int bit_depth = 8;  // 8 or 16
    std::vector<uint16_t> pixels;  // row-major, height*width

    uint16_t max_value() const { return bit_depth == 8 ? 255 : 65535; }
};

/// Writes a grayscale PNG (color type 0). Output bytes are deterministic
/// for identical input (fixed zlib level, filter 0 rows).
void write_gray_png(const std::filesystem::path& path, const GrayImage& image);

/// Reads a grayscale PNG written by this project (or any 8/16-bit
/// grayscale PNG using scanline filters 0-4, no interlacing).
GrayImage read_gray_png(const std::filesystem::path& path);

/// [1,H,W] tensor in [0,1] from pixel values.
Tensor image_to_tensor(const GrayImage& image);
/// Quantize a [1,H,W] (or [H,W]) tensor in [0,1] to an 8-bit image.
GrayImage tensor_to_image(const Tensor& t);

}  // namespace ctd
