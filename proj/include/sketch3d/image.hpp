#pragma once

#include "sketch3d/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

namespace sketch3d {

class ImageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// 8-bit grayscale raster, row-major, row 0 at the top.
struct GrayImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;

    std::uint8_t at(std::size_t row, std::size_t col) const { return pixels[row * width + col]; }
};

// [H, W] values in [0, 1] -> 0..255, rounding half to even. Values outside [0, 1] are clamped.
GrayImage to_image(const Tensor& map);
// 0..255 -> [H, W] values in [0, 1].
Tensor to_tensor(const GrayImage& image);
// Pixels >= threshold * 255 become 1, others 0.
Tensor binarize(const GrayImage& image, double threshold = 0.5);

std::vector<std::uint8_t> encode_png(const GrayImage& image);
// Accepts any PNG colour type; colour images are converted to gray.
GrayImage decode_png(std::span<const std::uint8_t> bytes);

void write_png(const std::filesystem::path& path, const GrayImage& image);
GrayImage read_png(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const GrayImage& image);

}  // namespace sketch3d
