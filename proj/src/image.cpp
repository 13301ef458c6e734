#include "sketch3d/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

namespace sketch3d {

GrayImage to_image(const Tensor& map)
{
    if (map.rank() != 2) throw ImageError("image tensor must be [H, W], got " + shape_str(map.shape()));
    GrayImage img{map.size(1), map.size(0), {}};
    img.pixels.reserve(map.numel());
    for (double v : map.values()) {
        if (std::isnan(v)) throw ImageError("NaN pixel value");
        // nearbyint follows the default round-to-nearest-even mode
        img.pixels.push_back(static_cast<std::uint8_t>(std::nearbyint(std::clamp(v, 0.0, 1.0) * 255.0)));
    }
    return img;
}

Tensor to_tensor(const GrayImage& image)
{
    Tensor t({image.height, image.width});
    auto v = t.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = image.pixels[i] / 255.0;
    return t;
}

Tensor binarize(const GrayImage& image, double threshold)
{
    Tensor t({image.height, image.width});
    auto v = t.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = image.pixels[i] >= threshold * 255.0 ? 1.0 : 0.0;
    return t;
}

namespace {

png_image gray_header(const GrayImage& image)
{
    if (image.width == 0 || image.height == 0 || image.pixels.size() != image.width * image.height) {
        throw ImageError("malformed image buffer");
    }
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(image.width);
    png.height = static_cast<png_uint_32>(image.height);
    png.format = PNG_FORMAT_GRAY;
    return png;
}

}  // namespace

std::vector<std::uint8_t> encode_png(const GrayImage& image)
{
    auto png = gray_header(image);
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&png, nullptr, &size, 0, image.pixels.data(), 0, nullptr)) {
        throw ImageError(std::string("PNG encode failed: ") + png.message);
    }
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&png, out.data(), &size, 0, image.pixels.data(), 0, nullptr)) {
        throw ImageError(std::string("PNG encode failed: ") + png.message);
    }
    out.resize(size);
    return out;
}

GrayImage decode_png(std::span<const std::uint8_t> bytes)
{
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    if (bytes.empty() || !png_image_begin_read_from_memory(&png, bytes.data(), bytes.size())) {
        throw ImageError(std::string("not a decodable PNG: ") + (bytes.empty() ? "empty input" : png.message));
    }
    png.format = PNG_FORMAT_GRAY;
    GrayImage img{png.width, png.height, std::vector<std::uint8_t>(PNG_IMAGE_SIZE(png))};
    // composite transparency onto black, matching the stroke-on-background convention
    png_color background{0, 0, 0};
    if (!png_image_finish_read(&png, &background, img.pixels.data(), 0, nullptr)) {
        png_image_free(&png);
        throw ImageError(std::string("PNG decode failed: ") + png.message);
    }
    return img;
}

void write_png(const std::filesystem::path& path, const GrayImage& image)
{
    const auto bytes = encode_png(image);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ImageError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ImageError("failed writing " + path.string());
}

GrayImage read_png(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ImageError("cannot open " + path.string());
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_png(bytes);
}

void write_pgm(const std::filesystem::path& path, const GrayImage& image)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ImageError("cannot open " + path.string() + " for writing");
    out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
    if (!out) throw ImageError("failed writing " + path.string());
}

}  // namespace sketch3d
