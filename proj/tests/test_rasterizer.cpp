#include <doctest.h>

#include "gradcheck.hpp"
#include "raster_oracles.hpp"
#include "sketch3d/image.hpp"
#include "sketch3d/rasterizer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

using namespace sketch3d;
using namespace sketch3d::testing;

namespace {

const std::vector<Face> kOneFace = {{0, 1, 2}};

Tensor triangle(double x0, double y0, double x1, double y1, double x2, double y2)
{
    return Tensor({3, 2}, {x0, y0, x1, y1, x2, y2});
}

double pixel(const Tensor& img, std::size_t r, std::size_t c) { return img[r * img.size(1) + c]; }

}  // namespace

TEST_CASE("pixel centres")
{
    CHECK(pixel_center_x(0, 4) == -0.75);
    CHECK(pixel_center_x(3, 4) == 0.75);
    CHECK(pixel_center_y(0, 4) == 0.75);
    CHECK(pixel_center_y(3, 4) == -0.75);
}

TEST_CASE("soft rasterizer point values")
{
    const std::size_t n = 32;
    // edge y = centre of row 16 passes through pixel centres
    const double y = pixel_center_y(16, n);
    const auto tri = triangle(-0.8, y, 0.8, y, 0.0, 0.9);
    const auto s = soft_rasterize(tri, kOneFace, n, 1e-5);

    CHECK(pixel(s, 16, 16) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(pixel(s, 10, 16) == doctest::Approx(1.0).epsilon(1e-12));  // near the centroid
    CHECK(pixel(s, 28, 16) < 1e-12);
    CHECK(pixel(s, 2, 2) == 0.0);

    CHECK_THROWS_AS(soft_rasterize(tri, kOneFace, n, 0.0), RasterError);
    CHECK_THROWS_AS(soft_rasterize(tri, kOneFace, n, -1.0), RasterError);
    CHECK_THROWS_AS(soft_rasterize(tri, {{0, 1, 3}}, n, 1e-4), GeometryError);
}

TEST_CASE("soft rasterizer properties")
{
    const std::size_t n = 32;
    const auto tri = triangle(-0.5, -0.4, 0.6, -0.3, 0.1, 0.7);

    // strictly inside (0, 1) while the whole frame is within the influence margin
    const auto s = soft_rasterize(tri, kOneFace, n, 1e-1);
    for (double v : s.values()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
    // monotone in sigma at an inside pixel
    double prev = 0.0;
    for (double sigma : {1e-1, 3e-2, 1e-2, 3e-3}) {
        const double v = pixel(soft_rasterize(tri, kOneFace, n, sigma), 18, 16);
        CHECK(v > prev);
        prev = v;
    }

    // order of faces does not matter
    std::mt19937_64 rng(21);
    auto blob = random_blob(rng, 1);
    const auto ndc = project(view_transform(blob, CameraPose{15, 40}).vertices);
    auto reversed = blob.faces;
    std::reverse(reversed.begin(), reversed.end());
    for (auto& f : reversed) std::rotate(f.begin(), f.begin() + 1, f.end());
    const auto a = soft_rasterize(ndc, blob.faces, n, 1e-3);
    const auto b = soft_rasterize(ndc, reversed, n, 1e-3);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));

    // a one-pixel shift in NDC shifts the image by one column
    Tensor shifted = ndc.detach();
    for (std::size_t i = 0; i < shifted.size(0); ++i) shifted.mutable_values()[2 * i] += 2.0 / n;
    const auto c = soft_rasterize(shifted, blob.faces, n, 1e-4);
    const auto d = soft_rasterize(ndc, blob.faces, n, 1e-4);
    double worst = 0.0;
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t col = 1; col < n; ++col) worst = std::max(worst, std::abs(pixel(c, r, col) - pixel(d, r, col - 1)));
    CHECK(worst < 0.02);
}

TEST_CASE("soft rasterizer gradients match finite differences")
{
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::mt19937_64 rng(seed);
        auto blob = random_blob(rng, 0);
        REQUIRE(blob.face_count() == 20);
        const auto pose = random_pose(rng);
        const auto f = [&](const std::vector<Tensor>& in) {
            return sum(soft_render(Mesh{in[0], blob.faces}, pose, 32, 1e-2));
        };
        CHECK(gradcheck(f, {blob.vertices}) < 1e-3);
    }
    // pose embedding gradients flow through the renderer too
    std::mt19937_64 rng(99);
    auto blob = random_blob(rng, 0);
    Tensor emb = pose_embedding(CameraPose{20, 75});
    emb.set_requires_grad(true);
    const auto f = [&](const std::vector<Tensor>& in) { return sum(soft_render(blob, in[0], 32, 1e-2)); };
    CHECK(gradcheck(f, {emb}) < 1e-3);
}

TEST_CASE("soft render rejects geometry behind the camera")
{
    Mesh m = icosphere(0);
    m.vertices = mul_scalar(m.vertices, 5.0);
    CHECK_THROWS_AS(soft_render(m, CameraPose{0, 0}, 16), GeometryError);
}

TEST_CASE("hard rasterizer")
{
    const std::size_t n = 64;
    const auto disc = hard_render(icosphere(3), CameraPose{0, 0}, n);
    double filled = 0.0;
    for (double v : disc.values()) {
        CHECK((v == 0.0 || v == 1.0));
        filled += v;
    }
    const double r = std::tan(std::asin(1.0 / kCameraDistance)) / std::tan(std::numbers::pi / 6);
    CHECK(filled / (n * n) == doctest::Approx(std::numbers::pi * r * r / 4).epsilon(0.04));
    // centred
    CHECK(pixel(disc, n / 2, n / 2) == 1.0);
    CHECK(pixel(disc, 0, 0) == 0.0);

    const Mesh empty{icosphere(0).vertices, {}};
    const auto blank = hard_render(empty, CameraPose{0, 0}, 16);
    for (double v : blank.values()) CHECK(v == 0.0);

    // two triangles sharing a diagonal through pixel centres cover each pixel once: the
    // square is filled without holes along the shared edge
    const Tensor quad({4, 2}, {-0.5, -0.5, 0.5, -0.5, 0.5, 0.5, -0.5, 0.5});
    const auto sq = hard_rasterize(quad, {{0, 1, 2}, {0, 2, 3}}, 16);
    double count = 0.0;
    for (double v : sq.values()) count += v;
    CHECK(count == 64.0);

    // winding does not matter
    const auto cw = hard_rasterize(quad, {{0, 2, 1}, {0, 3, 2}}, 16);
    for (std::size_t i = 0; i < sq.numel(); ++i) CHECK(cw[i] == sq[i]);

    // top-left rule: edges through pixel centres belong to exactly one of two abutting faces
    const double e = pixel_center_x(8, 16);
    const Tensor strip({6, 2}, {-0.9, -0.9, e, -0.9, e, 0.9, -0.9, 0.9, 0.9, -0.9, 0.9, 0.9});
    const auto left = hard_rasterize(strip, {{0, 1, 2}, {0, 2, 3}}, 16);
    const auto right = hard_rasterize(strip, {{1, 4, 5}, {1, 5, 2}}, 16);
    for (std::size_t i = 0; i < left.numel(); ++i) CHECK(left[i] + right[i] <= 1.0);
    for (std::size_t r = 2; r < 14; ++r) CHECK(pixel(left, r, 8) + pixel(right, r, 8) == 1.0);
}

TEST_CASE("soft rasterizer approaches the hard mask as sigma shrinks")
{
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 4; ++trial) {
        const auto blob = random_blob(rng, 1);
        const auto pose = random_pose(rng);
        const auto hard = hard_render(blob, pose, 64);
        NoGradGuard no_grad;
        double prev = 1.0;
        for (double sigma : {1e-3, 1e-4, 1e-5}) {
            const double diff = mean_abs_outside_band(soft_render(blob, pose, 64, sigma), hard);
            CHECK(diff < prev);
            prev = diff;
        }
        CHECK(prev < 0.02);
    }
}

TEST_CASE("silhouette pyramid")
{
    const auto lv = silhouette_pyramid(Tensor({64, 64}, 0.25), 3);
    REQUIRE(lv.size() == 3);
    CHECK(lv[0].size(0) == 64);
    CHECK(lv[1].size(0) == 32);
    CHECK(lv[2].size(0) == 16);
    for (const auto& l : lv)
        for (double v : l.values()) CHECK(v == 0.25);

    const auto cube = hard_render(make_box({-0.6, -0.6, -0.6}, {0.6, 0.6, 0.6}), CameraPose{20, 30}, 64);
    const auto pyr = silhouette_pyramid(cube, 3);
    const double m0 = mean(pyr[0]).item();
    for (const auto& l : pyr) CHECK(std::abs(mean(l).item() - m0) < 1e-12);

    CHECK_THROWS_AS(silhouette_pyramid(Tensor({24, 24}), 5), RasterError);
    CHECK_THROWS_AS(silhouette_pyramid(Tensor({24, 24}), 0), RasterError);
    CHECK_NOTHROW(silhouette_pyramid(Tensor({24, 24}), 4));
}

TEST_CASE("image quantization rounds half to even")
{
    std::size_t checked = 0;
    for (int k = 0; k < 255; ++k) {
        const double v = (k + 0.5) / 255.0;
        if (v * 255.0 != k + 0.5) continue;
        const auto img = to_image(Tensor({1, 1}, {v}));
        CHECK(img.pixels[0] == (k % 2 == 0 ? k : k + 1));
        ++checked;
    }
    CHECK(checked > 50);
    CHECK(to_image(Tensor({1, 3}, {-1.0, 2.0, 1.0})).pixels == std::vector<std::uint8_t>{0, 255, 255});
}

TEST_CASE("PNG and PGM round trips")
{
    GrayImage img{5, 3, {}};
    for (std::size_t i = 0; i < 15; ++i) img.pixels.push_back(static_cast<std::uint8_t>(i * 17));
    const auto back = decode_png(encode_png(img));
    CHECK(back.width == 5);
    CHECK(back.height == 3);
    CHECK(back.pixels == img.pixels);

    const auto dir = std::filesystem::temp_directory_path() / "sketch3d_test_image";
    std::filesystem::create_directories(dir);
    write_png(dir / "a.png", img);
    CHECK(read_png(dir / "a.png").pixels == img.pixels);
    write_pgm(dir / "a.pgm", img);
    std::ifstream pgm(dir / "a.pgm", std::ios::binary);
    std::string magic;
    std::size_t w, h, maxv;
    pgm >> magic >> w >> h >> maxv;
    pgm.get();
    std::vector<char> raw(15);
    pgm.read(raw.data(), 15);
    CHECK(magic == "P5");
    CHECK(w == 5);
    CHECK(h == 3);
    CHECK(maxv == 255);
    CHECK(static_cast<std::uint8_t>(raw[14]) == img.pixels[14]);
    std::filesystem::remove_all(dir);

    const std::vector<std::uint8_t> junk{1, 2, 3, 4};
    CHECK_THROWS_AS(decode_png(junk), ImageError);
    CHECK_THROWS_AS(decode_png({}), ImageError);

    const auto bin = binarize(GrayImage{3, 1, {0, 127, 200}});
    CHECK(bin[0] == 0.0);
    CHECK(bin[1] == 0.0);
    CHECK(bin[2] == 1.0);
}
