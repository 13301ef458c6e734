#include "sketch3d/rasterizer.hpp"

#include <algorithm>
#include <cmath>

namespace sketch3d {

namespace {

// Pairs with sign * d^2 / sigma below this are dropped from the forward pass;
// their influence is below 5e-18.
constexpr double kForwardCut = 40.0;
constexpr double kBackwardMinInfluence = 1e-7;

struct P2 {
    double x, y;
};

double cross2(P2 a, P2 b, P2 p) { return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x); }

struct SegmentHit {
    double d2;
    double t;
    int edge;
};

SegmentHit closest_boundary_point(const P2 (&v)[3], P2 p)
{
    SegmentHit best{std::numeric_limits<double>::infinity(), 0.0, 0};
    for (int e = 0; e < 3; ++e) {
        const P2 a = v[e], b = v[(e + 1) % 3];
        const double dx = b.x - a.x, dy = b.y - a.y;
        const double len2 = dx * dx + dy * dy;
        double t = len2 > 0.0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
        t = std::clamp(t, 0.0, 1.0);
        const double qx = a.x + t * dx - p.x, qy = a.y + t * dy - p.y;
        const double d2 = qx * qx + qy * qy;
        if (d2 < best.d2) best = {d2, t, e};
    }
    return best;
}

bool strictly_inside(const P2 (&v)[3], double area, P2 p)
{
    if (area == 0.0) return false;
    const double e0 = cross2(v[0], v[1], p), e1 = cross2(v[1], v[2], p), e2 = cross2(v[2], v[0], p);
    return area > 0 ? (e0 > 0 && e1 > 0 && e2 > 0) : (e0 < 0 && e1 < 0 && e2 < 0);
}

struct PixelRange {
    std::size_t r0, r1, c0, c1;  // inclusive; empty when r0 > r1 or c0 > c1
    bool empty() const { return r0 > r1 || c0 > c1; }
};

PixelRange pixels_near(const P2 (&v)[3], double margin, std::size_t res)
{
    const double n = static_cast<double>(res);
    const double xmin = std::min({v[0].x, v[1].x, v[2].x}) - margin;
    const double xmax = std::max({v[0].x, v[1].x, v[2].x}) + margin;
    const double ymin = std::min({v[0].y, v[1].y, v[2].y}) - margin;
    const double ymax = std::max({v[0].y, v[1].y, v[2].y}) + margin;
    const double c0 = std::ceil((xmin + 1.0) * n / 2.0 - 0.5), c1 = std::floor((xmax + 1.0) * n / 2.0 - 0.5);
    const double r0 = std::ceil((1.0 - ymax) * n / 2.0 - 0.5), r1 = std::floor((1.0 - ymin) * n / 2.0 - 0.5);
    if (c1 < 0 || r1 < 0 || c0 > n - 1 || r0 > n - 1 || c0 > c1 || r0 > r1) return {1, 0, 1, 0};
    auto clampi = [&](double x) { return static_cast<std::size_t>(std::clamp(x, 0.0, n - 1)); };
    return {clampi(r0), clampi(r1), clampi(c0), clampi(c1)};
}

void load_face(std::span<const double> ndc, const Face& f, P2 (&v)[3])
{
    for (int k = 0; k < 3; ++k) v[k] = {ndc[2 * f[k]], ndc[2 * f[k] + 1]};
}

void check_inputs(const Tensor& ndc, const std::vector<Face>& faces, std::size_t resolution)
{
    if (ndc.rank() != 2 || ndc.size(1) != 2) {
        throw RasterError("rasterizer expects [V, 2] screen coordinates, got " + shape_str(ndc.shape()));
    }
    if (resolution == 0) throw RasterError("resolution must be positive");
    validate_faces(faces, ndc.size(0));
    for (double x : ndc.values())
        if (!std::isfinite(x)) throw RasterError("non-finite projected vertex");
}

double softplus_scalar(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid_scalar(double x)
{
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

Tensor soft_rasterize(const Tensor& ndc, const std::vector<Face>& faces, std::size_t resolution, double sigma)
{
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw RasterError("sigma must be positive, got " + std::to_string(sigma));
    check_inputs(ndc, faces, resolution);
    const std::size_t n = resolution;
    const auto pos = ndc.values();
    const double margin = std::sqrt(kForwardCut * sigma);

    // log prod_j (1 - D_j) per pixel
    std::vector<double> log_empty(n * n, 0.0);
    for (const auto& f : faces) {
        P2 v[3];
        load_face(pos, f, v);
        const double area = cross2(v[0], v[1], v[2]);
        const auto box = pixels_near(v, margin, n);
        if (box.empty()) continue;
        for (std::size_t r = box.r0; r <= box.r1; ++r) {
            const double py = pixel_center_y(r, n);
            for (std::size_t c = box.c0; c <= box.c1; ++c) {
                const P2 p{pixel_center_x(c, n), py};
                const double d2 = closest_boundary_point(v, p).d2;
                const double x = (strictly_inside(v, area, p) ? d2 : -d2) / sigma;
                if (x < -kForwardCut) continue;
                log_empty[r * n + c] -= softplus_scalar(x);
            }
        }
    }
    Tensor out({n, n});
    auto o = out.mutable_values();
    for (std::size_t i = 0; i < n * n; ++i) o[i] = 0.0 - std::expm1(log_empty[i]);

    return record_op(
        std::move(out), "soft_rasterize", {ndc},
        [ndc, faces, n, sigma, log_empty = std::move(log_empty)](const Tensor& g) {
            const auto pos = ndc.values();
            const auto gv = g.values();
            const double margin = std::sqrt(kForwardCut * sigma);
            Tensor grad({ndc.size(0), 2});
            auto out = grad.mutable_values();
            for (const auto& f : faces) {
                P2 v[3];
                load_face(pos, f, v);
                const double area = cross2(v[0], v[1], v[2]);
                const auto box = pixels_near(v, margin, n);
                if (box.empty()) continue;
                double acc[3][2] = {};
                for (std::size_t r = box.r0; r <= box.r1; ++r) {
                    const double py = pixel_center_y(r, n);
                    for (std::size_t c = box.c0; c <= box.c1; ++c) {
                        const double gp = gv[r * n + c];
                        if (gp == 0.0) continue;
                        const P2 p{pixel_center_x(c, n), py};
                        const auto hit = closest_boundary_point(v, p);
                        const double sign = strictly_inside(v, area, p) ? 1.0 : -1.0;
                        const double x = sign * hit.d2 / sigma;
                        if (x < -kForwardCut) continue;
                        const double influence = sigmoid_scalar(x);
                        if (influence < kBackwardMinInfluence) continue;
                        // dS/dx = P * D; dx/d(d^2) = sign / sigma
                        const double coef = gp * std::exp(log_empty[r * n + c]) * influence * sign / sigma;
                        const P2 a = v[hit.edge], b = v[(hit.edge + 1) % 3];
                        const double qx = a.x + hit.t * (b.x - a.x), qy = a.y + hit.t * (b.y - a.y);
                        // d(d^2)/da = -2 (1 - t) (p - q), d(d^2)/db = -2 t (p - q)
                        const double wx = -2.0 * coef * (p.x - qx), wy = -2.0 * coef * (p.y - qy);
                        acc[hit.edge][0] += (1.0 - hit.t) * wx;
                        acc[hit.edge][1] += (1.0 - hit.t) * wy;
                        acc[(hit.edge + 1) % 3][0] += hit.t * wx;
                        acc[(hit.edge + 1) % 3][1] += hit.t * wy;
                    }
                }
                for (int k = 0; k < 3; ++k) {
                    out[2 * f[k]] += acc[k][0];
                    out[2 * f[k] + 1] += acc[k][1];
                }
            }
            return std::vector<Tensor>{std::move(grad)};
        },
        false);
}

Tensor soft_render(const Mesh& mesh, const Tensor& pose_embedding, std::size_t resolution, double sigma, double distance)
{
    return soft_rasterize(project(view_transform(mesh.vertices, pose_embedding, distance)), mesh.faces, resolution,
                          sigma);
}

Tensor soft_render(const Mesh& mesh, const CameraPose& pose, std::size_t resolution, double sigma)
{
    pose.validate();
    return soft_render(mesh, pose_embedding(pose), resolution, sigma, pose.distance);
}

Tensor hard_rasterize(const Tensor& ndc, const std::vector<Face>& faces, std::size_t resolution)
{
    check_inputs(ndc, faces, resolution);
    const std::size_t n = resolution;
    const auto pos = ndc.values();
    Tensor out({n, n});
    auto o = out.mutable_values();
    for (const auto& f : faces) {
        P2 v[3];
        load_face(pos, f, v);
        double area = cross2(v[0], v[1], v[2]);
        if (area == 0.0) continue;
        if (area < 0.0) std::swap(v[1], v[2]);
        // counter-clockwise with y up: top edges run right-to-left, left edges run downwards
        bool top_left[3];
        for (int e = 0; e < 3; ++e) {
            const P2 a = v[e], b = v[(e + 1) % 3];
            top_left[e] = (a.y == b.y && b.x < a.x) || b.y < a.y;
        }
        const auto box = pixels_near(v, 0.0, n);
        if (box.empty()) continue;
        for (std::size_t r = box.r0; r <= box.r1; ++r) {
            const double py = pixel_center_y(r, n);
            for (std::size_t c = box.c0; c <= box.c1; ++c) {
                const P2 p{pixel_center_x(c, n), py};
                bool in = true;
                for (int e = 0; e < 3 && in; ++e) {
                    const double w = cross2(v[e], v[(e + 1) % 3], p);
                    in = w > 0.0 || (w == 0.0 && top_left[e]);
                }
                if (in) o[r * n + c] = 1.0;
            }
        }
    }
    return out;
}

Tensor hard_render(const Mesh& mesh, const CameraPose& pose, std::size_t resolution)
{
    NoGradGuard no_grad;
    const auto cam = view_transform(mesh, pose);
    return hard_rasterize(project(cam.vertices), mesh.faces, resolution);
}

std::vector<Tensor> silhouette_pyramid(const Tensor& silhouette, std::size_t levels)
{
    if (silhouette.rank() != 2 || silhouette.size(0) != silhouette.size(1)) {
        throw RasterError("silhouette must be a square [H, W] map, got " + shape_str(silhouette.shape()));
    }
    if (levels == 0) throw RasterError("pyramid needs at least one level");
    const std::size_t res = silhouette.size(0);
    const std::size_t factor = std::size_t{1} << (levels - 1);
    if (res % factor != 0) {
        throw RasterError("resolution " + std::to_string(res) + " is not divisible by " + std::to_string(factor) +
                          " for " + std::to_string(levels) + " levels");
    }
    std::vector<Tensor> out{silhouette};
    Tensor current = silhouette;
    for (std::size_t level = 1; level < levels; ++level) {
        const std::size_t n = current.size(0);
        current = reshape(downsample2x(reshape(current, {1, n, n})), {n / 2, n / 2});
        out.push_back(current);
    }
    return out;
}

}  // namespace sketch3d
