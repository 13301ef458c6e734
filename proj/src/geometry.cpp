#include "sketch3d/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <sstream>
#include <unordered_map>

namespace sketch3d {

namespace {

using Vec3 = std::array<double, 3>;

Vec3 sub3(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec3 cross3(const Vec3& a, const Vec3& b)
{
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
double dot3(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

Vec3 load(std::span<const double> v, std::size_t i) { return {v[3 * i], v[3 * i + 1], v[3 * i + 2]}; }

void add_into(std::span<double> g, std::size_t i, const Vec3& d, double s = 1.0)
{
    g[3 * i] += s * d[0];
    g[3 * i + 1] += s * d[1];
    g[3 * i + 2] += s * d[2];
}

std::uint64_t edge_key(std::uint32_t a, std::uint32_t b) { return (std::uint64_t{a} << 32) | b; }

void require_vertices(const Mesh& mesh)
{
    if (!mesh.vertices.defined() || mesh.vertices.rank() != 2 || mesh.vertices.size(1) != 3) {
        throw GeometryError("mesh vertices must be a [V, 3] tensor");
    }
}

}  // namespace

std::array<double, 3> Mesh::vertex(std::size_t i) const { return load(vertices.values(), i); }

void CameraPose::validate() const
{
    if (!(elevation_deg >= -90.0 && elevation_deg <= 90.0)) {
        throw GeometryError("elevation " + std::to_string(elevation_deg) + " outside [-90, 90]");
    }
    if (!(azimuth_deg >= 0.0 && azimuth_deg < 360.0)) {
        throw GeometryError("azimuth " + std::to_string(azimuth_deg) + " outside [0, 360)");
    }
    if (!(distance > 0.0)) throw GeometryError("camera distance must be positive");
}

CameraPose CameraPose::normalized(double elevation_deg, double azimuth_deg, double distance)
{
    double az = std::fmod(azimuth_deg, 360.0);
    if (az < 0.0) az += 360.0;
    if (az >= 360.0) az = 0.0;
    return {std::clamp(elevation_deg, -90.0, 90.0), az, distance};
}

void validate_faces(const std::vector<Face>& faces, std::size_t vertex_count)
{
    for (std::size_t f = 0; f < faces.size(); ++f) {
        const auto& t = faces[f];
        for (auto idx : t) {
            if (idx >= vertex_count) {
                throw GeometryError("face " + std::to_string(f) + " references vertex " + std::to_string(idx) +
                                    " of " + std::to_string(vertex_count));
            }
        }
        if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2]) {
            throw GeometryError("face " + std::to_string(f) + " is degenerate");
        }
    }
}

bool is_watertight(const std::vector<Face>& faces, std::size_t vertex_count)
{
    validate_faces(faces, vertex_count);
    std::unordered_map<std::uint64_t, int> directed;
    directed.reserve(faces.size() * 3);
    for (const auto& t : faces)
        for (int k = 0; k < 3; ++k)
            if (++directed[edge_key(t[k], t[(k + 1) % 3])] > 1) return false;
    for (const auto& [key, count] : directed) {
        const auto a = static_cast<std::uint32_t>(key >> 32);
        const auto b = static_cast<std::uint32_t>(key & 0xffffffffu);
        if (!directed.contains(edge_key(b, a))) return false;
    }
    return !faces.empty();
}

MeshTopology build_topology(const std::vector<Face>& faces, std::size_t vertex_count)
{
    validate_faces(faces, vertex_count);
    std::map<std::uint64_t, std::vector<std::uint32_t>> adjacency;
    for (std::uint32_t f = 0; f < faces.size(); ++f)
        for (int k = 0; k < 3; ++k) {
            const auto a = faces[f][k], b = faces[f][(k + 1) % 3];
            adjacency[edge_key(std::min(a, b), std::max(a, b))].push_back(f);
        }
    MeshTopology topo;
    topo.neighbors.resize(vertex_count);
    topo.edges.reserve(adjacency.size());
    for (const auto& [key, adjacent] : adjacency) {
        const auto a = static_cast<std::uint32_t>(key >> 32);
        const auto b = static_cast<std::uint32_t>(key & 0xffffffffu);
        if (adjacent.size() != 2) {
            throw GeometryError("edge (" + std::to_string(a) + ", " + std::to_string(b) + ") has " +
                                std::to_string(adjacent.size()) + " adjacent faces; expected 2");
        }
        topo.edges.push_back({a, b, adjacent[0], adjacent[1]});
        topo.neighbors[a].push_back(b);
        topo.neighbors[b].push_back(a);
    }
    for (auto& n : topo.neighbors) std::sort(n.begin(), n.end());
    return topo;
}

long euler_characteristic(const Mesh& mesh)
{
    const auto topo = build_topology(mesh.faces, mesh.vertex_count());
    return static_cast<long>(mesh.vertex_count()) - static_cast<long>(topo.edges.size()) +
           static_cast<long>(mesh.face_count());
}

Mesh icosphere(int subdivisions)
{
    if (subdivisions < 0 || subdivisions > 5) {
        throw GeometryError("icosphere subdivisions must be in [0, 5], got " + std::to_string(subdivisions));
    }
    const double t = (1.0 + std::sqrt(5.0)) / 2.0;
    std::vector<Vec3> verts = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                               {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
    std::vector<Face> faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
                               {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                               {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
                               {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
    auto normalize = [](Vec3 v) {
        const double n = std::sqrt(dot3(v, v));
        return Vec3{v[0] / n, v[1] / n, v[2] / n};
    };
    for (auto& v : verts) v = normalize(v);

    for (int level = 0; level < subdivisions; ++level) {
        std::unordered_map<std::uint64_t, std::uint32_t> midpoint;
        auto mid = [&](std::uint32_t a, std::uint32_t b) {
            const auto key = edge_key(std::min(a, b), std::max(a, b));
            if (auto it = midpoint.find(key); it != midpoint.end()) return it->second;
            const auto& p = verts[a];
            const auto& q = verts[b];
            verts.push_back(normalize({p[0] + q[0], p[1] + q[1], p[2] + q[2]}));
            const auto idx = static_cast<std::uint32_t>(verts.size() - 1);
            midpoint.emplace(key, idx);
            return idx;
        };
        std::vector<Face> next;
        next.reserve(faces.size() * 4);
        for (const auto& f : faces) {
            const auto ab = mid(f[0], f[1]), bc = mid(f[1], f[2]), ca = mid(f[2], f[0]);
            next.push_back({f[0], ab, ca});
            next.push_back({f[1], bc, ab});
            next.push_back({f[2], ca, bc});
            next.push_back({ab, bc, ca});
        }
        faces = std::move(next);
    }

    std::vector<double> flat;
    flat.reserve(verts.size() * 3);
    for (const auto& v : verts) flat.insert(flat.end(), v.begin(), v.end());
    return {Tensor({verts.size(), 3}, std::move(flat)), std::move(faces)};
}

Mesh make_box(std::array<double, 3> lo, std::array<double, 3> hi)
{
    std::vector<double> flat;
    for (int i = 0; i < 8; ++i) {
        flat.push_back(i & 1 ? hi[0] : lo[0]);
        flat.push_back(i & 2 ? hi[1] : lo[1]);
        flat.push_back(i & 4 ? hi[2] : lo[2]);
    }
    std::vector<Face> faces = {{0, 4, 6}, {0, 6, 2}, {1, 3, 7}, {1, 7, 5}, {0, 1, 5}, {0, 5, 4},
                               {2, 6, 7}, {2, 7, 3}, {0, 2, 3}, {0, 3, 1}, {4, 5, 7}, {4, 7, 6}};
    return {Tensor({8, 3}, std::move(flat)), std::move(faces)};
}

Mesh merge_meshes(const std::vector<Mesh>& parts)
{
    std::vector<double> flat;
    std::vector<Face> faces;
    std::uint32_t base = 0;
    for (const auto& part : parts) {
        require_vertices(part);
        flat.insert(flat.end(), part.vertices.values().begin(), part.vertices.values().end());
        for (const auto& f : part.faces) faces.push_back({f[0] + base, f[1] + base, f[2] + base});
        base += static_cast<std::uint32_t>(part.vertex_count());
    }
    if (flat.empty()) throw GeometryError("merge of empty mesh list");
    const std::size_t n = flat.size() / 3;
    return {Tensor({n, 3}, std::move(flat)), std::move(faces)};
}

Mesh normalize_to_unit_sphere(const Mesh& mesh)
{
    require_vertices(mesh);
    const auto v = mesh.vertices.values();
    const std::size_t n = mesh.vertex_count();
    Vec3 lo{1e300, 1e300, 1e300}, hi{-1e300, -1e300, -1e300};
    for (std::size_t i = 0; i < n; ++i)
        for (int k = 0; k < 3; ++k) {
            lo[k] = std::min(lo[k], v[3 * i + k]);
            hi[k] = std::max(hi[k], v[3 * i + k]);
        }
    const Vec3 c{(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, (lo[2] + hi[2]) / 2};
    double radius = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto d = sub3(load(v, i), c);
        radius = std::max(radius, std::sqrt(dot3(d, d)));
    }
    if (radius <= 0.0) throw GeometryError("cannot normalize a mesh of zero extent");
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < n; ++i)
        for (int k = 0; k < 3; ++k) out[3 * i + k] = (v[3 * i + k] - c[k]) / radius;
    return {Tensor({n, 3}, std::move(out)), mesh.faces};
}

Mesh apply_offsets(const Mesh& base, const Tensor& offsets)
{
    require_vertices(base);
    if (offsets.shape() != base.vertices.shape()) {
        throw GeometryError("offsets " + shape_str(offsets.shape()) + " do not match vertices " +
                            shape_str(base.vertices.shape()));
    }
    return {add(base.vertices, offsets), base.faces};
}

Tensor pose_embedding(const CameraPose& pose)
{
    const double az = pose.azimuth_deg * std::numbers::pi / 180.0;
    const double el = pose.elevation_deg * std::numbers::pi / 180.0;
    return Tensor({4}, {std::sin(az), std::cos(az), std::sin(el), std::cos(el)});
}

Tensor view_transform(const Tensor& vertices, const Tensor& embedding, double distance)
{
    if (vertices.rank() != 2 || vertices.size(1) != 3) {
        throw GeometryError("view_transform expects [V, 3] vertices, got " + shape_str(vertices.shape()));
    }
    if (embedding.numel() != 4) throw GeometryError("pose embedding must have 4 entries");
    const auto e = embedding.values();
    const double sa = e[0], ca = e[1], se = e[2], ce = e[3];
    // R = R_elevation * R_azimuth
    const double r[3][3] = {{ca, 0.0, -sa}, {se * sa, ce, se * ca}, {ce * sa, -se, ce * ca}};
    const std::size_t n = vertices.size(0);
    const auto v = vertices.values();
    Tensor out({n, 3});
    auto o = out.mutable_values();
    for (std::size_t i = 0; i < n; ++i)
        for (int row = 0; row < 3; ++row)
            o[3 * i + row] = r[row][0] * v[3 * i] + r[row][1] * v[3 * i + 1] + r[row][2] * v[3 * i + 2];
    for (std::size_t i = 0; i < n; ++i) o[3 * i + 2] += distance;

    return record_op(
        std::move(out), "view_transform", {vertices, embedding},
        [vertices, embedding](const Tensor& g) {
            const auto ev = embedding.values();
            const double sa = ev[0], ca = ev[1], se = ev[2], ce = ev[3];
            const double r[3][3] = {{ca, 0.0, -sa}, {se * sa, ce, se * ca}, {ce * sa, -se, ce * ca}};
            const auto gv = g.values();
            const auto v = vertices.values();
            const std::size_t n = vertices.size(0);
            std::vector<Tensor> grads(2);
            if (vertices.requires_grad()) {
                Tensor gvert({n, 3});
                auto out = gvert.mutable_values();
                for (std::size_t i = 0; i < n; ++i)
                    for (int col = 0; col < 3; ++col)
                        out[3 * i + col] =
                            r[0][col] * gv[3 * i] + r[1][col] * gv[3 * i + 1] + r[2][col] * gv[3 * i + 2];
                grads[0] = std::move(gvert);
            }
            if (embedding.requires_grad()) {
                double gr[3][3] = {};
                for (std::size_t i = 0; i < n; ++i)
                    for (int row = 0; row < 3; ++row)
                        for (int col = 0; col < 3; ++col) gr[row][col] += gv[3 * i + row] * v[3 * i + col];
                const double dsa = -gr[0][2] + gr[1][0] * se + gr[2][0] * ce;
                const double dca = gr[0][0] + gr[1][2] * se + gr[2][2] * ce;
                const double dse = gr[1][0] * sa + gr[1][2] * ca - gr[2][1];
                const double dce = gr[1][1] + gr[2][0] * sa + gr[2][2] * ca;
                grads[1] = Tensor(embedding.shape(), std::vector<double>{dsa, dca, dse, dce});
            }
            return grads;
        },
        false);
}

Mesh view_transform(const Mesh& mesh, const CameraPose& pose)
{
    require_vertices(mesh);
    pose.validate();
    return {view_transform(mesh.vertices, pose_embedding(pose), pose.distance), mesh.faces};
}

Tensor project(const Tensor& camera_vertices, double view_angle_deg)
{
    if (camera_vertices.rank() != 2 || camera_vertices.size(1) != 3) {
        throw GeometryError("project expects [V, 3] vertices, got " + shape_str(camera_vertices.shape()));
    }
    const double scale = 1.0 / std::tan(view_angle_deg * std::numbers::pi / 180.0);
    const std::size_t n = camera_vertices.size(0);
    const auto v = camera_vertices.values();
    Tensor out({n, 2});
    auto o = out.mutable_values();
    for (std::size_t i = 0; i < n; ++i) {
        const double z = v[3 * i + 2];
        if (!(z > 0.0)) {
            throw GeometryError("vertex " + std::to_string(i) + " has non-positive depth " + std::to_string(z));
        }
        o[2 * i] = scale * v[3 * i] / z;
        o[2 * i + 1] = scale * v[3 * i + 1] / z;
    }
    return record_op(
        std::move(out), "project", {camera_vertices},
        [camera_vertices, scale](const Tensor& g) {
            const auto v = camera_vertices.values();
            const auto gv = g.values();
            const std::size_t n = camera_vertices.size(0);
            Tensor gin({n, 3});
            auto o = gin.mutable_values();
            for (std::size_t i = 0; i < n; ++i) {
                const double x = v[3 * i], y = v[3 * i + 1], z = v[3 * i + 2];
                const double gx = gv[2 * i], gy = gv[2 * i + 1];
                o[3 * i] = scale * gx / z;
                o[3 * i + 1] = scale * gy / z;
                o[3 * i + 2] = -scale * (x * gx + y * gy) / (z * z);
            }
            return std::vector<Tensor>{std::move(gin)};
        },
        false);
}

Tensor laplacian_loss(const Mesh& mesh) { return laplacian_loss(mesh, build_topology(mesh.faces, mesh.vertex_count())); }

Tensor laplacian_loss(const Mesh& mesh, const MeshTopology& topology)
{
    require_vertices(mesh);
    const std::size_t n = mesh.vertex_count();
    if (topology.neighbors.size() != n) throw GeometryError("topology does not match mesh");
    const auto v = mesh.vertices.values();
    std::vector<double> delta(3 * n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& nb = topology.neighbors[i];
        if (nb.empty()) throw GeometryError("vertex " + std::to_string(i) + " is isolated");
        Vec3 c{0, 0, 0};
        for (auto j : nb)
            for (int k = 0; k < 3; ++k) c[k] += v[3 * j + k];
        for (int k = 0; k < 3; ++k) {
            delta[3 * i + k] = v[3 * i + k] - c[k] / static_cast<double>(nb.size());
            total += delta[3 * i + k] * delta[3 * i + k];
        }
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    const Tensor& vertices = mesh.vertices;
    return record_op(
        Tensor::scalar(total * inv_n), "laplacian_loss", {vertices},
        [delta = std::move(delta), neighbors = topology.neighbors, inv_n, n](const Tensor& g) {
            const double s = 2.0 * inv_n * g.item();
            Tensor gv({n, 3});
            auto o = gv.mutable_values();
            for (std::size_t i = 0; i < n; ++i) {
                const double w = 1.0 / static_cast<double>(neighbors[i].size());
                for (int k = 0; k < 3; ++k) o[3 * i + k] += s * delta[3 * i + k];
                for (auto j : neighbors[i])
                    for (int k = 0; k < 3; ++k) o[3 * j + k] -= s * w * delta[3 * i + k];
            }
            return std::vector<Tensor>{std::move(gv)};
        },
        false);
}

Tensor flatten_loss(const Mesh& mesh) { return flatten_loss(mesh, build_topology(mesh.faces, mesh.vertex_count())); }

Tensor flatten_loss(const Mesh& mesh, const MeshTopology& topology)
{
    require_vertices(mesh);
    if (topology.edges.empty()) throw GeometryError("flatten_loss on a mesh without edges");
    const auto v = mesh.vertices.values();
    const auto& faces = mesh.faces;
    std::vector<Vec3> normals(faces.size());
    for (std::size_t f = 0; f < faces.size(); ++f) {
        const auto p0 = load(v, faces[f][0]);
        normals[f] = cross3(sub3(load(v, faces[f][1]), p0), sub3(load(v, faces[f][2]), p0));
    }
    double total = 0.0;
    for (const auto& e : topology.edges) {
        const auto& a = normals[e.left];
        const auto& b = normals[e.right];
        const double denom = std::max(std::sqrt(dot3(a, a) * dot3(b, b)), 1e-30);
        const double c = dot3(a, b) / denom;
        total += (1.0 - c) * (1.0 - c);
    }
    const double inv_e = 1.0 / static_cast<double>(topology.edges.size());
    const Tensor& vertices = mesh.vertices;
    return record_op(
        Tensor::scalar(total * inv_e), "flatten_loss", {vertices},
        [vertices, faces, edges = topology.edges, normals = std::move(normals), inv_e](const Tensor& g) {
            const double s = g.item() * inv_e;
            std::vector<Vec3> gn(faces.size(), Vec3{0, 0, 0});
            for (const auto& e : edges) {
                const auto& a = normals[e.left];
                const auto& b = normals[e.right];
                const double na2 = dot3(a, a), nb2 = dot3(b, b);
                const double denom = std::max(std::sqrt(na2 * nb2), 1e-30);
                const double c = dot3(a, b) / denom;
                const double dc = -2.0 * (1.0 - c) * s;
                for (int k = 0; k < 3; ++k) {
                    gn[e.left][k] += dc * (b[k] / denom - c * a[k] / std::max(na2, 1e-30));
                    gn[e.right][k] += dc * (a[k] / denom - c * b[k] / std::max(nb2, 1e-30));
                }
            }
            const auto v = vertices.values();
            Tensor gv(vertices.shape());
            auto o = gv.mutable_values();
            for (std::size_t f = 0; f < faces.size(); ++f) {
                const auto p0 = load(v, faces[f][0]);
                const auto e1 = sub3(load(v, faces[f][1]), p0);
                const auto e2 = sub3(load(v, faces[f][2]), p0);
                const auto g1 = cross3(e2, gn[f]);
                const auto g2 = cross3(gn[f], e1);
                add_into(o, faces[f][1], g1);
                add_into(o, faces[f][2], g2);
                add_into(o, faces[f][0], g1, -1.0);
                add_into(o, faces[f][0], g2, -1.0);
            }
            return std::vector<Tensor>{std::move(gv)};
        },
        false);
}

std::size_t VoxelGrid::count() const
{
    return static_cast<std::size_t>(std::count(occupancy.begin(), occupancy.end(), std::uint8_t{1}));
}

double VoxelGrid::voxel_center(std::size_t i) const
{
    return -1.0 + (static_cast<double>(i) + 0.5) * 2.0 / static_cast<double>(resolution);
}

namespace {

struct Crossing {
    double x;
    int sign;
};

// Crossings of the line {(t, y, z)} with the surface. Returns false when the
// line passes within `tol` of a projected triangle edge or vertex.
bool ray_crossings(const std::vector<std::array<Vec3, 3>>& tris, const std::vector<std::array<double, 4>>& boxes,
                   double y, double z, std::vector<Crossing>& out)
{
    constexpr double tol = 1e-12;
    out.clear();
    for (std::size_t f = 0; f < tris.size(); ++f) {
        const auto& bb = boxes[f];
        if (y < bb[0] - tol || y > bb[1] + tol || z < bb[2] - tol || z > bb[3] + tol) continue;
        const auto& t = tris[f];
        // signed doubled area in the (y, z) plane
        const double area = (t[1][1] - t[0][1]) * (t[2][2] - t[0][2]) - (t[2][1] - t[0][1]) * (t[1][2] - t[0][2]);
        if (area == 0.0) continue;
        const double w0 = ((t[1][1] - y) * (t[2][2] - z) - (t[2][1] - y) * (t[1][2] - z)) / area;
        const double w1 = ((t[2][1] - y) * (t[0][2] - z) - (t[0][1] - y) * (t[2][2] - z)) / area;
        const double w2 = 1.0 - w0 - w1;
        const double lo = std::min({w0, w1, w2});
        if (lo < -tol) continue;
        if (lo <= tol) return false;
        out.push_back({w0 * t[0][0] + w1 * t[1][0] + w2 * t[2][0], area > 0 ? 1 : -1});
    }
    return true;
}

}  // namespace

VoxelGrid voxelize(const Mesh& mesh, std::size_t resolution)
{
    require_vertices(mesh);
    if (resolution == 0) throw GeometryError("voxel resolution must be positive");
    if (!is_watertight(mesh.faces, mesh.vertex_count())) throw GeometryError("voxelize requires a watertight mesh");

    const auto v = mesh.vertices.values();
    std::vector<std::array<Vec3, 3>> tris;
    std::vector<std::array<double, 4>> boxes;
    tris.reserve(mesh.face_count());
    for (const auto& f : mesh.faces) {
        std::array<Vec3, 3> t{load(v, f[0]), load(v, f[1]), load(v, f[2])};
        boxes.push_back({std::min({t[0][1], t[1][1], t[2][1]}), std::max({t[0][1], t[1][1], t[2][1]}),
                         std::min({t[0][2], t[1][2], t[2][2]}), std::max({t[0][2], t[1][2], t[2][2]})});
        tris.push_back(t);
    }

    VoxelGrid grid;
    grid.resolution = resolution;
    grid.occupancy.assign(resolution * resolution * resolution, 0);
    const double step = 2.0 / static_cast<double>(resolution);
    std::vector<Crossing> crossings;
    for (std::size_t iz = 0; iz < resolution; ++iz) {
        for (std::size_t iy = 0; iy < resolution; ++iy) {
            const double y0 = grid.voxel_center(iy), z0 = grid.voxel_center(iz);
            // Degenerate hits are resolved by nudging the ray by a small irrational offset.
            bool ok = false;
            for (int attempt = 0; attempt < 16 && !ok; ++attempt) {
                const double jitter = attempt * 1e-7 * step;
                ok = ray_crossings(tris, boxes, y0 + 0.7548776662466927 * jitter, z0 + 0.5698402909980532 * jitter,
                                   crossings);
            }
            if (!ok) throw GeometryError("voxelize: could not find a non-degenerate ray");
            if (crossings.empty()) continue;
            std::sort(crossings.begin(), crossings.end(), [](const Crossing& a, const Crossing& b) { return a.x < b.x; });
            // winding at x = sum of signs of crossings beyond x
            int winding = 0;
            for (const auto& c : crossings) winding += c.sign;
            std::size_t next = 0;
            for (std::size_t ix = 0; ix < resolution; ++ix) {
                const double x = grid.voxel_center(ix);
                while (next < crossings.size() && crossings[next].x <= x) winding -= crossings[next++].sign;
                if (winding != 0) grid.occupancy[(iz * resolution + iy) * resolution + ix] = 1;
            }
        }
    }
    return grid;
}

double voxel_iou(const VoxelGrid& a, const VoxelGrid& b)
{
    if (a.resolution != b.resolution || a.occupancy.size() != b.occupancy.size()) {
        throw GeometryError("voxel_iou: resolution mismatch " + std::to_string(a.resolution) + " vs " +
                            std::to_string(b.resolution));
    }
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.occupancy.size(); ++i) {
        inter += (a.occupancy[i] & b.occupancy[i]);
        uni += (a.occupancy[i] | b.occupancy[i]);
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

void write_obj(std::ostream& out, const Mesh& mesh)
{
    require_vertices(mesh);
    out << std::setprecision(17);
    const auto v = mesh.vertices.values();
    for (std::size_t i = 0; i < mesh.vertex_count(); ++i) {
        out << "v " << v[3 * i] << ' ' << v[3 * i + 1] << ' ' << v[3 * i + 2] << '\n';
    }
    for (const auto& f : mesh.faces) out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
}

void write_obj(const std::filesystem::path& path, const Mesh& mesh)
{
    std::ofstream out(path);
    if (!out) throw GeometryError("cannot open " + path.string() + " for writing");
    write_obj(out, mesh);
    if (!out) throw GeometryError("failed writing " + path.string());
}

Mesh read_obj(std::istream& in)
{
    std::vector<double> flat;
    std::vector<Face> faces;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream ls(line);
        std::string tag;
        if (!(ls >> tag) || tag[0] == '#') continue;
        if (tag == "v") {
            double x, y, z;
            if (!(ls >> x >> y >> z)) throw GeometryError("malformed vertex on OBJ line " + std::to_string(line_no));
            flat.insert(flat.end(), {x, y, z});
        } else if (tag == "f") {
            std::vector<std::uint32_t> idx;
            std::string tok;
            while (ls >> tok) {
                const long i = std::stol(tok.substr(0, tok.find('/')));
                if (i < 1) throw GeometryError("unsupported OBJ index on line " + std::to_string(line_no));
                idx.push_back(static_cast<std::uint32_t>(i - 1));
            }
            if (idx.size() < 3) throw GeometryError("face with fewer than 3 vertices on OBJ line " + std::to_string(line_no));
            for (std::size_t k = 1; k + 1 < idx.size(); ++k) faces.push_back({idx[0], idx[k], idx[k + 1]});
        }
    }
    if (flat.empty()) throw GeometryError("OBJ contains no vertices");
    const std::size_t n = flat.size() / 3;
    Mesh mesh{Tensor({n, 3}, std::move(flat)), std::move(faces)};
    validate_faces(mesh.faces, mesh.vertex_count());
    return mesh;
}

Mesh read_obj(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw GeometryError("cannot open " + path.string());
    return read_obj(in);
}

}  // namespace sketch3d
