#pragma once

#include "sketch3d/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <vector>

namespace sketch3d {

class GeometryError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Fixed camera setup shared by every rendered view.
inline constexpr double kCameraDistance = 2.732;
// Half-angle of the viewing frustum, in degrees.
inline constexpr double kViewAngleDeg = 30.0;

using Face = std::array<std::uint32_t, 3>;

// Triangle mesh. Faces are wound counter-clockwise when seen from outside.
struct Mesh {
    Tensor vertices;  // [V, 3]
    std::vector<Face> faces;

    std::size_t vertex_count() const { return vertices.defined() ? vertices.size(0) : 0; }
    std::size_t face_count() const { return faces.size(); }
    std::array<double, 3> vertex(std::size_t i) const;
};

struct CameraPose {
    double elevation_deg = 0.0;
    double azimuth_deg = 0.0;
    double distance = kCameraDistance;

    // Throws GeometryError unless elevation is in [-90, 90], azimuth in
    // [0, 360) and distance positive.
    void validate() const;
    // Wraps azimuth into [0, 360).
    static CameraPose normalized(double elevation_deg, double azimuth_deg, double distance = kCameraDistance);
};

// Edge table of a closed triangle mesh.
struct MeshTopology {
    struct Edge {
        std::uint32_t a, b;           // endpoints, a < b
        std::uint32_t left, right;    // adjacent faces
    };
    std::vector<Edge> edges;
    std::vector<std::vector<std::uint32_t>> neighbors;  // sorted one-ring per vertex
};

// Throws GeometryError on out-of-range or repeated indices.
void validate_faces(const std::vector<Face>& faces, std::size_t vertex_count);
// Every edge shared by exactly two faces with opposite orientation.
bool is_watertight(const std::vector<Face>& faces, std::size_t vertex_count);
// Throws GeometryError naming the first boundary or non-manifold edge.
MeshTopology build_topology(const std::vector<Face>& faces, std::size_t vertex_count);
long euler_characteristic(const Mesh& mesh);

// Unit icosphere: 10*4^n + 2 vertices, 20*4^n faces.
Mesh icosphere(int subdivisions);
// Axis-aligned closed box, 8 vertices and 12 outward-facing triangles.
Mesh make_box(std::array<double, 3> lo, std::array<double, 3> hi);
// Disjoint union of meshes (indices re-based, no boolean operation).
Mesh merge_meshes(const std::vector<Mesh>& parts);
// Recentres on the bounding-box centre and scales the farthest vertex to radius 1.
Mesh normalize_to_unit_sphere(const Mesh& mesh);

Mesh apply_offsets(const Mesh& base, const Tensor& offsets);

// [sin az, cos az, sin el, cos el] of a pose.
Tensor pose_embedding(const CameraPose& pose);

// Rotates by azimuth about +y, then by elevation about the camera-right axis,
// then moves the object `distance` along the view axis (+z). `embedding` is a
// differentiable [sin az, cos az, sin el, cos el] tensor.
Tensor view_transform(const Tensor& vertices, const Tensor& embedding, double distance);
Mesh view_transform(const Mesh& mesh, const CameraPose& pose);

// Perspective division into normalized device coordinates: [V, 3] -> [V, 2].
Tensor project(const Tensor& camera_vertices, double view_angle_deg = kViewAngleDeg);

// Mean over vertices of |v - mean(one-ring)|^2.
Tensor laplacian_loss(const Mesh& mesh);
Tensor laplacian_loss(const Mesh& mesh, const MeshTopology& topology);
// Mean over edges of (1 - n_left . n_right)^2 with unit face normals; zero for a flat fold.
Tensor flatten_loss(const Mesh& mesh);
Tensor flatten_loss(const Mesh& mesh, const MeshTopology& topology);

// Occupancy over the canonical cube [-1, 1]^3.
struct VoxelGrid {
    std::size_t resolution = 0;
    std::vector<std::uint8_t> occupancy;  // x fastest, then y, then z

    bool at(std::size_t x, std::size_t y, std::size_t z) const
    {
        return occupancy[(z * resolution + y) * resolution + x] != 0;
    }
    std::size_t count() const;
    double voxel_center(std::size_t i) const;
};

// A voxel is occupied when its centre has non-zero winding number with respect to
// the surface, evaluated by axis-aligned ray casting.
VoxelGrid voxelize(const Mesh& mesh, std::size_t resolution);
double voxel_iou(const VoxelGrid& a, const VoxelGrid& b);

void write_obj(std::ostream& out, const Mesh& mesh);
void write_obj(const std::filesystem::path& path, const Mesh& mesh);
Mesh read_obj(std::istream& in);
Mesh read_obj(const std::filesystem::path& path);

}  // namespace sketch3d
