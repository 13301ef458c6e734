#pragma once

#include "sketch3d/geometry.hpp"
#include "sketch3d/tensor.hpp"

#include <json.hpp>

#include <array>
#include <filesystem>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sketch3d {

// IO problems, malformed manifests and digest mismatches.
class DatasetError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Category { box_stack, ellipsoid_blend, table_like, chair_like };
inline constexpr std::array<Category, 4> kCategories{Category::box_stack, Category::ellipsoid_blend,
                                                     Category::table_like, Category::chair_like};
std::string_view category_name(Category c);
Category category_from_name(std::string_view name);

void to_json(nlohmann::json& j, const CameraPose& pose);
void from_json(const nlohmann::json& j, CameraPose& pose);

// Uniform azimuth in [0, 360), uniform elevation in [elevation_min, elevation_max].
struct PoseDistribution {
    double elevation_min = 0.0;
    double elevation_max = 30.0;
    double distance = kCameraDistance;

    void validate() const;
};

CameraPose sample_pose(const PoseDistribution& dist, std::mt19937_64& rng);

// Solid building block of a procedural shape.
struct Primitive {
    enum class Kind { box, ellipsoid };
    Kind kind = Kind::box;
    std::array<double, 3> center{};
    std::array<double, 3> half_extent{};  // box half-sizes or ellipsoid radii

    bool contains(const std::array<double, 3>& p) const;
};

struct ProceduralShape {
    Category category = Category::box_stack;
    Mesh mesh;                     // normalized to the unit bounding sphere
    std::vector<Primitive> parts;  // in the same normalized frame as `mesh`
};

inline constexpr int kEllipsoidSubdivisions = 2;

// Union of overlapping primitives; every size parameter is scaled by a factor
// drawn from [1 - jitter, 1 + jitter].
ProceduralShape gen_shape(Category category, std::mt19937_64& rng, double jitter = 0.3);

// One-pixel 4-neighbour boundary of a binary [H, W] map. With probability
// `noise` each boundary pixel is moved by one pixel in a random direction.
Tensor sketchify(const Tensor& silhouette, double noise, std::mt19937_64& rng);
Tensor sketchify(const Tensor& silhouette);

// Region enclosed by the strokes of a binary [H, W] sketch, strokes included.
// Strokes are thickened by one pixel before the background is flood-filled from
// the border, which closes one-pixel gaps, and the fill is then thinned back.
Tensor fill_sketch(const Tensor& sketch);

struct DatasetConfig {
    std::size_t shapes = 50;
    std::size_t poses_per_shape = 4;
    std::size_t resolution = 64;
    std::uint64_t seed = 0;
    double jitter = 0.3;
    double sketch_noise = 0.2;
    double train_fraction = 0.8;
    PoseDistribution poses;

    void validate() const;
};

void to_json(nlohmann::json& j, const DatasetConfig& c);
void from_json(const nlohmann::json& j, DatasetConfig& c);

enum class Split { train, test };

struct SampleRecord {
    std::string id;  // "NNN_P"
    std::size_t shape = 0;
    std::size_t pose_index = 0;
    Category category = Category::box_stack;
    Split split = Split::train;
    CameraPose pose;
    std::string mesh;  // paths relative to the dataset root
    std::string sketch;
    std::string silhouette;
};

struct Manifest {
    int version = 1;
    DatasetConfig config;
    std::vector<Category> categories;
    std::vector<SampleRecord> samples;
    std::map<std::string, std::string> digests;  // relative path -> sha256 hex

    nlohmann::json to_json() const;
    static Manifest from_json(const nlohmann::json& j);
};

inline constexpr std::string_view kManifestName = "manifest.json";

// Writes meshes/, sketches/, silhouettes/ and manifest.json under `root`, then
// re-reads everything and checks the digests.
Manifest build_dataset(const DatasetConfig& config, const std::filesystem::path& root);

// Parses manifest.json; with `verify` every listed file's digest is checked.
Manifest load_manifest(const std::filesystem::path& root, bool verify = true);
std::string manifest_digest(const std::filesystem::path& root);

struct Sample {
    SampleRecord record;
    Tensor sketch;      // binary [H, W]
    Tensor silhouette;  // binary [H, W]
};

// A manifest with its images decoded into memory.
struct Dataset {
    std::filesystem::path root;
    Manifest manifest;
    std::vector<Sample> samples;

    static Dataset load(const std::filesystem::path& root, bool verify = true);
    std::vector<const Sample*> split(Split s) const;
    Mesh mesh(const SampleRecord& record) const;
    std::size_t resolution() const { return manifest.config.resolution; }
};

}  // namespace sketch3d
