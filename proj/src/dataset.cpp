#include "sketch3d/dataset.hpp"

#include "sketch3d/digest.hpp"
#include "sketch3d/image.hpp"
#include "sketch3d/random.hpp"
#include "sketch3d/rasterizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace sketch3d {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kShapeTag = 11, kPoseTag = 12, kSketchTag = 13, kSplitTag = 14;

using Vec3 = std::array<double, 3>;

Primitive box(Vec3 center, Vec3 half) { return {Primitive::Kind::box, center, half}; }
Primitive ellipsoid(Vec3 center, Vec3 radii) { return {Primitive::Kind::ellipsoid, center, radii}; }

Mesh primitive_mesh(const Primitive& p)
{
    const auto& c = p.center;
    const auto& h = p.half_extent;
    if (p.kind == Primitive::Kind::box) return make_box({c[0] - h[0], c[1] - h[1], c[2] - h[2]}, {c[0] + h[0], c[1] + h[1], c[2] + h[2]});
    Mesh sphere = icosphere(kEllipsoidSubdivisions);
    auto v = sphere.vertices.mutable_values();
    for (std::size_t i = 0; i < sphere.vertex_count(); ++i)
        for (int k = 0; k < 3; ++k) v[3 * i + k] = c[k] + h[k] * v[3 * i + k];
    return sphere;
}

std::vector<Primitive> layout(Category category, std::mt19937_64& rng, double jitter)
{
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const auto j = [&] { return 1.0 + jitter * u(rng); };
    const auto shift = [&] { return 0.15 * jitter * u(rng); };
    switch (category) {
    case Category::box_stack: {
        const Vec3 lower{0.5 * j(), 0.25 * j(), 0.4 * j()};
        const Vec3 upper{0.3 * j(), 0.2 * j(), 0.25 * j()};
        const double top = lower[1] + upper[1] - 0.02;
        return {box({0, 0, 0}, lower), box({shift(), top, shift()}, upper)};
    }
    case Category::ellipsoid_blend: {
        return {ellipsoid({0, 0, 0}, {0.8 * j(), 0.5 * j(), 0.5 * j()}),
                ellipsoid({0.6 * j(), 0.25 * j(), shift()}, {0.45 * j(), 0.45 * j(), 0.45 * j()}),
                ellipsoid({-0.5 * j(), 0.2 * j(), 0.1 + shift()}, {0.35 * j(), 0.3 * j(), 0.35 * j()})};
    }
    case Category::table_like: {
        const Vec3 top{0.8 * j(), 0.06 * j(), 0.5 * j()};
        const double leg_h = 0.4 * j(), leg_w = 0.06 * j();
        std::vector<Primitive> parts{box({0, leg_h, 0}, top)};
        for (double sx : {-1.0, 1.0})
            for (double sz : {-1.0, 1.0})
                parts.push_back(box({sx * (top[0] - 1.5 * leg_w), 0, sz * (top[2] - 1.5 * leg_w)}, {leg_w, leg_h, leg_w}));
        return parts;
    }
    case Category::chair_like: {
        const Vec3 seat{0.45 * j(), 0.05 * j(), 0.45 * j()};
        const double leg_h = 0.35 * j(), leg_w = 0.05 * j(), back_h = 0.45 * j(), back_t = 0.05 * j();
        std::vector<Primitive> parts{box({0, 0, 0}, seat)};
        for (double sx : {-1.0, 1.0})
            for (double sz : {-1.0, 1.0})
                parts.push_back(box({sx * (seat[0] - leg_w), -leg_h, sz * (seat[2] - leg_w)}, {leg_w, leg_h, leg_w}));
        parts.push_back(box({0, back_h, -(seat[2] - back_t)}, {seat[0], back_h, back_t}));
        return parts;
    }
    }
    throw DatasetError("unknown category");
}

std::string read_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DatasetError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& path, std::string_view bytes)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DatasetError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DatasetError("write failed for " + path.string());
}

std::string padded(std::size_t n)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%03zu", n);
    return buf;
}

std::string_view split_name(Split s) { return s == Split::train ? "train" : "test"; }

Split split_from_name(const std::string& name)
{
    if (name == "train") return Split::train;
    if (name == "test") return Split::test;
    throw DatasetError("unknown split " + name);
}

Tensor load_binary_png(const fs::path& path, std::size_t resolution)
{
    GrayImage image;
    try {
        image = read_png(path);
    } catch (const std::exception& e) {
        throw DatasetError(e.what());
    }
    if (image.width != resolution || image.height != resolution) {
        throw DatasetError(path.string() + " is " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                           ", manifest says " + std::to_string(resolution));
    }
    return binarize(image);
}

}  // namespace

std::string_view category_name(Category c)
{
    switch (c) {
    case Category::box_stack: return "box_stack";
    case Category::ellipsoid_blend: return "ellipsoid_blend";
    case Category::table_like: return "table_like";
    case Category::chair_like: return "chair_like";
    }
    return "unknown";
}

Category category_from_name(std::string_view name)
{
    for (auto c : kCategories)
        if (category_name(c) == name) return c;
    throw DatasetError("unknown category " + std::string(name));
}

void to_json(nlohmann::json& j, const CameraPose& pose)
{
    j = {{"elevation_deg", pose.elevation_deg}, {"azimuth_deg", pose.azimuth_deg}, {"distance", pose.distance}};
}

void from_json(const nlohmann::json& j, CameraPose& pose)
{
    pose.elevation_deg = j.at("elevation_deg").get<double>();
    pose.azimuth_deg = j.at("azimuth_deg").get<double>();
    pose.distance = j.value("distance", kCameraDistance);
}

void PoseDistribution::validate() const
{
    if (!(elevation_min >= -90.0 && elevation_max <= 90.0 && elevation_min <= elevation_max)) {
        throw DatasetError("pose elevation bounds must satisfy -90 <= min <= max <= 90");
    }
    if (!(distance > 0.0)) throw DatasetError("camera distance must be positive");
}

CameraPose sample_pose(const PoseDistribution& dist, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> azimuth(0.0, 360.0);
    std::uniform_real_distribution<double> elevation(dist.elevation_min, dist.elevation_max);
    const double az = azimuth(rng);
    const double el = elevation(rng);
    // uniform_real_distribution may return its upper bound after rounding
    return CameraPose::normalized(std::clamp(el, dist.elevation_min, dist.elevation_max), az, dist.distance);
}

bool Primitive::contains(const std::array<double, 3>& p) const
{
    if (kind == Kind::box) {
        for (int k = 0; k < 3; ++k)
            if (std::abs(p[k] - center[k]) > half_extent[k]) return false;
        return true;
    }
    double s = 0;
    for (int k = 0; k < 3; ++k) {
        const double d = (p[k] - center[k]) / half_extent[k];
        s += d * d;
    }
    return s <= 1.0;
}

ProceduralShape gen_shape(Category category, std::mt19937_64& rng, double jitter)
{
    if (!(jitter >= 0.0 && jitter < 1.0)) throw DatasetError("jitter must be in [0, 1)");
    ProceduralShape shape;
    shape.category = category;
    shape.parts = layout(category, rng, jitter);

    std::vector<Mesh> meshes;
    for (const auto& p : shape.parts) meshes.push_back(primitive_mesh(p));
    const Mesh raw = merge_meshes(meshes);

    // same centre and scale as normalize_to_unit_sphere, applied to the primitives too
    const auto v = raw.vertices.values();
    Vec3 lo{1e300, 1e300, 1e300}, hi{-1e300, -1e300, -1e300};
    for (std::size_t i = 0; i < raw.vertex_count(); ++i)
        for (int k = 0; k < 3; ++k) {
            lo[k] = std::min(lo[k], v[3 * i + k]);
            hi[k] = std::max(hi[k], v[3 * i + k]);
        }
    const Vec3 c{(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, (lo[2] + hi[2]) / 2};
    double radius = 0;
    for (std::size_t i = 0; i < raw.vertex_count(); ++i) {
        double d2 = 0;
        for (int k = 0; k < 3; ++k) d2 += (v[3 * i + k] - c[k]) * (v[3 * i + k] - c[k]);
        radius = std::max(radius, std::sqrt(d2));
    }
    shape.mesh = normalize_to_unit_sphere(raw);
    for (auto& p : shape.parts)
        for (int k = 0; k < 3; ++k) {
            p.center[k] = (p.center[k] - c[k]) / radius;
            p.half_extent[k] /= radius;
        }
    return shape;
}

Tensor sketchify(const Tensor& silhouette, double noise, std::mt19937_64& rng)
{
    if (silhouette.rank() != 2) throw DatasetError("sketchify expects an [H, W] map");
    if (!(noise >= 0.0 && noise <= 1.0)) throw DatasetError("sketch noise must be in [0, 1]");
    const std::size_t h = silhouette.size(0), w = silhouette.size(1);
    const auto s = silhouette.values();
    bool any = false;
    for (double x : s) {
        if (x != 0.0 && x != 1.0) throw DatasetError("sketchify expects a binary map");
        any |= x == 1.0;
    }
    if (!any) throw DatasetError("cannot sketchify an empty silhouette");

    const auto on = [&](std::ptrdiff_t r, std::ptrdiff_t c) {
        return r >= 0 && c >= 0 && r < static_cast<std::ptrdiff_t>(h) && c < static_cast<std::ptrdiff_t>(w) &&
               s[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c)] == 1.0;
    };
    Tensor out({h, w});
    auto o = out.mutable_values();
    std::bernoulli_distribution displace(noise);
    std::uniform_int_distribution<int> direction(0, 7);
    static constexpr int dr[8] = {-1, -1, -1, 0, 0, 1, 1, 1};
    static constexpr int dc[8] = {-1, 0, 1, -1, 1, -1, 0, 1};
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
            const auto ri = static_cast<std::ptrdiff_t>(r), ci = static_cast<std::ptrdiff_t>(c);
            if (!on(ri, ci)) continue;
            if (on(ri - 1, ci) && on(ri + 1, ci) && on(ri, ci - 1) && on(ri, ci + 1)) continue;
            std::size_t tr = r, tc = c;
            if (noise > 0.0 && displace(rng)) {
                const int d = direction(rng);
                tr = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(ri + dr[d], 0, static_cast<std::ptrdiff_t>(h) - 1));
                tc = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(ci + dc[d], 0, static_cast<std::ptrdiff_t>(w) - 1));
            }
            o[tr * w + tc] = 1.0;
        }
    return out;
}

Tensor sketchify(const Tensor& silhouette)
{
    std::mt19937_64 unused(0);
    return sketchify(silhouette, 0.0, unused);
}

namespace {

// 3x3 dilation (grow) or erosion (!grow); pixels outside the map count as background.
std::vector<char> morph3x3(const std::vector<char>& m, std::size_t h, std::size_t w, bool grow)
{
    std::vector<char> out(m.size(), 0);
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
            bool any = false, all = true;
            for (int dr = -1; dr <= 1; ++dr)
                for (int dc = -1; dc <= 1; ++dc) {
                    const auto rr = static_cast<std::ptrdiff_t>(r) + dr, cc = static_cast<std::ptrdiff_t>(c) + dc;
                    const bool v = rr >= 0 && cc >= 0 && rr < static_cast<std::ptrdiff_t>(h) &&
                                   cc < static_cast<std::ptrdiff_t>(w) &&
                                   m[static_cast<std::size_t>(rr) * w + static_cast<std::size_t>(cc)];
                    any |= v;
                    all &= v;
                }
            out[r * w + c] = grow ? any : all;
        }
    return out;
}

}  // namespace

Tensor fill_sketch(const Tensor& sketch)
{
    if (sketch.rank() != 2) throw DatasetError("fill_sketch expects an [H, W] map");
    const std::size_t h = sketch.size(0), w = sketch.size(1);
    const auto s = sketch.values();
    std::vector<char> strokes(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) strokes[i] = s[i] >= 0.5;

    const auto thick = morph3x3(strokes, h, w, true);
    std::vector<char> outside(thick.size(), 0);
    std::vector<std::size_t> stack;
    const auto seed = [&](std::size_t r, std::size_t c) {
        const std::size_t i = r * w + c;
        if (!thick[i] && !outside[i]) {
            outside[i] = 1;
            stack.push_back(i);
        }
    };
    for (std::size_t r = 0; r < h; ++r) {
        seed(r, 0);
        seed(r, w - 1);
    }
    for (std::size_t c = 0; c < w; ++c) {
        seed(0, c);
        seed(h - 1, c);
    }
    while (!stack.empty()) {
        const std::size_t i = stack.back();
        stack.pop_back();
        const std::size_t r = i / w, c = i % w;
        if (r > 0) seed(r - 1, c);
        if (r + 1 < h) seed(r + 1, c);
        if (c > 0) seed(r, c - 1);
        if (c + 1 < w) seed(r, c + 1);
    }
    std::vector<char> filled(thick.size());
    for (std::size_t i = 0; i < filled.size(); ++i) filled[i] = !outside[i];
    const auto region = morph3x3(filled, h, w, false);

    Tensor out({h, w});
    auto o = out.mutable_values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = region[i] || strokes[i] ? 1.0 : 0.0;
    return out;
}

void DatasetConfig::validate() const
{
    if (shapes == 0 || poses_per_shape == 0) throw DatasetError("shape and pose counts must be positive");
    if (shapes > 999 || poses_per_shape > 9) throw DatasetError("at most 999 shapes and 9 poses per shape");
    if (resolution < 8 || (resolution & (resolution - 1)) != 0) {
        throw DatasetError("resolution must be a power of two >= 8, got " + std::to_string(resolution));
    }
    if (!(jitter >= 0.0 && jitter < 1.0)) throw DatasetError("jitter must be in [0, 1)");
    if (!(sketch_noise >= 0.0 && sketch_noise <= 1.0)) throw DatasetError("sketch noise must be in [0, 1]");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw DatasetError("train fraction must be in (0, 1)");
    poses.validate();
}

void to_json(nlohmann::json& j, const DatasetConfig& c)
{
    j = {{"shapes", c.shapes},
         {"poses_per_shape", c.poses_per_shape},
         {"resolution", c.resolution},
         {"seed", c.seed},
         {"jitter", c.jitter},
         {"sketch_noise", c.sketch_noise},
         {"train_fraction", c.train_fraction},
         {"pose_distribution",
          {{"elevation_min", c.poses.elevation_min},
           {"elevation_max", c.poses.elevation_max},
           {"distance", c.poses.distance}}}};
}

void from_json(const nlohmann::json& j, DatasetConfig& c)
{
    const DatasetConfig d;
    c.shapes = j.value("shapes", d.shapes);
    c.poses_per_shape = j.value("poses_per_shape", d.poses_per_shape);
    c.resolution = j.value("resolution", d.resolution);
    c.seed = j.value("seed", d.seed);
    c.jitter = j.value("jitter", d.jitter);
    c.sketch_noise = j.value("sketch_noise", d.sketch_noise);
    c.train_fraction = j.value("train_fraction", d.train_fraction);
    if (j.contains("pose_distribution")) {
        const auto& p = j.at("pose_distribution");
        c.poses.elevation_min = p.value("elevation_min", d.poses.elevation_min);
        c.poses.elevation_max = p.value("elevation_max", d.poses.elevation_max);
        c.poses.distance = p.value("distance", d.poses.distance);
    }
}

nlohmann::json Manifest::to_json() const
{
    nlohmann::json j;
    j["version"] = version;
    j["seed"] = config.seed;
    j["config"] = config;
    j["categories"] = nlohmann::json::array();
    for (auto c : categories) j["categories"].push_back(category_name(c));
    j["samples"] = nlohmann::json::array();
    for (const auto& s : samples) {
        j["samples"].push_back({{"id", s.id},
                                {"shape", s.shape},
                                {"pose_index", s.pose_index},
                                {"category", category_name(s.category)},
                                {"split", split_name(s.split)},
                                {"pose", s.pose},
                                {"mesh", s.mesh},
                                {"sketch", s.sketch},
                                {"silhouette", s.silhouette}});
    }
    j["digests"] = digests;
    return j;
}

Manifest Manifest::from_json(const nlohmann::json& j)
{
    Manifest m;
    try {
        m.version = j.at("version").get<int>();
        if (m.version != 1) throw DatasetError("unsupported manifest version " + std::to_string(m.version));
        m.config = j.at("config").get<DatasetConfig>();
        for (const auto& c : j.at("categories")) m.categories.push_back(category_from_name(c.get<std::string>()));
        for (const auto& s : j.at("samples")) {
            SampleRecord r;
            r.id = s.at("id").get<std::string>();
            r.shape = s.at("shape").get<std::size_t>();
            r.pose_index = s.at("pose_index").get<std::size_t>();
            r.category = category_from_name(s.at("category").get<std::string>());
            r.split = split_from_name(s.at("split").get<std::string>());
            r.pose = s.at("pose").get<CameraPose>();
            r.pose.validate();
            r.mesh = s.at("mesh").get<std::string>();
            r.sketch = s.at("sketch").get<std::string>();
            r.silhouette = s.at("silhouette").get<std::string>();
            m.samples.push_back(std::move(r));
        }
        m.digests = j.at("digests").get<std::map<std::string, std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw DatasetError(std::string("malformed manifest: ") + e.what());
    } catch (const GeometryError& e) {
        throw DatasetError(std::string("malformed manifest pose: ") + e.what());
    }
    m.config.validate();
    return m;
}

Manifest build_dataset(const DatasetConfig& config, const fs::path& root)
{
    config.validate();
    std::error_code ec;
    for (const char* sub : {"meshes", "sketches", "silhouettes"}) {
        fs::create_directories(root / sub, ec);
        if (ec) throw DatasetError("cannot create " + (root / sub).string() + ": " + ec.message());
    }

    Manifest manifest;
    manifest.config = config;
    manifest.categories.assign(kCategories.begin(), kCategories.end());

    // stratified split at the shape level so no mesh appears in both splits
    std::vector<Split> split(config.shapes, Split::test);
    auto split_rng = make_rng(config.seed, kSplitTag);
    for (std::size_t k = 0; k < kCategories.size(); ++k) {
        std::vector<std::size_t> members;
        for (std::size_t i = k; i < config.shapes; i += kCategories.size()) members.push_back(i);
        std::shuffle(members.begin(), members.end(), split_rng);
        const auto n_train = static_cast<std::size_t>(std::lround(config.train_fraction * static_cast<double>(members.size())));
        for (std::size_t m = 0; m < n_train; ++m) split[members[m]] = Split::train;
    }

    for (std::size_t i = 0; i < config.shapes; ++i) {
        const Category category = kCategories[i % kCategories.size()];
        auto shape_rng = make_rng(config.seed, kShapeTag, i);
        const ProceduralShape shape = gen_shape(category, shape_rng, config.jitter);
        const std::string mesh_rel = "meshes/" + padded(i) + ".obj";
        {
            std::ostringstream obj;
            write_obj(obj, shape.mesh);
            write_file(root / mesh_rel, obj.str());
            manifest.digests[mesh_rel] = sha256_hex(obj.str());
        }
        for (std::size_t p = 0; p < config.poses_per_shape; ++p) {
            const std::uint64_t key = i * config.poses_per_shape + p;
            auto pose_rng = make_rng(config.seed, kPoseTag, key);
            auto sketch_rng = make_rng(config.seed, kSketchTag, key);
            SampleRecord r;
            r.id = padded(i) + "_" + std::to_string(p);
            r.shape = i;
            r.pose_index = p;
            r.category = category;
            r.split = split[i];
            r.pose = sample_pose(config.poses, pose_rng);
            r.mesh = mesh_rel;
            r.sketch = "sketches/" + r.id + ".png";
            r.silhouette = "silhouettes/" + r.id + ".png";

            const Tensor silhouette = hard_render(shape.mesh, r.pose, config.resolution);
            const Tensor sketch = sketchify(silhouette, config.sketch_noise, sketch_rng);
            for (const auto& [rel, map] : {std::pair{r.silhouette, silhouette}, std::pair{r.sketch, sketch}}) {
                const auto png = encode_png(to_image(map));
                const std::string_view bytes(reinterpret_cast<const char*>(png.data()), png.size());
                write_file(root / rel, bytes);
                manifest.digests[rel] = sha256_hex(bytes);
            }
            manifest.samples.push_back(std::move(r));
        }
    }
    write_file(root / kManifestName, manifest.to_json().dump(2) + "\n");
    return load_manifest(root, true);
}

Manifest load_manifest(const fs::path& root, bool verify)
{
    const fs::path path = root / kManifestName;
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw DatasetError(path.string() + " is not valid JSON: " + e.what());
    }
    Manifest m = Manifest::from_json(j);

    for (const auto& s : m.samples)
        for (const auto* rel : {&s.mesh, &s.sketch, &s.silhouette})
            if (!m.digests.contains(*rel)) throw DatasetError("manifest has no digest for " + *rel);

    std::map<std::string, Split> mesh_split;
    for (const auto& s : m.samples) {
        const auto [it, fresh] = mesh_split.emplace(m.digests.at(s.mesh), s.split);
        if (!fresh && it->second != s.split) throw DatasetError("mesh " + s.mesh + " appears in both splits");
    }

    if (verify) {
        for (const auto& [rel, digest] : m.digests) {
            if (sha256_hex(read_file(root / rel)) != digest) throw DatasetError("digest mismatch for " + rel);
        }
    }
    return m;
}

std::string manifest_digest(const fs::path& root) { return sha256_hex(read_file(root / kManifestName)); }

Dataset Dataset::load(const fs::path& root, bool verify)
{
    Dataset d;
    d.root = root;
    d.manifest = load_manifest(root, verify);
    const std::size_t res = d.manifest.config.resolution;
    for (const auto& r : d.manifest.samples) {
        d.samples.push_back({r, load_binary_png(root / r.sketch, res), load_binary_png(root / r.silhouette, res)});
    }
    return d;
}

std::vector<const Sample*> Dataset::split(Split s) const
{
    std::vector<const Sample*> out;
    for (const auto& sample : samples)
        if (sample.record.split == s) out.push_back(&sample);
    return out;
}

Mesh Dataset::mesh(const SampleRecord& record) const
{
    try {
        return read_obj(root / record.mesh);
    } catch (const GeometryError& e) {
        throw DatasetError(e.what());
    }
}

}  // namespace sketch3d
