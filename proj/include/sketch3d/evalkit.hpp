#pragma once

#include "sketch3d/dataset.hpp"
#include "sketch3d/pipeline.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace sketch3d {

// Which viewpoint conditions the decoder during evaluation.
enum class PoseMode { gt, pred };
std::string_view pose_mode_name(PoseMode m);
PoseMode pose_mode_from_name(std::string_view name);

inline constexpr std::size_t kDefaultVoxelResolution = 32;

struct SampleScore {
    std::string id;
    Category category = Category::box_stack;
    double iou = 0.0;
};

struct CategoryScore {
    Category category = Category::box_stack;
    std::size_t count = 0;
    double mean = 0.0;
};

// Per-sample voxel IoU aggregated per category. `mean` is the unweighted mean of
// the category means.
struct EvalTable {
    PoseMode mode = PoseMode::gt;
    std::size_t voxel_resolution = kDefaultVoxelResolution;
    std::vector<SampleScore> samples;
    std::vector<CategoryScore> categories;  // in kCategories order, only those with samples
    double mean = 0.0;

    nlohmann::json to_json() const;
    // Category columns followed by the mean, as one header row and one value row.
    std::string to_text(std::string_view row_label = "model") const;
};

// Groups scores by category; throws std::invalid_argument when `samples` is empty.
EvalTable tabulate(PoseMode mode, std::size_t voxel_resolution, std::vector<SampleScore> samples);

// Voxel IoU between `predicted` and `reference` after normalizing both to the unit sphere.
double mesh_voxel_iou(const Mesh& predicted, const Mesh& reference, std::size_t voxel_resolution);

// Scores every test sample: infers a mesh from the sketch (decoded at the ground
// truth or predicted pose) and compares it with the ground-truth mesh.
EvalTable evaluate(const InferenceModel& model, const Dataset& data, PoseMode mode,
                   std::size_t voxel_resolution = kDefaultVoxelResolution);
// Same protocol with the ground-truth mesh standing in for the prediction.
EvalTable evaluate_reference(const Dataset& data, std::size_t voxel_resolution = kDefaultVoxelResolution);

struct AblationRow {
    std::string name;
    bool rps_on = false;
    bool cd_on = false;
    std::filesystem::path checkpoint;
    EvalTable gt;
    EvalTable pred;
};

struct AblationMatrix {
    std::vector<AblationRow> rows;  // baseline, +RPS, +RPS+CD

    nlohmann::json to_json() const;
    std::string to_text() const;
};

struct AblationVariant {
    std::string name;
    bool rps_on;
    bool cd_on;
};
inline const std::vector<AblationVariant> kAblationVariants{
    {"baseline", false, false}, {"+RPS", true, false}, {"+RPS+CD", true, true}};

// Trains each variant of `base` into out_dir/<variant> and evaluates it in both
// pose modes. A variant whose final checkpoint already exists with a matching
// configuration is evaluated without retraining.
AblationMatrix ablation_matrix(const TrainConfig& base, const Dataset& data, const std::filesystem::path& out_dir,
                               std::size_t voxel_resolution = kDefaultVoxelResolution,
                               const std::function<void(const std::string&)>& progress = {});

}  // namespace sketch3d
