#include "sketch3d/evalkit.hpp"

#include "sketch3d/parallel.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace sketch3d {

namespace fs = std::filesystem;

std::string_view pose_mode_name(PoseMode m) { return m == PoseMode::gt ? "gt" : "pred"; }

PoseMode pose_mode_from_name(std::string_view name)
{
    if (name == "gt") return PoseMode::gt;
    if (name == "pred") return PoseMode::pred;
    throw ConfigError("pose mode must be 'gt' or 'pred', got '" + std::string(name) + "'");
}

EvalTable tabulate(PoseMode mode, std::size_t voxel_resolution, std::vector<SampleScore> samples)
{
    if (samples.empty()) throw std::invalid_argument("no samples to tabulate");
    EvalTable table;
    table.mode = mode;
    table.voxel_resolution = voxel_resolution;
    table.samples = std::move(samples);
    for (Category c : kCategories) {
        CategoryScore score{c, 0, 0.0};
        for (const auto& s : table.samples) {
            if (s.category != c) continue;
            ++score.count;
            score.mean += s.iou;
        }
        if (score.count == 0) continue;
        score.mean /= static_cast<double>(score.count);
        table.categories.push_back(score);
    }
    for (const auto& c : table.categories) table.mean += c.mean;
    table.mean /= static_cast<double>(table.categories.size());
    return table;
}

nlohmann::json EvalTable::to_json() const
{
    nlohmann::json cats = nlohmann::json::object();
    for (const auto& c : categories) cats[std::string(category_name(c.category))] = {{"mean", c.mean}, {"count", c.count}};
    nlohmann::json per_sample = nlohmann::json::array();
    for (const auto& s : samples) {
        per_sample.push_back({{"id", s.id}, {"category", category_name(s.category)}, {"iou", s.iou}});
    }
    return {{"mode", pose_mode_name(mode)},
            {"voxel_resolution", voxel_resolution},
            {"categories", cats},
            {"mean", mean},
            {"samples", per_sample}};
}

namespace {

constexpr int kLabelWidth = 12;
constexpr int kColumnWidth = 16;

std::string header_row(const std::vector<CategoryScore>& categories, std::string_view first)
{
    char buf[64];
    std::string out;
    std::snprintf(buf, sizeof buf, "%-*.*s", kLabelWidth, kLabelWidth, std::string(first).c_str());
    out += buf;
    for (const auto& c : categories) {
        std::snprintf(buf, sizeof buf, "%*s", kColumnWidth, std::string(category_name(c.category)).c_str());
        out += buf;
    }
    std::snprintf(buf, sizeof buf, "%*s", kColumnWidth, "mean");
    return out + buf + "\n";
}

std::string value_row(const EvalTable& t, std::string_view label)
{
    char buf[64];
    std::string out;
    std::snprintf(buf, sizeof buf, "%-*.*s", kLabelWidth, kLabelWidth, std::string(label).c_str());
    out += buf;
    for (const auto& c : t.categories) {
        std::snprintf(buf, sizeof buf, "%*.3f", kColumnWidth, c.mean);
        out += buf;
    }
    std::snprintf(buf, sizeof buf, "%*.3f", kColumnWidth, t.mean);
    return out + buf + "\n";
}

}  // namespace

std::string EvalTable::to_text(std::string_view row_label) const
{
    return header_row(categories, "") + value_row(*this, row_label);
}

double mesh_voxel_iou(const Mesh& predicted, const Mesh& reference, std::size_t voxel_resolution)
{
    return voxel_iou(voxelize(normalize_to_unit_sphere(predicted), voxel_resolution),
                     voxelize(normalize_to_unit_sphere(reference), voxel_resolution));
}

namespace {

template <class MeshFor>
EvalTable score_test_split(const Dataset& data, PoseMode mode, std::size_t voxel_resolution, MeshFor&& mesh_for)
{
    const auto test = data.split(Split::test);
    if (test.empty()) throw DatasetError("dataset has no test samples");
    std::vector<SampleScore> scores(test.size());
    parallel_for(test.size(), [&](std::size_t i) {
        const Sample& s = *test[i];
        const Mesh reference = data.mesh(s.record);
        scores[i] = {s.record.id, s.record.category, mesh_voxel_iou(mesh_for(s, reference), reference, voxel_resolution)};
    });
    return tabulate(mode, voxel_resolution, std::move(scores));
}

}  // namespace

EvalTable evaluate(const InferenceModel& model, const Dataset& data, PoseMode mode, std::size_t voxel_resolution)
{
    if (model.resolution() != data.resolution()) {
        throw ConfigError("model resolution " + std::to_string(model.resolution()) + " does not match dataset resolution " +
                          std::to_string(data.resolution()));
    }
    return score_test_split(data, mode, voxel_resolution, [&](const Sample& s, const Mesh&) {
        return mode == PoseMode::gt ? model.infer_at(s.sketch, s.record.pose) : model.infer(s.sketch).mesh;
    });
}

EvalTable evaluate_reference(const Dataset& data, std::size_t voxel_resolution)
{
    return score_test_split(data, PoseMode::gt, voxel_resolution, [](const Sample&, const Mesh& reference) { return reference; });
}

nlohmann::json AblationMatrix::to_json() const
{
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : rows) {
        out.push_back({{"name", r.name},
                       {"rps_on", r.rps_on},
                       {"cd_on", r.cd_on},
                       {"checkpoint", r.checkpoint.string()},
                       {"gt", r.gt.to_json()},
                       {"pred", r.pred.to_json()}});
    }
    return {{"rows", out}};
}

std::string AblationMatrix::to_text() const
{
    if (rows.empty()) return {};
    std::string out;
    for (PoseMode mode : {PoseMode::gt, PoseMode::pred}) {
        out += mode == PoseMode::gt ? "GT pose\n" : "Predicted pose\n";
        out += header_row(rows.front().gt.categories, "");
        for (const auto& r : rows) out += value_row(mode == PoseMode::gt ? r.gt : r.pred, r.name);
        if (mode == PoseMode::gt) out += "\n";
    }
    return out;
}

AblationMatrix ablation_matrix(const TrainConfig& base, const Dataset& data, const fs::path& out_dir,
                               std::size_t voxel_resolution, const std::function<void(const std::string&)>& progress)
{
    AblationMatrix matrix;
    for (const auto& variant : kAblationVariants) {
        TrainConfig config = base;
        config.rps_on = variant.rps_on;
        config.cd_on = variant.cd_on;
        const fs::path dir = out_dir / (variant.rps_on ? (variant.cd_on ? "rps_cd" : "rps") : "baseline");
        if (progress) progress("training " + variant.name + " in " + dir.string());
        AblationRow row;
        row.name = variant.name;
        row.rps_on = variant.rps_on;
        row.cd_on = variant.cd_on;
        row.checkpoint = ensure_trained(config, data, dir);
        const auto model = InferenceModel::load(row.checkpoint);
        if (progress) progress("evaluating " + variant.name);
        row.gt = evaluate(model, data, PoseMode::gt, voxel_resolution);
        row.pred = evaluate(model, data, PoseMode::pred, voxel_resolution);
        matrix.rows.push_back(std::move(row));
    }
    return matrix;
}

}  // namespace sketch3d
