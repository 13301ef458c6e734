#pragma once

#include "sketch3d/checkpoint.hpp"
#include "sketch3d/dataset.hpp"
#include "sketch3d/losses.hpp"
#include "sketch3d/networks.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <memory>
#include <ostream>
#include <random>
#include <string>
#include <vector>

namespace sketch3d {

// Invalid training configuration or a configuration that does not fit the data.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Supervision { pred, gt };
std::string_view supervision_name(Supervision s);
Supervision supervision_from_name(std::string_view name);

struct TrainConfig {
    ModelConfig model;
    LossWeights weights;
    std::size_t epochs = 2000;
    double lr = 1e-4;
    double lr_decay = 0.3;
    // The rate decays every 800 of 2000 epochs; shorter runs keep the proportion.
    double lr_decay_fraction = 0.4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    std::size_t batch_size = 8;
    std::size_t views = 3;
    PoseDistribution poses;
    double render_sigma = 1e-4;
    // Fraction of each discriminator stage spent fading in the new block.
    double fade_fraction = 0.3;
    std::uint64_t seed = 0;
    Supervision supervision = Supervision::pred;
    // Whether the silhouette loss in pred mode also trains the view predictor
    // through the rendering pose.
    bool pose_gradient = false;
    bool rps_on = true;
    bool cd_on = true;
    // Write an intermediate checkpoint every this many epochs; 0 writes only the final one.
    std::size_t checkpoint_every = 0;

    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// lr * decay^floor(epoch / (fraction * epochs)).
double learning_rate(const TrainConfig& config, std::size_t epoch);

struct DiscriminatorState {
    std::size_t stage = 0;
    double alpha = 1.0;
};
// Stages share the run evenly; alpha ramps linearly over the first fade_fraction of
// each stage after the first.
DiscriminatorState discriminator_schedule(const TrainConfig& config, std::size_t step, std::size_t total_steps);

using Batch = std::vector<const Sample*>;

struct StepLog {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double lr = 0.0;
    DiscriminatorState disc;
    LossReport g;
    double d_loss = 0.0;
};

void to_json(nlohmann::json& j, const StepLog& s);

class Trainer {
public:
    // Throws ConfigError when the configuration is invalid or does not match the data.
    Trainer(const TrainConfig& config, const Dataset& data);
    // Continues from a checkpoint written by a trainer on the same dataset.
    static Trainer resume(const Checkpoint& checkpoint, const Dataset& data);

    const TrainConfig& config() const { return config_; }
    Generator& generator() { return *generator_; }
    const Generator& generator() const { return *generator_; }
    // Null when rps_on is false.
    Discriminator* discriminator() { return discriminator_.get(); }
    std::size_t epoch() const { return epoch_; }
    std::size_t step() const { return step_; }
    std::size_t total_steps() const { return steps_per_epoch() * config_.epochs; }
    std::size_t steps_per_epoch() const;

    // One discriminator update on `batch`; generator parameters are untouched.
    double discriminator_step(const Batch& batch, std::mt19937_64& rng);
    // One generator update on `batch`; discriminator parameters are untouched.
    LossReport generator_step(const Batch& batch, std::mt19937_64& rng);

    // Runs the remaining epochs. Checkpoints go to `out_dir` and one JSON line per
    // step to `log` when given.
    void run(const std::filesystem::path& out_dir, std::ostream* log = nullptr,
             const std::function<void(const StepLog&)>& on_step = {});
    void run_epoch(std::ostream* log = nullptr, const std::function<void(const StepLog&)>& on_step = {});

    Checkpoint checkpoint() const;

private:
    // Generator outputs for a batch. random_meshes are decoded at freshly sampled
    // poses and stay empty without a discriminator.
    struct Forward {
        std::vector<ViewPrediction> views;
        std::vector<Tensor> conditioning;
        std::vector<Mesh> meshes;
        std::vector<Mesh> random_meshes;
    };

    Trainer(const TrainConfig& config, const Dataset& data, std::string dataset_digest);
    Forward forward(const Batch& batch, std::mt19937_64& rng) const;
    void apply_schedule();
    Tensor view_conditioning(const Tensor& predicted, const Sample& sample) const;
    Tensor to_disc_resolution(const Tensor& image) const;

    TrainConfig config_;
    const Dataset* data_;
    std::string dataset_digest_;
    std::unique_ptr<Generator> generator_;
    std::unique_ptr<Discriminator> discriminator_;
    AdamState adam_g_, adam_d_;
    std::vector<std::size_t> train_indices_;
    std::size_t epoch_ = 0;
    std::size_t step_ = 0;
};

inline constexpr std::string_view kFinalCheckpoint = "final.skf";
inline constexpr std::string_view kTrainLog = "train_log.jsonl";

// Configuration block stored in every training checkpoint.
nlohmann::json checkpoint_config(const TrainConfig& config, const std::string& dataset_digest);

// Builds a Trainer and runs it to completion; returns the final checkpoint path.
std::filesystem::path train(const TrainConfig& config, const Dataset& data, const std::filesystem::path& out_dir);
// Like train, but returns an existing final checkpoint in `out_dir` when it was
// produced by the same configuration on the same dataset.
std::filesystem::path ensure_trained(const TrainConfig& config, const Dataset& data, const std::filesystem::path& out_dir);

struct Prediction {
    Mesh mesh;
    CameraPose pose;
};

// Read-only generator restored from a checkpoint. Safe for concurrent use.
class InferenceModel {
public:
    static InferenceModel load(const std::filesystem::path& checkpoint_path);
    InferenceModel(const Checkpoint& checkpoint, std::string digest);

    std::size_t resolution() const { return generator_->config().resolution; }
    const std::string& digest() const { return digest_; }
    const Generator& generator() const { return *generator_; }

    // Mesh decoded at the predicted viewpoint, and that viewpoint.
    Prediction infer(const Tensor& image) const;
    // Mesh decoded with the view code of a known pose.
    Mesh infer_at(const Tensor& image, const CameraPose& pose) const;

private:
    std::shared_ptr<const Generator> generator_;
    std::string digest_;
};

struct DirectFitConfig {
    std::size_t steps = 2000;
    std::size_t resolution = 64;
    int subdivisions = 3;
    double lr = 1e-2;
    double sigma = 1e-4;
    double lambda_r = 0.1;
};

struct DirectFitResult {
    Mesh mesh;
    double mean_iou = 0.0;  // hard-silhouette IoU averaged over the target poses
};

// Fits free vertex offsets of an icosphere to the hard silhouettes of `target`
// without any network, minimising the pyramid IoU loss plus lambda_r * L_r.
DirectFitResult direct_fit(const Mesh& target, const std::vector<CameraPose>& poses, const DirectFitConfig& config);

// IoU of two binary maps (1 when both are empty).
double silhouette_iou(const Tensor& a, const Tensor& b);

}  // namespace sketch3d
