#include "sketch3d/pipeline.hpp"

#include "sketch3d/digest.hpp"
#include "sketch3d/parallel.hpp"
#include "sketch3d/random.hpp"
#include "sketch3d/rasterizer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

namespace sketch3d {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kGeneratorSeedTag = 21, kDiscriminatorSeedTag = 22, kShuffleTag = 23, kStepTag = 24;

std::uint64_t derived_seed(std::uint64_t seed, std::uint64_t tag) { return make_rng(seed, tag)(); }

void set_grads(std::vector<Tensor>& params, const std::vector<Tensor>& grads)
{
    for (std::size_t i = 0; i < params.size(); ++i) params[i].set_grad(grads[i]);
}

AdamConfig adam_config(const TrainConfig& c, double lr) { return {lr, c.beta1, c.beta2, 1e-8}; }

std::vector<CameraPose> sample_poses(const PoseDistribution& dist, std::size_t n, std::mt19937_64& rng)
{
    std::vector<CameraPose> poses;
    for (std::size_t i = 0; i < n; ++i) poses.push_back(sample_pose(dist, rng));
    return poses;
}

}  // namespace

std::string_view supervision_name(Supervision s) { return s == Supervision::pred ? "pred" : "gt"; }

Supervision supervision_from_name(std::string_view name)
{
    if (name == "pred") return Supervision::pred;
    if (name == "gt") return Supervision::gt;
    throw ConfigError("supervision must be 'pred' or 'gt', got '" + std::string(name) + "'");
}

void TrainConfig::validate() const
{
    try {
        model.validate();
        weights.validate();
        poses.validate();
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr decay factor must be in (0, 1]");
    if (!(lr_decay_fraction > 0.0)) throw ConfigError("lr decay fraction must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must be in [0, 1)");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (views == 0) throw ConfigError("at least one view is required");
    if (!(render_sigma > 0.0)) throw ConfigError("render sigma must be positive");
    if (!(fade_fraction >= 0.0 && fade_fraction <= 1.0)) throw ConfigError("fade fraction must be in [0, 1]");
    if (weights.scale_weights.size() > 1 &&
        (model.resolution >> (weights.scale_weights.size() - 1)) < 1) {
        throw ConfigError("too many pyramid levels for the resolution");
    }
}

void to_json(nlohmann::json& j, const TrainConfig& c)
{
    j = {{"model", c.model},
         {"weights", c.weights},
         {"epochs", c.epochs},
         {"lr", c.lr},
         {"lr_decay", c.lr_decay},
         {"lr_decay_fraction", c.lr_decay_fraction},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"batch_size", c.batch_size},
         {"views", c.views},
         {"pose_distribution",
          {{"elevation_min", c.poses.elevation_min},
           {"elevation_max", c.poses.elevation_max},
           {"distance", c.poses.distance}}},
         {"render_sigma", c.render_sigma},
         {"fade_fraction", c.fade_fraction},
         {"seed", c.seed},
         {"supervision", supervision_name(c.supervision)},
         {"pose_gradient", c.pose_gradient},
         {"rps_on", c.rps_on},
         {"cd_on", c.cd_on},
         {"checkpoint_every", c.checkpoint_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& c)
{
    const TrainConfig d;
    c.model = j.value("model", d.model);
    c.weights = j.value("weights", d.weights);
    c.epochs = j.value("epochs", d.epochs);
    c.lr = j.value("lr", d.lr);
    c.lr_decay = j.value("lr_decay", d.lr_decay);
    c.lr_decay_fraction = j.value("lr_decay_fraction", d.lr_decay_fraction);
    c.beta1 = j.value("beta1", d.beta1);
    c.beta2 = j.value("beta2", d.beta2);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.views = j.value("views", d.views);
    if (j.contains("pose_distribution")) {
        const auto& p = j.at("pose_distribution");
        c.poses.elevation_min = p.value("elevation_min", d.poses.elevation_min);
        c.poses.elevation_max = p.value("elevation_max", d.poses.elevation_max);
        c.poses.distance = p.value("distance", d.poses.distance);
    }
    c.render_sigma = j.value("render_sigma", d.render_sigma);
    c.fade_fraction = j.value("fade_fraction", d.fade_fraction);
    c.seed = j.value("seed", d.seed);
    c.supervision = supervision_from_name(j.value("supervision", std::string(supervision_name(d.supervision))));
    c.pose_gradient = j.value("pose_gradient", d.pose_gradient);
    c.rps_on = j.value("rps_on", d.rps_on);
    c.cd_on = j.value("cd_on", d.cd_on);
    c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
}

double learning_rate(const TrainConfig& config, std::size_t epoch)
{
    const double period = config.lr_decay_fraction * static_cast<double>(config.epochs);
    const double decays = std::floor(static_cast<double>(epoch) / period);
    return config.lr * std::pow(config.lr_decay, decays);
}

DiscriminatorState discriminator_schedule(const TrainConfig& config, std::size_t step, std::size_t total_steps)
{
    const std::size_t stages = config.model.disc_stages();
    if (total_steps == 0) return {};
    const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
    const auto stage = std::min(stages - 1, static_cast<std::size_t>(progress * static_cast<double>(stages)));
    if (stage == 0) return {0, 1.0};
    const double within = progress * static_cast<double>(stages) - static_cast<double>(stage);
    const double alpha = config.fade_fraction == 0.0 ? 1.0 : std::min(1.0, within / config.fade_fraction);
    return {stage, alpha};
}

void to_json(nlohmann::json& j, const StepLog& s)
{
    j = {{"step", s.step},
         {"epoch", s.epoch},
         {"lr", s.lr},
         {"stage", s.disc.stage},
         {"alpha", s.disc.alpha},
         {"loss", {{"sp", s.g.sp}, {"r", s.g.r}, {"v", s.g.v}, {"sd", s.g.sd}, {"dd", s.g.dd}, {"total", s.g.total}}},
         {"d_loss", s.d_loss}};
}

// ---- trainer ----------------------------------------------------------------

Trainer::Trainer(const TrainConfig& config, const Dataset& data) : Trainer(config, data, manifest_digest(data.root)) {}

Trainer::Trainer(const TrainConfig& config, const Dataset& data, std::string dataset_digest)
    : config_(config), data_(&data), dataset_digest_(std::move(dataset_digest))
{
    config_.validate();
    if (data.resolution() != config_.model.resolution) {
        throw ConfigError("dataset resolution " + std::to_string(data.resolution()) + " does not match model resolution " +
                          std::to_string(config_.model.resolution));
    }
    for (std::size_t i = 0; i < data.samples.size(); ++i)
        if (data.samples[i].record.split == Split::train) train_indices_.push_back(i);
    if (train_indices_.empty()) throw ConfigError("dataset has no training samples");

    generator_ = std::make_unique<Generator>(config_.model, derived_seed(config_.seed, kGeneratorSeedTag));
    if (config_.rps_on) {
        const auto seed = derived_seed(config_.seed, kDiscriminatorSeedTag);
        if (config_.cd_on) {
            discriminator_ = std::make_unique<ProgressiveDiscriminator>(config_.model, seed);
        } else {
            discriminator_ = std::make_unique<MlpDiscriminator>(config_.model, seed);
        }
    }
    apply_schedule();
}

Trainer Trainer::resume(const Checkpoint& checkpoint, const Dataset& data)
{
    TrainConfig config;
    try {
        config = checkpoint.config.at("train").get<TrainConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint lacks a training configuration: ") + e.what());
    }
    const std::string digest = manifest_digest(data.root);
    if (checkpoint.config.value("dataset_digest", std::string()) != digest) {
        throw ConfigError("checkpoint was trained on a different dataset (manifest digest mismatch)");
    }
    Trainer t(config, data, digest);
    checkpoint.restore_parameters(t.generator_->params());
    t.adam_g_ = checkpoint.restore_adam_state("adam_g", t.generator_->params());
    if (t.discriminator_) {
        checkpoint.restore_parameters(t.discriminator_->params());
        t.adam_d_ = checkpoint.restore_adam_state("adam_d", t.discriminator_->params());
    }
    t.epoch_ = checkpoint.metadata.at("epoch").get<std::size_t>();
    t.step_ = checkpoint.metadata.at("step").get<std::size_t>();
    t.apply_schedule();
    return t;
}

std::size_t Trainer::steps_per_epoch() const
{
    return (train_indices_.size() + config_.batch_size - 1) / config_.batch_size;
}

void Trainer::apply_schedule()
{
    if (auto* progressive = dynamic_cast<ProgressiveDiscriminator*>(discriminator_.get())) {
        const auto state = discriminator_schedule(config_, step_, total_steps());
        progressive->set_state(state.stage, state.alpha);
    }
}

Tensor Trainer::view_conditioning(const Tensor& predicted, const Sample& sample) const
{
    return config_.supervision == Supervision::gt ? pose_embedding(sample.record.pose) : predicted;
}

Tensor Trainer::to_disc_resolution(const Tensor& image) const
{
    Tensor x = image;
    while (x.size(0) > discriminator_->input_resolution()) x = downsample2x(x);
    return x;
}

Trainer::Forward Trainer::forward(const Batch& batch, std::mt19937_64& rng) const
{
    Forward f;
    std::vector<Tensor> z_s, z_v;
    for (const Sample* sample : batch) {
        const auto codes = generator_->encode(sample->sketch);
        f.views.push_back(generator_->predict_view(codes.z_l));
        f.conditioning.push_back(view_conditioning(f.views.back().embedding, *sample));
        z_s.push_back(codes.z_s);
        z_v.push_back(generator_->view_embed(f.conditioning.back()));
    }
    if (discriminator_) {
        for (std::size_t i = 0; i < batch.size(); ++i) {
            z_s.push_back(z_s[i]);
            z_v.push_back(generator_->view_embed(pose_embedding(sample_pose(config_.poses, rng))));
        }
    }
    auto meshes = generator_->decode(z_s, z_v);
    f.meshes.assign(meshes.begin(), meshes.begin() + static_cast<std::ptrdiff_t>(batch.size()));
    f.random_meshes.assign(meshes.begin() + static_cast<std::ptrdiff_t>(batch.size()), meshes.end());
    return f;
}

double Trainer::discriminator_step(const Batch& batch, std::mt19937_64& rng)
{
    if (!discriminator_) throw ConfigError("discriminator step requested with random pose sampling disabled");
    const std::size_t res = config_.model.resolution;
    const std::size_t views = config_.views;
    std::vector<Tensor> real(batch.size() * views), fake(batch.size() * views);
    {
        NoGradGuard no_grad;
        const Forward f = forward(batch, rng);
        std::vector<CameraPose> poses;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            for (const auto& pose : sample_poses(config_.poses, views, rng)) poses.push_back(pose);
        }
        parallel_for(poses.size(), [&](std::size_t k) {
            real[k] = to_disc_resolution(soft_render(f.meshes[k / views], poses[k], res, config_.render_sigma));
            fake[k] = to_disc_resolution(soft_render(f.random_meshes[k / views], poses[k], res, config_.render_sigma));
        });
    }
    Tensor total;
    for (std::size_t n = 0; n < real.size(); ++n) {
        Tensor x = real[n].detach();
        x.set_requires_grad(true);
        const Tensor score_real = discriminator_->score(x);
        const Tensor score_fake = discriminator_->score(fake[n]);
        const Tensor r1 = config_.weights.r1_gamma > 0.0 ? gradient_norm_sq(score_real, x) : Tensor::scalar(0.0);
        const Tensor loss = discriminator_loss(score_real, score_fake, r1, config_.weights.r1_gamma);
        total = total.defined() ? add(total, loss) : loss;
    }
    total = mul_scalar(total, 1.0 / static_cast<double>(real.size()));
    const double value = total.item();
    if (!std::isfinite(value)) throw LossError("d", "non-finite discriminator loss");

    auto params = discriminator_->params().tensors();
    set_grads(params, grad(total, params));
    adam_step(params, adam_d_, adam_config(config_, learning_rate(config_, epoch_)));
    return value;
}

LossReport Trainer::generator_step(const Batch& batch, std::mt19937_64& rng)
{
    const std::size_t res = config_.model.resolution;
    const std::size_t levels = config_.weights.scale_weights.size();
    const double share = 1.0 / static_cast<double>(batch.size());
    const Forward f = forward(batch, rng);
    Tensor total;
    LossReport mean;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const Sample& sample = *batch[i];
        Tensor render_pose = f.conditioning[i];
        if (config_.supervision == Supervision::pred && !config_.pose_gradient) render_pose = render_pose.detach();
        const Tensor silhouette = soft_render(f.meshes[i], render_pose, res, config_.render_sigma);

        LossTerms terms;
        terms.sp = multiscale_iou(silhouette_pyramid(silhouette, levels), silhouette_pyramid(sample.silhouette, levels),
                                  config_.weights.scale_weights);
        terms.r = regularizer_bundle(f.meshes[i], generator_->topology());
        terms.v = viewpoint_loss(f.views[i].embedding, pose_embedding(sample.record.pose));
        if (discriminator_) {
            Tensor adv;
            for (const auto& pose : sample_poses(config_.poses, config_.views, rng)) {
                const Tensor image = to_disc_resolution(soft_render(f.random_meshes[i], pose, res, config_.render_sigma));
                const Tensor term = generator_adv_loss(discriminator_->score(image));
                adv = adv.defined() ? add(adv, term) : term;
            }
            terms.sd = mul_scalar(adv, 1.0 / static_cast<double>(config_.views));
        }
        LossReport report;
        const Tensor loss = total_loss(terms, config_.weights, &report);
        total = total.defined() ? add(total, loss) : loss;
        mean.sp += share * report.sp;
        mean.r += share * report.r;
        mean.v += share * report.v;
        mean.sd += share * report.sd;
        mean.total += share * report.total;
    }
    total = mul_scalar(total, share);

    auto params = generator_->params().tensors();
    set_grads(params, grad(total, params));
    adam_step(params, adam_g_, adam_config(config_, learning_rate(config_, epoch_)));
    return mean;
}

void Trainer::run_epoch(std::ostream* log, const std::function<void(const StepLog&)>& on_step)
{
    std::vector<std::size_t> order = train_indices_;
    auto shuffle_rng = make_rng(config_.seed, kShuffleTag, epoch_);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    const auto started = std::chrono::steady_clock::now();
    for (std::size_t begin = 0; begin < order.size(); begin += config_.batch_size) {
        Batch batch;
        for (std::size_t i = begin; i < std::min(order.size(), begin + config_.batch_size); ++i) {
            batch.push_back(&data_->samples[order[i]]);
        }
        apply_schedule();
        auto rng = make_rng(config_.seed, kStepTag, step_);
        StepLog entry;
        entry.step = step_;
        entry.epoch = epoch_;
        entry.lr = learning_rate(config_, epoch_);
        if (auto* progressive = dynamic_cast<ProgressiveDiscriminator*>(discriminator_.get())) {
            entry.disc = {progressive->stage(), progressive->alpha()};
        }
        if (discriminator_) entry.d_loss = discriminator_step(batch, rng);
        entry.g = generator_step(batch, rng);
        ++step_;
        if (log) {
            nlohmann::json line = entry;
            line["elapsed_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
            *log << line.dump() << '\n';
        }
        if (on_step) on_step(entry);
    }
    ++epoch_;
}

void Trainer::run(const fs::path& out_dir, std::ostream* log, const std::function<void(const StepLog&)>& on_step)
{
    fs::create_directories(out_dir);
    while (epoch_ < config_.epochs) {
        run_epoch(log, on_step);
        if (log) log->flush();
        if (config_.checkpoint_every != 0 && epoch_ % config_.checkpoint_every == 0 && epoch_ < config_.epochs) {
            char name[32];
            std::snprintf(name, sizeof name, "epoch_%05zu.skf", epoch_);
            save_checkpoint((out_dir / name).string(), checkpoint());
        }
    }
    save_checkpoint((out_dir / kFinalCheckpoint).string(), checkpoint());
}

Checkpoint Trainer::checkpoint() const
{
    Checkpoint c;
    c.config = checkpoint_config(config_, dataset_digest_);
    c.metadata = {{"epoch", epoch_}, {"step", step_}, {"lr", learning_rate(config_, epoch_)}};
    c.add_parameters(generator_->params());
    c.add_adam_state("adam_g", generator_->params(), adam_g_);
    if (discriminator_) {
        c.metadata["discriminator"] = discriminator_->kind();
        if (const auto* progressive = dynamic_cast<const ProgressiveDiscriminator*>(discriminator_.get())) {
            c.metadata["stage"] = progressive->stage();
            c.metadata["alpha"] = progressive->alpha();
        }
        c.add_parameters(discriminator_->params());
        c.add_adam_state("adam_d", discriminator_->params(), adam_d_);
    }
    return c;
}

nlohmann::json checkpoint_config(const TrainConfig& config, const std::string& dataset_digest)
{
    return {{"train", config}, {"dataset_digest", dataset_digest}};
}

fs::path ensure_trained(const TrainConfig& config, const Dataset& data, const fs::path& out_dir)
{
    const fs::path final_path = out_dir / kFinalCheckpoint;
    if (fs::exists(final_path)) {
        try {
            const auto existing = load_checkpoint(final_path.string());
            if (existing.config == checkpoint_config(config, manifest_digest(data.root))) return final_path;
        } catch (const CheckpointError&) {
            // unreadable leftovers are replaced below
        }
    }
    return train(config, data, out_dir);
}

fs::path train(const TrainConfig& config, const Dataset& data, const fs::path& out_dir)
{
    Trainer trainer(config, data);
    fs::create_directories(out_dir);
    std::ofstream log(out_dir / kTrainLog, std::ios::trunc);
    trainer.run(out_dir, &log);
    return out_dir / kFinalCheckpoint;
}

// ---- inference --------------------------------------------------------------

InferenceModel InferenceModel::load(const fs::path& checkpoint_path)
{
    std::ifstream in(checkpoint_path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + checkpoint_path.string());
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return InferenceModel(deserialize(bytes), sha256_hex(bytes));
}

InferenceModel::InferenceModel(const Checkpoint& checkpoint, std::string digest) : digest_(std::move(digest))
{
    ModelConfig model;
    try {
        model = checkpoint.config.at("train").at("model").get<ModelConfig>();
        model.validate();
    } catch (const std::exception& e) {
        throw CheckpointError(std::string("checkpoint has an unusable model configuration: ") + e.what());
    }
    auto generator = std::make_shared<Generator>(model, 0);
    checkpoint.restore_parameters(generator->params());
    generator_ = std::move(generator);
}

Prediction InferenceModel::infer(const Tensor& image) const
{
    NoGradGuard no_grad;
    const auto codes = generator_->encode(image);
    const auto view = generator_->predict_view(codes.z_l);
    return {generator_->decode(codes.z_s, generator_->view_embed(view.embedding)), view.pose};
}

Mesh InferenceModel::infer_at(const Tensor& image, const CameraPose& pose) const
{
    NoGradGuard no_grad;
    const auto codes = generator_->encode(image);
    return generator_->decode(codes.z_s, generator_->view_embed(pose_embedding(pose)));
}

// ---- direct fit -------------------------------------------------------------

double silhouette_iou(const Tensor& a, const Tensor& b)
{
    if (a.shape() != b.shape()) throw RasterError("silhouette shapes differ");
    std::size_t inter = 0, uni = 0;
    const auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < av.size(); ++i) {
        const bool x = av[i] >= 0.5, y = bv[i] >= 0.5;
        inter += x && y;
        uni += x || y;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

DirectFitResult direct_fit(const Mesh& target, const std::vector<CameraPose>& poses, const DirectFitConfig& config)
{
    if (poses.empty()) throw ConfigError("direct fit needs at least one pose");
    const Mesh base = icosphere(config.subdivisions);
    const MeshTopology topology = build_topology(base.faces, base.vertex_count());
    const std::vector<double> scale_weights{1.0, 1.0, 1.0};

    std::vector<std::vector<Tensor>> targets;
    std::vector<Tensor> hard_targets;
    for (const auto& pose : poses) {
        hard_targets.push_back(hard_render(target, pose, config.resolution));
        targets.push_back(silhouette_pyramid(hard_targets.back(), scale_weights.size()));
    }

    Tensor offsets(base.vertices.shape());
    offsets.set_requires_grad(true);
    std::vector<Tensor> params{offsets};
    AdamState adam;
    const AdamConfig adam_cfg{config.lr, 0.9, 0.999, 1e-8};
    for (std::size_t step = 0; step < config.steps; ++step) {
        const Mesh mesh = apply_offsets(base, offsets);
        Tensor loss = mul_scalar(regularizer_bundle(mesh, topology), config.lambda_r);
        for (std::size_t i = 0; i < poses.size(); ++i) {
            const Tensor s = soft_render(mesh, poses[i], config.resolution, config.sigma);
            loss = add(loss, mul_scalar(multiscale_iou(silhouette_pyramid(s, scale_weights.size()), targets[i], scale_weights),
                                        1.0 / static_cast<double>(poses.size())));
        }
        if (!std::isfinite(loss.item())) throw LossError("sp", "non-finite loss during direct fit");
        set_grads(params, grad(loss, params));
        adam_step(params, adam, adam_cfg);
    }

    DirectFitResult result;
    result.mesh = apply_offsets(base, offsets.detach());
    for (std::size_t i = 0; i < poses.size(); ++i) {
        result.mean_iou += silhouette_iou(hard_render(result.mesh, poses[i], config.resolution), hard_targets[i]) /
                           static_cast<double>(poses.size());
    }
    return result;
}

}  // namespace sketch3d
