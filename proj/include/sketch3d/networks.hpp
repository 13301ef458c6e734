#pragma once

#include "sketch3d/geometry.hpp"
#include "sketch3d/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <memory>
#include <random>
#include <stdexcept>
#include <span>
#include <string>
#include <vector>

namespace sketch3d {

class NetworkError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ModelConfig {
    std::size_t resolution = 64;
    std::vector<std::size_t> encoder_channels{16, 32, 64, 128};
    std::size_t feature_dim = 512;
    std::size_t code_dim = 512;
    std::size_t view_hidden = 128;
    std::vector<std::size_t> decoder_hidden{512, 1024};
    int template_subdivisions = 3;
    double max_offset = 1.0;
    std::size_t disc_base_resolution = 16;
    std::size_t disc_max_resolution = 64;
    std::size_t disc_base_channels = 16;
    std::size_t mlp_hidden = 64;
    double leaky_slope = 0.2;

    void validate() const;
    std::size_t disc_stages() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Ordered, named set of trainable tensors.
class ParameterStore {
public:
    // Registers `init` as a leaf that requires grad.
    Tensor add(std::string name, Tensor init);
    const Tensor& get(const std::string& name) const;
    // Overwrites values in place (shape must match); used when loading checkpoints.
    void assign(const std::string& name, const Tensor& value);

    std::vector<Tensor> tensors() const;
    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
    std::size_t count() const;
    void zero_grad();

private:
    std::vector<std::pair<std::string, Tensor>> items_;
};

// Normal draw with standard deviation sqrt(2 / fan_in).
Tensor he_normal(const Shape& shape, std::size_t fan_in, std::mt19937_64& rng);

struct EncoderOutput {
    Tensor z_s;  // [code_dim], unit norm
    Tensor z_l;  // [code_dim], unit norm
};

struct ViewPrediction {
    Tensor embedding;  // [4]: sin az, cos az, sin el, cos el
    CameraPose pose;
};

// Encoder, viewpoint predictor, view-embedding head and mesh decoder.
class Generator {
public:
    Generator(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }
    const Mesh& template_mesh() const { return template_; }
    const MeshTopology& topology() const { return topology_; }

    // image: [H, W] with H = W = config resolution.
    EncoderOutput encode(const Tensor& image) const;
    ViewPrediction predict_view(const Tensor& z_l) const;
    Tensor view_embed(const Tensor& pose_embedding) const;
    Mesh decode(const Tensor& z_s, const Tensor& z_v) const;
    // One mesh per code pair, sharing a single pass through the decoder weights.
    std::vector<Mesh> decode(std::span<const Tensor> z_s, std::span<const Tensor> z_v) const;

private:
    Tensor linear(const Tensor& x, const std::string& name) const;

    ModelConfig config_;
    ParameterStore params_;
    Mesh template_;
    MeshTopology topology_;
};

class Discriminator {
public:
    virtual ~Discriminator() = default;
    // Scalar score [1] for an [H, W] silhouette at input_resolution().
    virtual Tensor score(const Tensor& image) const = 0;
    virtual std::size_t input_resolution() const = 0;
    virtual ParameterStore& params() = 0;
    virtual const ParameterStore& params() const = 0;
    virtual std::string kind() const = 0;
};

// Convolutional critic grown from disc_base_resolution to disc_max_resolution. Each
// stage's input block is drawn from its own seeded stream, so growing yields the
// same weights whenever it happens.
class ProgressiveDiscriminator final : public Discriminator {
public:
    ProgressiveDiscriminator(const ModelConfig& config, std::uint64_t seed);

    Tensor score(const Tensor& image) const override;
    std::size_t input_resolution() const override;
    ParameterStore& params() override { return params_; }
    const ParameterStore& params() const override { return params_; }
    std::string kind() const override { return "progressive"; }

    std::size_t stage() const { return stage_; }
    double alpha() const { return alpha_; }
    std::size_t max_stage() const { return config_.disc_stages() - 1; }
    // Alpha must not decrease within a stage.
    void set_alpha(double alpha);
    // Advances one stage with alpha reset to 0.
    void grow();
    // Restores a saved (stage, alpha) pair.
    void set_state(std::size_t stage, double alpha);

private:
    std::size_t channels(std::size_t resolution) const;
    Tensor conv(const Tensor& x, const std::string& name, std::size_t pad) const;
    Tensor from_gray(const Tensor& x, std::size_t resolution) const;
    Tensor block(const Tensor& h, std::size_t resolution) const;
    Tensor head(const Tensor& h) const;

    ModelConfig config_;
    ParameterStore params_;
    std::size_t stage_ = 0;
    double alpha_ = 1.0;
};

// Flatten -> FC -> FC -> FC critic at full resolution.
class MlpDiscriminator final : public Discriminator {
public:
    MlpDiscriminator(const ModelConfig& config, std::uint64_t seed);

    Tensor score(const Tensor& image) const override;
    std::size_t input_resolution() const override { return config_.resolution; }
    ParameterStore& params() override { return params_; }
    const ParameterStore& params() const override { return params_; }
    std::string kind() const override { return "mlp"; }

private:
    ModelConfig config_;
    ParameterStore params_;
};

// Unit-norm rescaling as part of the graph.
Tensor l2_normalize(const Tensor& x);

}  // namespace sketch3d
