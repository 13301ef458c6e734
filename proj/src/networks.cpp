#include "sketch3d/networks.hpp"

#include "sketch3d/random.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace sketch3d {

namespace {

constexpr std::uint64_t kEncoderTag = 1, kViewTag = 2, kDecoderTag = 3, kProgressiveTag = 4, kMlpTag = 5;

Tensor as_row(const Tensor& x)
{
    if (x.rank() == 2 && x.size(0) == 1) return x;
    return reshape(x, {1, x.numel()});
}

}  // namespace

void ModelConfig::validate() const
{
    if (resolution == 0 || (resolution & (resolution - 1)) != 0) {
        throw NetworkError("resolution must be a power of two, got " + std::to_string(resolution));
    }
    if (encoder_channels.empty()) throw NetworkError("encoder needs at least one block");
    const std::size_t factor = std::size_t{1} << encoder_channels.size();
    if (resolution < factor) throw NetworkError("too many encoder blocks for resolution " + std::to_string(resolution));
    if (feature_dim == 0 || code_dim == 0 || view_hidden == 0 || mlp_hidden == 0) {
        throw NetworkError("layer widths must be positive");
    }
    for (auto c : encoder_channels)
        if (c == 0) throw NetworkError("encoder channels must be positive");
    for (auto h : decoder_hidden)
        if (h == 0) throw NetworkError("decoder widths must be positive");
    if (template_subdivisions < 0 || template_subdivisions > 5) throw NetworkError("template subdivisions must be in [0, 5]");
    if (!(max_offset > 0.0)) throw NetworkError("max_offset must be positive");
    const auto pow2 = [](std::size_t x) { return x != 0 && (x & (x - 1)) == 0; };
    if (!pow2(disc_base_resolution) || !pow2(disc_max_resolution) || disc_base_resolution < 4 ||
        disc_max_resolution < disc_base_resolution || disc_max_resolution > resolution) {
        throw NetworkError("discriminator resolutions must be powers of two with 4 <= base <= max <= resolution");
    }
    if (disc_base_channels == 0) throw NetworkError("discriminator channels must be positive");
}

std::size_t ModelConfig::disc_stages() const
{
    std::size_t stages = 1;
    for (std::size_t r = disc_base_resolution; r < disc_max_resolution; r *= 2) ++stages;
    return stages;
}

void to_json(nlohmann::json& j, const ModelConfig& c)
{
    j = nlohmann::json{{"resolution", c.resolution},
                       {"encoder_channels", c.encoder_channels},
                       {"feature_dim", c.feature_dim},
                       {"code_dim", c.code_dim},
                       {"view_hidden", c.view_hidden},
                       {"decoder_hidden", c.decoder_hidden},
                       {"template_subdivisions", c.template_subdivisions},
                       {"max_offset", c.max_offset},
                       {"disc_base_resolution", c.disc_base_resolution},
                       {"disc_max_resolution", c.disc_max_resolution},
                       {"disc_base_channels", c.disc_base_channels},
                       {"mlp_hidden", c.mlp_hidden},
                       {"leaky_slope", c.leaky_slope}};
}

void from_json(const nlohmann::json& j, ModelConfig& c)
{
    const ModelConfig d;
    c.resolution = j.value("resolution", d.resolution);
    c.encoder_channels = j.value("encoder_channels", d.encoder_channels);
    c.feature_dim = j.value("feature_dim", d.feature_dim);
    c.code_dim = j.value("code_dim", d.code_dim);
    c.view_hidden = j.value("view_hidden", d.view_hidden);
    c.decoder_hidden = j.value("decoder_hidden", d.decoder_hidden);
    c.template_subdivisions = j.value("template_subdivisions", d.template_subdivisions);
    c.max_offset = j.value("max_offset", d.max_offset);
    c.disc_base_resolution = j.value("disc_base_resolution", d.disc_base_resolution);
    c.disc_max_resolution = j.value("disc_max_resolution", d.disc_max_resolution);
    c.disc_base_channels = j.value("disc_base_channels", d.disc_base_channels);
    c.mlp_hidden = j.value("mlp_hidden", d.mlp_hidden);
    c.leaky_slope = j.value("leaky_slope", d.leaky_slope);
}

Tensor ParameterStore::add(std::string name, Tensor init)
{
    for (const auto& [existing, _] : items_)
        if (existing == name) throw NetworkError("duplicate parameter " + name);
    init.set_requires_grad(true);
    items_.emplace_back(std::move(name), init);
    return init;
}

const Tensor& ParameterStore::get(const std::string& name) const
{
    for (const auto& [n, t] : items_)
        if (n == name) return t;
    throw NetworkError("unknown parameter " + name);
}

void ParameterStore::assign(const std::string& name, const Tensor& value)
{
    const Tensor& target = get(name);
    if (target.shape() != value.shape()) {
        throw NetworkError("parameter " + name + " expects " + shape_str(target.shape()) + ", got " +
                           shape_str(value.shape()));
    }
    Tensor t = target;
    std::copy(value.values().begin(), value.values().end(), t.mutable_values().begin());
}

std::vector<Tensor> ParameterStore::tensors() const
{
    std::vector<Tensor> out;
    out.reserve(items_.size());
    for (const auto& [_, t] : items_) out.push_back(t);
    return out;
}

std::size_t ParameterStore::count() const
{
    std::size_t n = 0;
    for (const auto& [_, t] : items_) n += t.numel();
    return n;
}

void ParameterStore::zero_grad()
{
    for (auto& [_, t] : items_) t.zero_grad();
}

Tensor he_normal(const Shape& shape, std::size_t fan_in, std::mt19937_64& rng)
{
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    Tensor t(shape);
    for (auto& v : t.mutable_values()) v = dist(rng);
    return t;
}

Tensor l2_normalize(const Tensor& x)
{
    const Tensor norm = sqrt(add_scalar(sum(square(x)), 1e-30));
    return div(x, norm);
}

// ---- generator --------------------------------------------------------------

Generator::Generator(const ModelConfig& config, std::uint64_t seed) : config_(config)
{
    config_.validate();
    template_ = icosphere(config_.template_subdivisions);
    topology_ = build_topology(template_.faces, template_.vertex_count());

    auto dense = [this](const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng, bool zero) {
        params_.add(name + ".w", zero ? Tensor({in, out}) : he_normal({in, out}, in, rng));
        params_.add(name + ".b", Tensor({1, out}));
    };

    auto rng = make_rng(seed, kEncoderTag);
    std::size_t in_channels = 1;
    for (std::size_t i = 0; i < config_.encoder_channels.size(); ++i) {
        const std::size_t out = config_.encoder_channels[i];
        const std::string name = "encoder.conv" + std::to_string(i);
        params_.add(name + ".w", he_normal({out, in_channels, 3, 3}, in_channels * 9, rng));
        params_.add(name + ".b", Tensor({out}));
        in_channels = out;
    }
    const std::size_t side = config_.resolution >> config_.encoder_channels.size();
    dense("encoder.fc", in_channels * side * side, config_.feature_dim, rng, false);
    dense("encoder.shape_head", config_.feature_dim, config_.code_dim, rng, false);
    dense("encoder.view_head", config_.feature_dim, config_.code_dim, rng, false);

    rng = make_rng(seed, kViewTag);
    dense("view_predictor.fc0", config_.code_dim, config_.view_hidden, rng, false);
    dense("view_predictor.fc1", config_.view_hidden, 3, rng, false);
    dense("view_embed.fc0", 4, config_.view_hidden, rng, false);
    dense("view_embed.fc1", config_.view_hidden, config_.code_dim, rng, false);

    rng = make_rng(seed, kDecoderTag);
    std::size_t width = 2 * config_.code_dim;
    for (std::size_t i = 0; i < config_.decoder_hidden.size(); ++i) {
        dense("decoder.fc" + std::to_string(i), width, config_.decoder_hidden[i], rng, false);
        width = config_.decoder_hidden[i];
    }
    dense("decoder.out", width, 3 * template_.vertex_count(), rng, true);
}

Tensor Generator::linear(const Tensor& x, const std::string& name) const
{
    return add(matmul(as_row(x), params_.get(name + ".w")), params_.get(name + ".b"));
}

EncoderOutput Generator::encode(const Tensor& image) const
{
    const std::size_t n = config_.resolution;
    if (image.rank() != 2 || image.size(0) != n || image.size(1) != n) {
        throw NetworkError("encoder expects a " + std::to_string(n) + "x" + std::to_string(n) + " image, got " +
                           shape_str(image.shape()));
    }
    Tensor h = reshape(image, {1, n, n});
    std::size_t side = n;
    for (std::size_t i = 0; i < config_.encoder_channels.size(); ++i) {
        const std::string name = "encoder.conv" + std::to_string(i);
        h = conv2d(h, params_.get(name + ".w"), {1, 1});
        h = relu(add(h, broadcast_channels(params_.get(name + ".b"), side, side)));
        h = downsample2x(h);
        side /= 2;
    }
    const Tensor features = relu(linear(h, "encoder.fc"));
    return {reshape(l2_normalize(linear(features, "encoder.shape_head")), {config_.code_dim}),
            reshape(l2_normalize(linear(features, "encoder.view_head")), {config_.code_dim})};
}

ViewPrediction Generator::predict_view(const Tensor& z_l) const
{
    const Tensor raw = reshape(linear(relu(linear(z_l, "view_predictor.fc0")), "view_predictor.fc1"), {3, 1});
    const Tensor e_raw = slice(raw, 0, 1), s = slice(raw, 1, 2), c = slice(raw, 2, 3);
    const Tensor elevation = mul_scalar(tanh(e_raw), std::numbers::pi / 2.0);
    const Tensor r = sqrt(add_scalar(add(square(s), square(c)), 1e-12));
    const Tensor embedding = reshape(concat({div(s, r), div(c, r), sin(elevation), cos(elevation)}), {4});

    const double el_deg = elevation.item() * 180.0 / std::numbers::pi;
    const double az_deg = std::atan2(s.item(), c.item()) * 180.0 / std::numbers::pi;
    return {embedding, CameraPose::normalized(el_deg, az_deg)};
}

Tensor Generator::view_embed(const Tensor& pose_embedding) const
{
    if (pose_embedding.numel() != 4) throw NetworkError("view embedding expects 4 pose features");
    return reshape(linear(relu(linear(pose_embedding, "view_embed.fc0")), "view_embed.fc1"), {config_.code_dim});
}

Mesh Generator::decode(const Tensor& z_s, const Tensor& z_v) const
{
    return decode(std::vector<Tensor>{z_s}, std::vector<Tensor>{z_v}).front();
}

std::vector<Mesh> Generator::decode(std::span<const Tensor> z_s, std::span<const Tensor> z_v) const
{
    if (z_s.empty() || z_s.size() != z_v.size()) throw NetworkError("decoder expects matching non-empty code lists");
    std::vector<Tensor> rows;
    for (std::size_t i = 0; i < z_s.size(); ++i) {
        if (z_s[i].numel() != config_.code_dim || z_v[i].numel() != config_.code_dim) {
            throw NetworkError("decoder expects two codes of size " + std::to_string(config_.code_dim));
        }
        rows.push_back(reshape(concat({reshape(z_s[i], {config_.code_dim}), reshape(z_v[i], {config_.code_dim})}),
                               {1, 2 * config_.code_dim}));
    }
    const std::size_t batch = rows.size();
    const Tensor ones({batch, 1}, 1.0);
    const auto batched_linear = [&](const Tensor& x, const std::string& name) {
        return add(matmul(x, params_.get(name + ".w")), matmul(ones, params_.get(name + ".b")));
    };
    Tensor h = batch == 1 ? rows.front() : concat(rows);
    for (std::size_t i = 0; i < config_.decoder_hidden.size(); ++i) {
        h = relu(batched_linear(h, "decoder.fc" + std::to_string(i)));
    }
    // each component bounded by max_offset / sqrt(3), so every offset has norm <= max_offset
    const Tensor offsets = mul_scalar(tanh(batched_linear(h, "decoder.out")), config_.max_offset / std::sqrt(3.0));
    std::vector<Mesh> meshes;
    for (std::size_t b = 0; b < batch; ++b) {
        const Tensor row = batch == 1 ? offsets : slice(offsets, b, b + 1);
        meshes.push_back(apply_offsets(template_, reshape(row, {template_.vertex_count(), 3})));
    }
    return meshes;
}

// ---- progressive discriminator ---------------------------------------------

ProgressiveDiscriminator::ProgressiveDiscriminator(const ModelConfig& config, std::uint64_t seed) : config_(config)
{
    config_.validate();
    const std::size_t base = config_.disc_base_resolution;
    {
        auto rng = make_rng(seed, kProgressiveTag, 0);
        const std::size_t c = channels(base);
        params_.add("disc.from_gray" + std::to_string(base) + ".w", he_normal({c, 1, 1, 1}, 1, rng));
        params_.add("disc.from_gray" + std::to_string(base) + ".b", Tensor({c}));
        params_.add("disc.base.conv0.w", he_normal({c, c, 3, 3}, c * 9, rng));
        params_.add("disc.base.conv0.b", Tensor({c}));
        params_.add("disc.base.conv1.w", he_normal({c, c, 3, 3}, c * 9, rng));
        params_.add("disc.base.conv1.b", Tensor({c}));
        const std::size_t flat = c * (base / 4) * (base / 4);
        params_.add("disc.base.fc.w", he_normal({flat, 1}, flat, rng));
        params_.add("disc.base.fc.b", Tensor({1, 1}));
    }
    for (std::size_t stage = 1; stage < config_.disc_stages(); ++stage) {
        auto rng = make_rng(seed, kProgressiveTag, stage);
        const std::size_t r = base << stage;
        const std::size_t c = channels(r), c_out = channels(r / 2);
        params_.add("disc.from_gray" + std::to_string(r) + ".w", he_normal({c, 1, 1, 1}, 1, rng));
        params_.add("disc.from_gray" + std::to_string(r) + ".b", Tensor({c}));
        params_.add("disc.block" + std::to_string(r) + ".w", he_normal({c_out, c, 3, 3}, c * 9, rng));
        params_.add("disc.block" + std::to_string(r) + ".b", Tensor({c_out}));
    }
}

std::size_t ProgressiveDiscriminator::channels(std::size_t resolution) const
{
    return std::max<std::size_t>(4, config_.disc_base_channels * config_.disc_base_resolution / resolution);
}

std::size_t ProgressiveDiscriminator::input_resolution() const { return config_.disc_base_resolution << stage_; }

void ProgressiveDiscriminator::set_alpha(double alpha)
{
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw NetworkError("alpha must be in [0, 1]");
    if (alpha < alpha_) throw NetworkError("alpha must not decrease within a stage");
    alpha_ = alpha;
}

void ProgressiveDiscriminator::grow()
{
    if (stage_ >= max_stage()) {
        throw NetworkError("discriminator already at its maximum resolution " + std::to_string(input_resolution()));
    }
    ++stage_;
    alpha_ = 0.0;
}

void ProgressiveDiscriminator::set_state(std::size_t stage, double alpha)
{
    if (stage > max_stage()) throw NetworkError("stage " + std::to_string(stage) + " exceeds the maximum");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw NetworkError("alpha must be in [0, 1]");
    stage_ = stage;
    alpha_ = alpha;
}

Tensor ProgressiveDiscriminator::conv(const Tensor& x, const std::string& name, std::size_t pad) const
{
    const Tensor y = conv2d(x, params_.get(name + ".w"), {1, pad});
    return leaky_relu(add(y, broadcast_channels(params_.get(name + ".b"), y.size(1), y.size(2))), config_.leaky_slope);
}

Tensor ProgressiveDiscriminator::from_gray(const Tensor& x, std::size_t resolution) const
{
    return conv(x, "disc.from_gray" + std::to_string(resolution), 0);
}

Tensor ProgressiveDiscriminator::block(const Tensor& h, std::size_t resolution) const
{
    return downsample2x(conv(h, "disc.block" + std::to_string(resolution), 1));
}

Tensor ProgressiveDiscriminator::head(const Tensor& h) const
{
    Tensor x = downsample2x(conv(h, "disc.base.conv0", 1));
    x = downsample2x(conv(x, "disc.base.conv1", 1));
    const Tensor out = add(matmul(reshape(x, {1, x.numel()}), params_.get("disc.base.fc.w")), params_.get("disc.base.fc.b"));
    return reshape(out, {1});
}

Tensor ProgressiveDiscriminator::score(const Tensor& image) const
{
    const std::size_t r = input_resolution();
    if (image.rank() != 2 || image.size(0) != r || image.size(1) != r) {
        throw NetworkError("discriminator at stage " + std::to_string(stage_) + " expects " + std::to_string(r) + "x" +
                           std::to_string(r) + ", got " + shape_str(image.shape()));
    }
    const Tensor x = reshape(image, {1, r, r});
    if (stage_ == 0) return head(from_gray(x, r));

    Tensor h;
    if (alpha_ == 0.0) {
        h = from_gray(downsample2x(x), r / 2);
    } else if (alpha_ == 1.0) {
        h = block(from_gray(x, r), r);
    } else {
        const Tensor fresh = block(from_gray(x, r), r);
        const Tensor old = from_gray(downsample2x(x), r / 2);
        h = add(mul_scalar(fresh, alpha_), mul_scalar(old, 1.0 - alpha_));
    }
    for (std::size_t res = r / 2; res > config_.disc_base_resolution; res /= 2) h = block(h, res);
    return head(h);
}

// ---- MLP discriminator ------------------------------------------------------

MlpDiscriminator::MlpDiscriminator(const ModelConfig& config, std::uint64_t seed) : config_(config)
{
    config_.validate();
    auto rng = make_rng(seed, kMlpTag);
    const std::size_t in = config_.resolution * config_.resolution, h = config_.mlp_hidden;
    params_.add("mlp.fc0.w", he_normal({in, h}, in, rng));
    params_.add("mlp.fc0.b", Tensor({1, h}));
    params_.add("mlp.fc1.w", he_normal({h, h}, h, rng));
    params_.add("mlp.fc1.b", Tensor({1, h}));
    params_.add("mlp.fc2.w", he_normal({h, 1}, h, rng));
    params_.add("mlp.fc2.b", Tensor({1, 1}));
}

Tensor MlpDiscriminator::score(const Tensor& image) const
{
    const std::size_t r = config_.resolution;
    if (image.rank() != 2 || image.size(0) != r || image.size(1) != r) {
        throw NetworkError("MLP discriminator expects " + std::to_string(r) + "x" + std::to_string(r) + ", got " +
                           shape_str(image.shape()));
    }
    auto fc = [&](const Tensor& x, const std::string& name) {
        return add(matmul(x, params_.get(name + ".w")), params_.get(name + ".b"));
    };
    Tensor h = leaky_relu(fc(reshape(image, {1, r * r}), "mlp.fc0"), config_.leaky_slope);
    h = leaky_relu(fc(h, "mlp.fc1"), config_.leaky_slope);
    return reshape(fc(h, "mlp.fc2"), {1});
}

}  // namespace sketch3d
