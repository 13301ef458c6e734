#include "sketch3d/losses.hpp"

#include <cmath>

namespace sketch3d {

void LossWeights::validate() const
{
    for (double w : {lambda_v, lambda_sd, lambda_dd, lambda_r, lambda_vr, r1_gamma}) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw LossError("weights", "loss weights must be finite and >= 0");
    }
    if (scale_weights.empty()) throw LossError("weights", "at least one pyramid level weight is required");
    for (double w : scale_weights)
        if (!(w >= 0.0) || !std::isfinite(w)) throw LossError("weights", "pyramid weights must be finite and >= 0");
}

void to_json(nlohmann::json& j, const LossWeights& w)
{
    j = {{"lambda_v", w.lambda_v},   {"lambda_sd", w.lambda_sd}, {"lambda_dd", w.lambda_dd},
         {"lambda_r", w.lambda_r},   {"lambda_vr", w.lambda_vr}, {"scale_weights", w.scale_weights},
         {"r1_gamma", w.r1_gamma}};
}

void from_json(const nlohmann::json& j, LossWeights& w)
{
    const LossWeights d;
    w.lambda_v = j.value("lambda_v", d.lambda_v);
    w.lambda_sd = j.value("lambda_sd", d.lambda_sd);
    w.lambda_dd = j.value("lambda_dd", d.lambda_dd);
    w.lambda_r = j.value("lambda_r", d.lambda_r);
    w.lambda_vr = j.value("lambda_vr", d.lambda_vr);
    w.scale_weights = j.value("scale_weights", d.scale_weights);
    w.r1_gamma = j.value("r1_gamma", d.r1_gamma);
}

Tensor viewpoint_loss(const Tensor& predicted_embedding, const Tensor& target_embedding)
{
    if (predicted_embedding.numel() != 4 || target_embedding.numel() != 4) {
        throw LossError("v", "pose embeddings must have 4 entries");
    }
    return mean(square(sub(reshape(predicted_embedding, {4}), reshape(target_embedding, {4}))));
}

Tensor viewpoint_loss(const CameraPose& predicted, const CameraPose& target)
{
    return viewpoint_loss(pose_embedding(predicted), pose_embedding(target));
}

Tensor iou_loss(const Tensor& s1, const Tensor& s2, double eps)
{
    if (s1.shape() != s2.shape()) {
        throw LossError("sp", "silhouette shapes differ: " + shape_str(s1.shape()) + " vs " + shape_str(s2.shape()));
    }
    const Tensor product = mul(s1, s2);
    const Tensor intersection = sum(product);
    Tensor uni = sum(sub(add(s1, s2), product));
    if (uni.item() < eps) uni = Tensor::scalar(eps);
    return sub(Tensor::scalar(1.0), div(intersection, uni));
}

Tensor multiscale_iou(const std::vector<Tensor>& pyramid1, const std::vector<Tensor>& pyramid2,
                      std::span<const double> weights)
{
    if (pyramid1.size() != pyramid2.size() || pyramid1.size() != weights.size()) {
        throw LossError("sp", "pyramid level mismatch: " + std::to_string(pyramid1.size()) + ", " +
                                  std::to_string(pyramid2.size()) + " levels and " + std::to_string(weights.size()) +
                                  " weights");
    }
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t i = 0; i < weights.size(); ++i) {
        total = add(total, mul_scalar(iou_loss(pyramid1[i], pyramid2[i]), weights[i]));
    }
    return total;
}

Tensor gan_f(const Tensor& u) { return neg(softplus(neg(u))); }

double gan_f(double u) { return u > 0 ? -std::log1p(std::exp(-u)) : u - std::log1p(std::exp(u)); }

Tensor discriminator_loss(const Tensor& score_real, const Tensor& score_fake, const Tensor& grad_norm_sq_real,
                          double gamma)
{
    const Tensor adversarial = neg(add(gan_f(score_real), gan_f(neg(score_fake))));
    if (gamma == 0.0) return adversarial;
    return add(adversarial, mul_scalar(grad_norm_sq_real, gamma / 2.0));
}

Tensor generator_adv_loss(const Tensor& score_fake) { return softplus(neg(score_fake)); }

Tensor gradient_norm_sq(const Tensor& score, const Tensor& input)
{
    if (!input.requires_grad() || !input.is_leaf()) {
        throw LossError("r1", "gradient penalty input must be a leaf that requires grad");
    }
    const auto g = grad(score, {input}, BackwardOptions{.create_graph = true, .retain_graph = true});
    return sum(square(g[0]));
}

Tensor regularizer_bundle(const Mesh& mesh, const MeshTopology& topology)
{
    return add(laplacian_loss(mesh, topology), flatten_loss(mesh, topology));
}

Tensor regularizer_bundle(const Mesh& mesh)
{
    return regularizer_bundle(mesh, build_topology(mesh.faces, mesh.vertex_count()));
}

Tensor total_loss(const LossTerms& terms, const LossWeights& weights, LossReport* report)
{
    LossReport local;
    const struct {
        const char* name;
        const Tensor* value;
        double weight;
        double* slot;
    } parts[] = {{"sp", &terms.sp, 1.0, &local.sp},
                 {"r", &terms.r, weights.lambda_r, &local.r},
                 {"v", &terms.v, weights.lambda_v, &local.v},
                 {"sd", &terms.sd, weights.lambda_sd, &local.sd}};

    Tensor total;
    for (const auto& part : parts) {
        if (!part.value->defined()) continue;
        if (part.value->numel() != 1) throw LossError(part.name, std::string("loss term ") + part.name + " is not a scalar");
        const double v = part.value->item();
        if (!std::isfinite(v)) throw LossError(part.name, std::string("non-finite loss term ") + part.name);
        const Tensor weighted = mul_scalar(reshape(*part.value, {1}), part.weight);
        total = total.defined() ? add(total, weighted) : weighted;
        *part.slot = v;
    }
    if (!total.defined()) total = Tensor::scalar(0.0);
    local.total = local.sp + weights.lambda_r * local.r + weights.lambda_v * local.v + weights.lambda_sd * local.sd;
    if (report) *report = local;
    return total;
}

}  // namespace sketch3d
