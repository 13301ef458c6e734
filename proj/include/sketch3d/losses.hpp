#pragma once

#include "sketch3d/geometry.hpp"
#include "sketch3d/tensor.hpp"

#include <json.hpp>

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sketch3d {

class LossError : public std::runtime_error {
public:
    LossError(std::string term, const std::string& what) : std::runtime_error(what), term_(std::move(term)) {}
    const std::string& term() const { return term_; }

private:
    std::string term_;
};

struct LossWeights {
    double lambda_v = 10.0;
    double lambda_sd = 0.1;
    double lambda_dd = 0.1;  // the domain-adaptation term itself is always zero
    double lambda_r = 0.1;
    double lambda_vr = 10.0;  // carried for completeness; no term uses it
    std::vector<double> scale_weights{1.0, 1.0, 1.0};
    double r1_gamma = 10.0;

    void validate() const;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

struct LossReport {
    double sp = 0.0;
    double r = 0.0;
    double v = 0.0;
    double sd = 0.0;
    double dd = 0.0;
    double total = 0.0;
};

// Mean squared difference of two [sin az, cos az, sin el, cos el] embeddings.
Tensor viewpoint_loss(const Tensor& predicted_embedding, const Tensor& target_embedding);
Tensor viewpoint_loss(const CameraPose& predicted, const CameraPose& target);

inline constexpr double kIouEpsilon = 1e-8;
// 1 - |S1*S2|_1 / max(|S1 + S2 - S1*S2|_1, eps).
Tensor iou_loss(const Tensor& s1, const Tensor& s2, double eps = kIouEpsilon);
// Weighted sum of per-level iou_loss.
Tensor multiscale_iou(const std::vector<Tensor>& pyramid1, const std::vector<Tensor>& pyramid2,
                      std::span<const double> weights);

// f(u) = -log(1 + exp(-u)).
Tensor gan_f(const Tensor& u);
double gan_f(double u);

// -[f(real) + f(-fake)] + gamma / 2 * grad_norm_sq_real.
Tensor discriminator_loss(const Tensor& score_real, const Tensor& score_fake, const Tensor& grad_norm_sq_real,
                          double gamma);
// -f(fake) = softplus(-fake).
Tensor generator_adv_loss(const Tensor& score_fake);

// |d score / d input|^2 as a differentiable function of the parameters behind `score`.
// `input` must be a leaf that requires grad.
Tensor gradient_norm_sq(const Tensor& score, const Tensor& input);

// laplacian_loss + flatten_loss.
Tensor regularizer_bundle(const Mesh& mesh, const MeshTopology& topology);
Tensor regularizer_bundle(const Mesh& mesh);

struct LossTerms {
    Tensor sp;
    Tensor r;
    Tensor v;
    Tensor sd;  // undefined when the adversarial branch is off
};

// L = L_sp + lambda_r L_r + lambda_v L_v + lambda_sd L_sd. Throws LossError naming
// the first non-finite term.
Tensor total_loss(const LossTerms& terms, const LossWeights& weights, LossReport* report = nullptr);

}  // namespace sketch3d
