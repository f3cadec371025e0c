#pragma once

#include "dti/predictor.hpp"

namespace dti::clustering {

using ad::Var;
using predictor::PredictedParams;

// Prototypes live in pixel space as unconstrained leaves; clamping to [0,1]
// happens only on image export.
struct KMeansState {
    std::vector<Var> prototypes;  // K x [C,H,W]
    int k() const { return static_cast<int>(prototypes.size()); }
};

constexpr float kSigmaMin = 0.25f;

struct GMMState {
    std::vector<Var> means;       // K x [C,H,W]
    std::vector<Var> var_params;  // K x [C,H,W]; variance = var_param^2 (+ floor)
    std::vector<Var> mixing_logits;  // K scalars ([1] each)
    float sigma_min = kSigmaMin;
    int k() const { return static_cast<int>(means.size()); }
};

struct Responsibilities {
    Tensor gamma;  // [N,K], rows sum to 1
};

struct KMeansLossResult {
    Var loss;                      // scalar, batch mean of min_k distances
    std::vector<int> assignments;  // argmin_k, ties to smallest k
    Tensor distances;              // [N,K] (values only)
};

// Eq.-4-style hard-min loss; gradient flows only through the selected
// cluster per sample. `weights` (optional, [H,W]) multiplies squared
// residuals pixelwise ([PAPER] Gaussian-weighted loss).
KMeansLossResult kmeans_loss(const Tensor& batch, const KMeansState& state,
                             const std::vector<transforms::TransformStep>& steps,
                             const PredictedParams& predicted, const Tensor& weights = {});

// Max of the weight is 1 at the image center.
Tensor gaussian_weight(int H, int W, float sigma = 7.f);

// Joint E/M forward pass: per-cluster transformed Gaussian log densities,
// detached responsibilities and the expected NLL built from them.
struct GMMForward {
    Responsibilities resp;
    std::vector<Var> log_density;  // K entries of [N]
    Var log_pi;                    // [K]
    Var m_loss;                    // scalar
    std::vector<int> assignments;  // argmax_k gamma
};
GMMForward gmm_forward(const Tensor& batch, const GMMState& state,
                       const std::vector<transforms::TransformStep>& steps,
                       const PredictedParams& predicted);

Responsibilities gmm_e_step(const Tensor& batch, const GMMState& state,
                            const std::vector<transforms::TransformStep>& steps,
                            const PredictedParams& predicted);
std::vector<int> gmm_assign(const Tensor& batch, const GMMState& state,
                            const std::vector<transforms::TransformStep>& steps,
                            const PredictedParams& predicted);

// TI baseline: identical loss shape, but the caller owns the per-sample
// transformation parameters (free variables, no predictor).
KMeansLossResult ti_loss(const Tensor& batch, const KMeansState& state,
                         const std::vector<transforms::TransformStep>& steps,
                         const PredictedParams& per_sample_params, const Tensor& weights = {});

}  // namespace dti::clustering
