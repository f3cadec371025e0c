#pragma once

#include "dti/autodiff.hpp"

namespace dti::transforms {

using ad::Var;

// Normalized coordinate convention used by every grid in the project:
// [-1,1] with pixel centers at +/-(1 - 1/W); pixel j maps to (2j-(W-1))/W.

enum class Kind { identity, affine, projective, tps, color, morpho };

std::string kind_name(Kind k);
Kind kind_from_name(const std::string& s);

// One parametric transformation in a sequence. `identity_params` are the
// full parameter values that make the step the identity map; predictors
// emit offsets that are added to them.
struct TransformStep {
    Kind kind;
    int param_count;
    Tensor identity_params;
    bool applies_to_covariance;
};

TransformStep make_step(Kind kind, int channels);
// "aff-morpho-tps", "col-proj", ... (tokens: id, aff, proj, tps, col, morpho)
std::vector<TransformStep> parse_recipe(const std::string& recipe, int channels);
std::string recipe_string(const std::vector<TransformStep>& steps);

struct SamplingGrid {
    Tensor coords;  // [N,H,W,2], x then y
};

struct MorphoParams {
    float alpha = 0.f;
    Tensor a_logits;  // [7,7]
};
constexpr int kMorphoWindow = 7;

struct DegenerateTransformError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---- batched differentiable ops ----

// params [N,P] (full params, identity offsets already added) -> [N,H,W,2]
Var make_grid_batch(Kind kind, const Var& params, int H, int W);

enum class Pad { border, zeros };

// img [C,H,W] (shared across batch) or [N,C,H,W]; grid [N,Ho,Wo,2]
Var grid_sample(const Var& img, const Var& grid, Pad pad);

// params [N,2C]: per channel (scale offset, shift)
Var color_apply_batch(const Var& img, const Var& params);

// params [N,50]: [alpha, 49 kernel logits] (7x7 row-major window offsets)
Var morpho_apply_batch(const Var& img, const Var& params);

// Applies the sequence left to right. With covariance=true only steps with
// applies_to_covariance are applied (spatial warps of a variance image).
Var apply_steps(const Var& img, const std::vector<TransformStep>& steps,
                const std::vector<Var>& params, Pad pad = Pad::border,
                bool covariance = false);

// ---- single-image convenience API (plain tensors, no gradients) ----

Tensor identity_grid(int H, int W);
SamplingGrid make_grid(Kind kind, const Tensor& params, int H, int W);
Tensor sample(const Tensor& image, const SamplingGrid& grid, Pad pad);
Tensor color_apply(const Tensor& image, const Tensor& params);
Tensor morpho_apply(const Tensor& image, const MorphoParams& mp);
Tensor compose_apply(const Tensor& image, const std::vector<TransformStep>& steps,
                     const std::vector<Tensor>& params, Pad pad = Pad::border);
Tensor covariance_apply(const Tensor& var_map, const std::vector<TransformStep>& steps,
                        const std::vector<Tensor>& params, Pad pad = Pad::border);

// TPS support: dense interpolation basis for a 4x4 control lattice spanning
// [-1,1]^2. Row p of the result maps 16 control displacements to the
// displacement at pixel p (same basis for x and y).
const Tensor& tps_basis(int H, int W);

}  // namespace dti::transforms
