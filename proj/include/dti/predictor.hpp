#pragma once

#include "dti/nn.hpp"
#include "dti/transforms.hpp"

namespace dti::predictor {

using ad::Var;

struct PredictorConfig {
    int n_clusters = 10;
    std::vector<transforms::TransformStep> steps;
    int channels = 1, H = 28, W = 28;
    int active_modules = 0;  // curriculum mask at construction

    nn::ResNetBackbone::Arch backbone_arch() const {
        return std::max(H, W) < 64 ? nn::ResNetBackbone::Arch::resnet20
                                   : nn::ResNetBackbone::Arch::resnet18;
    }
};

// Per-sample predicted parameters: params[k][m] is an [N, P_m] tensor of
// full parameters (identity plus the head's offset). Inactive modules carry
// identity parameters exactly.
using PredictedParams = std::vector<std::vector<Var>>;

struct PredictorState {
    PredictorConfig config;
    std::unique_ptr<nn::ResNetBackbone> backbone;
    std::vector<std::vector<std::unique_ptr<nn::MlpHead>>> heads;  // [K][M]
    int active_modules = 0;
    bool training_mode = true;

    int n_modules() const { return static_cast<int>(config.steps.size()); }

    // Shared backbone forward + all active heads. Offsets of inactive
    // modules are exact identity constants, not network outputs.
    PredictedParams predict(const Tensor& batch) const;

    // All-identity parameters without touching the network (used when no
    // module is active: saves the whole backbone pass).
    PredictedParams identity_params(int N) const;

    void collect(std::map<std::string, Var>& params,
                 std::map<std::string, std::shared_ptr<nn::BnStats>>& stats) const;
    // Copies head parameters (values only) from cluster `src` to `dst`.
    void copy_cluster_heads(int src, int dst);
    // Parameters belonging to cluster k's heads (for optimizer-state resets).
    std::vector<Var> cluster_head_params(int k) const;
};

// Zero-initialized final head layers make every predicted offset exactly
// zero, so the composed transformation is the identity for any input.
std::unique_ptr<PredictorState> init_identity(const PredictorConfig& config, uint64_t seed);

}  // namespace dti::predictor
