#include "dti/predictor.hpp"

namespace dti::predictor {

namespace {
Tensor tile_identity(const Tensor& id, int N) {
    int P = static_cast<int>(id.numel());
    Tensor t({N, P});
    for (int n = 0; n < N; ++n) std::copy_n(id.data(), P, t.data() + n * P);
    return t;
}
}  // namespace

PredictedParams PredictorState::identity_params(int N) const {
    PredictedParams out(config.n_clusters);
    for (int k = 0; k < config.n_clusters; ++k)
        for (const auto& step : config.steps)
            out[k].push_back(ad::constant(tile_identity(step.identity_params, N)));
    return out;
}

PredictedParams PredictorState::predict(const Tensor& batch) const {
    const auto& s = batch.shape();
    if (s.size() != 4 || s[1] != config.channels || s[2] != config.H || s[3] != config.W)
        throw std::invalid_argument("predict: batch shape mismatch");
    int N = s[0];
    if (active_modules == 0) return identity_params(N);

    Var features = backbone->forward(ad::constant(batch), training_mode);
    PredictedParams out(config.n_clusters);
    for (int k = 0; k < config.n_clusters; ++k) {
        for (int m = 0; m < n_modules(); ++m) {
            Var id = ad::constant(tile_identity(config.steps[m].identity_params, N));
            if (m < active_modules)
                out[k].push_back(ad::add(heads[k][m]->forward(features), id));
            else
                out[k].push_back(id);
        }
    }
    return out;
}

void PredictorState::collect(std::map<std::string, Var>& params,
                             std::map<std::string, std::shared_ptr<nn::BnStats>>& stats) const {
    backbone->collect("backbone", params, stats);
    for (int k = 0; k < config.n_clusters; ++k)
        for (int m = 0; m < n_modules(); ++m)
            heads[k][m]->collect("head" + std::to_string(k) + "_" + std::to_string(m), params,
                                 stats);
}

void PredictorState::copy_cluster_heads(int src, int dst) {
    std::map<std::string, Var> ps, pd;
    std::map<std::string, std::shared_ptr<nn::BnStats>> st;
    for (int m = 0; m < n_modules(); ++m) {
        heads[src][m]->collect("h", ps, st);
        heads[dst][m]->collect("h", pd, st);
        for (auto& [name, var] : ps) pd[name]->value = var->value;
        ps.clear();
        pd.clear();
    }
}

std::vector<Var> PredictorState::cluster_head_params(int k) const {
    std::map<std::string, Var> ps;
    std::map<std::string, std::shared_ptr<nn::BnStats>> st;
    for (int m = 0; m < n_modules(); ++m) heads[k][m]->collect("h" + std::to_string(m), ps, st);
    std::vector<Var> out;
    for (auto& [_, v] : ps) out.push_back(v);
    return out;
}

std::unique_ptr<PredictorState> init_identity(const PredictorConfig& config, uint64_t seed) {
    auto state = std::make_unique<PredictorState>();
    state->config = config;
    state->active_modules = config.active_modules;
    Rng rng(seed);
    state->backbone =
        std::make_unique<nn::ResNetBackbone>(config.backbone_arch(), config.channels, rng);
    state->heads.resize(config.n_clusters);
    for (int k = 0; k < config.n_clusters; ++k)
        for (const auto& step : config.steps)
            state->heads[k].push_back(
                std::make_unique<nn::MlpHead>(state->backbone->out_features, step.param_count, rng));
    return state;
}

}  // namespace dti::predictor
