#pragma once

#include <functional>
#include <optional>

#include "dti/clustering.hpp"
#include "dti/data.hpp"
#include "dti/eval.hpp"

namespace dti::training {

enum class Method { dti_kmeans, dti_gmm, kmeans, gmm, ti_kmeans };
std::string method_name(Method m);
Method method_from_name(const std::string& s);

struct TrainConfig {
    Method method = Method::dti_kmeans;
    std::string dataset;  // resolved via data::load_named unless injected
    int n_clusters = 10;
    std::string recipe;  // empty -> dataset default
    float lr = 0.001f;
    float lr_decay_factor = 10.f;
    float weight_decay = 1e-6f;  // network parameters only
    int batch_size = 128;
    std::vector<int> epochs_per_stage;  // length M+1; stage 0 = no transforms
    int final_lr_epochs = 10;           // after the last stage, at lr/decay
    float plateau_rel_tol = 1e-4f;
    int plateau_patience = 5;
    float reassign_threshold_frac = 0.2f;
    float noise_std = 0.01f;
    bool curriculum = true;          // ablation switch: all modules at once
    bool reassign_enabled = true;    // ablation switch
    float gaussian_weight_sigma = 0.f;  // > 0 enables the weighted loss
    uint64_t seed = 0;
};

// Adam with per-tensor state; parameter groups differ only in weight decay.
struct Adam {
    struct Slot {
        Tensor m, v;
        int64_t t = 0;
    };
    float lr, beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;
    std::vector<ad::Var> params;
    std::map<ad::Node*, Slot> slots;
    std::map<ad::Node*, float> decay;  // per-parameter weight decay

    explicit Adam(float lr_) : lr(lr_) {}
    void add_param(const ad::Var& p, float weight_decay);
    void step();
    void zero_grad();
    void reset_state(const ad::Var& p);  // fresh moments after reassignment
};

struct ReassignEvent {
    int target, source;
};

struct RunState {
    TrainConfig config;
    data::Dataset dataset;  // owned copy
    std::vector<transforms::TransformStep> steps;
    std::unique_ptr<predictor::PredictorState> predictor;
    clustering::KMeansState kmeans;
    clustering::GMMState gmm;
    // TI baseline: free per-sample parameters, [K][M] of [N,P]
    predictor::PredictedParams ti_params;
    std::unique_ptr<Adam> opt;
    int stage = 0;
    float lr = 0.f;
};

// K distinct random samples; GMM also sets var 0.5 and logits 1.
void init_prototypes(RunState& rs, uint64_t seed);

// Enables the next transformation module (fresh optimizer state for the new
// heads, learning rate unchanged). Throws past the final stage.
void curriculum_step(RunState& rs);

// Clusters below threshold get the largest cluster's prototype and heads
// plus pixel noise; the largest cluster is recomputed after each copy.
std::vector<ReassignEvent> reassign_empty(RunState& rs,
                                          const std::vector<int>& epoch_counts, Rng& rng);

struct FitResult {
    eval::RunRecord record;
    std::vector<int> final_assignments;
};

// Reads a config.json written by fit (also accepts hand-written files;
// missing keys keep their defaults).
TrainConfig config_from_json_file(const std::string& path);

// Rebuilds a trained model from a final.ckpt; the dataset supplies the
// image shape and, for the TI baseline, must match the training set size.
RunState load_state(const std::string& ckpt_path, const data::Dataset& dataset);

// Full-dataset loss and assignments with frozen statistics (eval mode).
std::pair<double, std::vector<int>> evaluate(RunState& rs, const data::Dataset& dataset);

// Per-sample transformation parameters for a batch, honoring the method
// (predictor, per-sample leaves, or identity) and the curriculum stage.
// `idx` holds the dataset indices of the batch rows (TI baseline lookup).
predictor::PredictedParams predicted_params(const RunState& rs, const Tensor& batch,
                                            const std::vector<int>& idx);

// Full training: curriculum stages, per-epoch metrics.jsonl, reassignment,
// final lr/decay epochs, checkpoint + run_record.json in run_dir.
FitResult fit(const data::Dataset& dataset, const TrainConfig& config,
              const std::string& run_dir);

// Loss-vs-K table: `runs` seeds per K, averages the final full-dataset loss.
std::vector<std::pair<int, double>> elbow_scan(const data::Dataset& dataset,
                                               const std::vector<int>& k_list,
                                               const TrainConfig& config, int runs,
                                               const std::string& out_dir);

}  // namespace dti::training
