#pragma once

#include <map>

#include "dti/autodiff.hpp"

namespace dti::nn {

using ad::Var;

// ---- functional ops ----

// x [N,Cin,H,W], w [Cout,Cin,kh,kw], b [Cout] (may be null)
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);

// Per-channel batch norm. Running stats live outside the graph and are
// updated in training mode only.
struct BnStats {
    Tensor mean, var;  // [C]
};
Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta,
                const std::shared_ptr<BnStats>& stats, bool training, float momentum = 0.1f,
                float eps = 1e-5f);

Var maxpool2d(const Var& x, int k, int stride, int pad);
Var global_avg_pool(const Var& x);  // [N,C,H,W] -> [N,C]

// ---- layers ----

struct Module {
    virtual ~Module() = default;
    // name -> parameter; names are stable for checkpointing
    virtual void collect(const std::string& prefix,
                         std::map<std::string, Var>& params,
                         std::map<std::string, std::shared_ptr<BnStats>>& stats) = 0;
};

struct Conv2d : Module {
    Var w, b;
    int stride, pad;
    bool has_bias;
    Conv2d(int cin, int cout, int k, int stride, int pad, bool bias, Rng& rng);
    Var forward(const Var& x) const;
    void collect(const std::string& p, std::map<std::string, Var>& params,
                 std::map<std::string, std::shared_ptr<BnStats>>&) override;
};

struct BatchNorm2d : Module {
    Var gamma, beta;
    std::shared_ptr<BnStats> stats;
    explicit BatchNorm2d(int c);
    Var forward(const Var& x, bool training) const;
    void collect(const std::string& p, std::map<std::string, Var>& params,
                 std::map<std::string, std::shared_ptr<BnStats>>& stats) override;
};

struct Linear : Module {
    Var w, b;
    Linear(int in, int out, Rng& rng, bool zero_init = false);
    Var forward(const Var& x) const { return ad::linear(x, w, b); }
    void collect(const std::string& p, std::map<std::string, Var>& params,
                 std::map<std::string, std::shared_ptr<BnStats>>&) override;
};

struct ResidualBlock : Module {
    std::unique_ptr<Conv2d> conv1, conv2, proj;
    std::unique_ptr<BatchNorm2d> bn1, bn2, bn_proj;
    ResidualBlock(int cin, int cout, int stride, Rng& rng);
    Var forward(const Var& x, bool training) const;
    void collect(const std::string& p, std::map<std::string, Var>& params,
                 std::map<std::string, std::shared_ptr<BnStats>>& stats) override;
};

// Truncated-after-GAP residual backbones. The CIFAR-style 3-stage net
// (16/32/64 channels, 3 blocks each) serves images under 64px; the 4-stage
// standard net serves larger ones.
struct ResNetBackbone : Module {
    enum class Arch { resnet20, resnet18 };
    Arch arch;
    int out_features;
    std::unique_ptr<Conv2d> stem;
    std::unique_ptr<BatchNorm2d> bn_stem;
    std::vector<std::unique_ptr<ResidualBlock>> blocks;
    bool stem_pool = false;
    ResNetBackbone(Arch arch, int in_channels, Rng& rng);
    Var forward(const Var& x, bool training) const;  // -> [N, out_features]
    void collect(const std::string& p, std::map<std::string, Var>& params,
                 std::map<std::string, std::shared_ptr<BnStats>>& stats) override;
};

// Two hidden layers of 128 units, linear output; optional zero-init of the
// output layer so the head starts at the identity offset.
struct MlpHead : Module {
    std::unique_ptr<Linear> fc1, fc2, fc3;
    MlpHead(int in, int out, Rng& rng);
    Var forward(const Var& x) const;
    void collect(const std::string& p, std::map<std::string, Var>& params,
                 std::map<std::string, std::shared_ptr<BnStats>>& stats) override;
};

}  // namespace dti::nn
