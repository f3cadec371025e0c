#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dti/predictor.hpp"

using namespace dti;
using namespace dti::predictor;

namespace {
PredictorConfig small_config(int K, const std::string& recipe, int active) {
    PredictorConfig cfg;
    cfg.n_clusters = K;
    cfg.steps = transforms::parse_recipe(recipe, 1);
    cfg.channels = 1;
    cfg.H = 28;
    cfg.W = 28;
    cfg.active_modules = active;
    return cfg;
}
}  // namespace

TEST_CASE("K*M heads are created and output shapes are declared lengths") {
    auto state = init_identity(small_config(10, "aff-morpho-tps", 3), 7);
    CHECK(state->heads.size() == 10);
    int total = 0;
    for (const auto& hs : state->heads) total += static_cast<int>(hs.size());
    CHECK(total == 30);

    Rng rng(1);
    Tensor batch = rand_uniform({2, 1, 28, 28}, rng);
    auto params = state->predict(batch);
    REQUIRE(params.size() == 10);
    for (const auto& per_mod : params) {
        REQUIRE(per_mod.size() == 3);
        CHECK(per_mod[0]->value.dim(1) == 6);
        CHECK(per_mod[1]->value.dim(1) == 50);
        CHECK(per_mod[2]->value.dim(1) == 32);
        for (const auto& p : per_mod) CHECK(p->value.dim(0) == 2);
    }
}

TEST_CASE("identity at init: transforms leave any image unchanged") {
    auto state = init_identity(small_config(4, "aff-morpho-tps", 3), 42);
    state->training_mode = false;
    Rng rng(2);
    float max_err = 0.f;
    for (int trial = 0; trial < 10; ++trial) {
        Tensor batch = rand_uniform({10, 1, 28, 28}, rng);
        Tensor proto = rand_uniform({1, 28, 28}, rng);
        auto params = state->predict(batch);
        for (int k = 0; k < 4; ++k) {
            auto out = transforms::apply_steps(ad::constant(proto), state->config.steps,
                                               params[k]);
            for (int n = 0; n < 10; ++n)
                for (int64_t i = 0; i < proto.numel(); ++i)
                    max_err = std::max(max_err,
                                       std::abs(out->value[n * proto.numel() + i] - proto[i]));
        }
    }
    CHECK(max_err <= 1e-4f);
}

TEST_CASE("same seed gives bitwise-identical parameters") {
    auto a = init_identity(small_config(3, "aff-tps", 2), 1234);
    auto b = init_identity(small_config(3, "aff-tps", 2), 1234);
    std::map<std::string, ad::Var> pa, pb;
    std::map<std::string, std::shared_ptr<nn::BnStats>> sa, sb;
    a->collect(pa, sa);
    b->collect(pb, sb);
    REQUIRE(pa.size() == pb.size());
    for (auto& [name, va] : pa) {
        const auto& vb = pb.at(name)->value;
        REQUIRE(va->value.numel() == vb.numel());
        for (int64_t i = 0; i < vb.numel(); ++i) CHECK(va->value[i] == vb[i]);
    }
}

TEST_CASE("curriculum masking: inactive modules emit identity params exactly") {
    auto state = init_identity(small_config(2, "aff-morpho-tps", 1), 5);
    // push nonzero weights into all heads to make masking observable
    std::map<std::string, ad::Var> ps;
    std::map<std::string, std::shared_ptr<nn::BnStats>> st;
    state->collect(ps, st);
    Rng rng(6);
    for (auto& [name, v] : ps)
        if (name.rfind("head", 0) == 0) v->value = randn(v->value.shape(), rng, 0.1f);

    Tensor batch = rand_uniform({3, 1, 28, 28}, rng);
    auto params = state->predict(batch);
    for (int k = 0; k < 2; ++k) {
        // module 0 active: generally non-identity now
        // modules 1,2 inactive: exact identity params
        for (int m = 1; m < 3; ++m) {
            const auto& id = state->config.steps[m].identity_params;
            for (int n = 0; n < 3; ++n)
                for (int64_t i = 0; i < id.numel(); ++i)
                    CHECK(params[k][m]->value[n * id.numel() + i] == id[i]);
        }
    }

    // enabling module 1 must not change module 0 outputs
    auto before = state->predict(batch);
    state->active_modules = 2;
    auto after = state->predict(batch);
    for (int k = 0; k < 2; ++k)
        for (int64_t i = 0; i < before[k][0]->value.numel(); ++i)
            CHECK(before[k][0]->value[i] == after[k][0]->value[i]);
}

TEST_CASE("backbone choice follows image size") {
    PredictorConfig small = small_config(2, "aff", 1);
    CHECK(small.backbone_arch() == nn::ResNetBackbone::Arch::resnet20);
    PredictorConfig big = small;
    big.H = big.W = 128;
    big.channels = 3;
    CHECK(big.backbone_arch() == nn::ResNetBackbone::Arch::resnet18);
}
