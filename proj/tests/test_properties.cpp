#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "dti/clustering.hpp"
#include "dti/data.hpp"
#include "dti/eval.hpp"
#include "dti/predictor.hpp"
#include "dti/training.hpp"

// End-to-end property suite: every invariant the components must obey,
// restated against the public interfaces and kept fast enough to gate on.

using namespace dti;
using transforms::TransformStep;

namespace {

predictor::PredictedParams identity_predicted(int K, const std::vector<TransformStep>& steps,
                                              int N) {
    predictor::PredictedParams out(K);
    for (int k = 0; k < K; ++k)
        for (const auto& s : steps) {
            Tensor t({N, s.param_count});
            for (int i = 0; i < N; ++i)
                std::copy_n(s.identity_params.data(), s.param_count,
                            t.data() + i * s.param_count);
            out[k].push_back(ad::constant(t));
        }
    return out;
}

// affine offsets rotating by r*90 degrees about the image center
std::vector<float> rot90_params(int r) {
    float cs[4] = {1, 0, -1, 0}, sn[4] = {0, 1, 0, -1};
    float c = cs[r & 3], s = sn[r & 3];
    return {c - 1.f, -s, 0.f, s, c - 1.f, 0.f};
}

std::string slurp(const std::string& path) {
    std::ifstream is(path);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("finite rotation group: optimal TI loss invariant to rotated prototypes") {
    // Rotating every prototype by 90 degrees does not change the best loss
    // attainable over the 4-element rotation group of per-sample params.
    Rng rng(31);
    int K = 2, N = 3, W = 8;
    auto steps = transforms::parse_recipe("aff", 1);
    Tensor batch = rand_uniform({N, 1, W, W}, rng);
    clustering::KMeansState base, rotated;
    for (int k = 0; k < K; ++k) {
        Tensor p = rand_uniform({1, W, W}, rng);
        base.prototypes.push_back(ad::leaf(p));
        // rotate the prototype image by 90 degrees (exact pixel permutation)
        Tensor q({1, W, W});
        for (int v = 0; v < W; ++v)
            for (int u = 0; u < W; ++u) q[v * W + u] = p[u * W + (W - 1 - v)];
        rotated.prototypes.push_back(ad::leaf(q));
    }
    auto best_over_group = [&](const clustering::KMeansState& st) {
        double total = 0.0;
        // independent per-sample, per-cluster minimization: enumerate all
        // rotations for each (sample, cluster), take min_k of per-k minima
        for (int i = 0; i < N; ++i) {
            double best = 1e300;
            for (int k = 0; k < K; ++k) {
                double bk = 1e300;
                for (int r = 0; r < 4; ++r) {
                    predictor::PredictedParams pp(1);
                    auto rp = rot90_params(r);
                    Tensor t({1, 6}, std::vector<float>(rp.begin(), rp.end()));
                    pp[0].push_back(ad::constant(t));
                    clustering::KMeansState one;
                    one.prototypes.push_back(st.prototypes[k]);
                    Tensor sample({1, 1, W, W});
                    std::copy_n(batch.data() + i * W * W, W * W, sample.data());
                    auto res = clustering::ti_loss(sample, one, steps, pp);
                    bk = std::min(bk, double(res.loss->value[0]));
                }
                best = std::min(best, bk);
            }
            total += best;
        }
        return total / N;
    };
    CHECK(std::abs(best_over_group(base) - best_over_group(rotated)) <= 1e-9 *
              std::max(1.0, best_over_group(base)));
}

TEST_CASE("morphological limits: large |alpha| reproduces dilation and erosion") {
    Rng rng(32);
    Tensor x({1, 9, 9});
    std::uniform_int_distribution<int> bit(0, 1);
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(bit(rng));
    transforms::MorphoParams mp;
    mp.a_logits = Tensor({7, 7}, 14.f);
    auto oracle = [&](bool dilate) {
        Tensor out({1, 9, 9});
        for (int u = 0; u < 9; ++u)
            for (int v = 0; v < 9; ++v) {
                float best = dilate ? -1e9f : 1e9f;
                for (int du = -3; du <= 3; ++du)
                    for (int dv = -3; dv <= 3; ++dv) {
                        int uu = std::clamp(u + du, 0, 8), vv = std::clamp(v + dv, 0, 8);
                        best = dilate ? std::max(best, x[uu * 9 + vv])
                                      : std::min(best, x[uu * 9 + vv]);
                    }
                out[u * 9 + v] = best;
            }
        return out;
    };
    for (float alpha : {50.f, -50.f}) {
        mp.alpha = alpha;
        Tensor got = transforms::morpho_apply(x, mp);
        Tensor ref = oracle(alpha > 0);
        for (int64_t i = 0; i < x.numel(); ++i) CHECK(std::abs(got[i] - ref[i]) <= 1e-3f);
    }
}

TEST_CASE("a freshly initialized predictor is the identity on 100 random probes") {
    auto steps = transforms::parse_recipe("aff-morpho-tps", 1);
    predictor::PredictorConfig pc;
    pc.n_clusters = 2;
    pc.steps = steps;
    pc.channels = 1;
    pc.H = 16;
    pc.W = 16;
    pc.active_modules = 3;
    auto pred = predictor::init_identity(pc, 5);
    pred->active_modules = 3;
    Rng rng(33);
    Tensor batch = rand_uniform({100, 1, 16, 16}, rng);
    auto params = pred->predict(batch);
    auto probe = ad::constant(batch);
    auto warped = transforms::apply_steps(probe, steps, params[0]);
    float max_err = 0.f;
    for (int64_t i = 0; i < batch.numel(); ++i)
        max_err = std::max(max_err, std::abs(warped->value[i] - batch[i]));
    CHECK(max_err <= 1e-4f);
}

TEST_CASE("clustering losses pass finite-difference gradient checks") {
    Rng rng(34);
    auto steps = transforms::parse_recipe("aff", 1);
    int K = 2, N = 2, W = 6;
    // smooth images keep the bilinear interpolant's kinks out of the
    // finite-difference window
    std::uniform_real_distribution<float> ph(0.f, 6.28f);
    auto smooth = [&](std::vector<int> shape) {
        Tensor t(shape);
        int n = shape.size() == 4 ? shape[0] : 1;
        for (int i = 0; i < n; ++i) {
            float p1 = ph(rng), p2 = ph(rng);
            for (int u = 0; u < W; ++u)
                for (int v = 0; v < W; ++v)
                    t[(static_cast<int64_t>(i) * W + u) * W + v] =
                        0.5f + 0.3f * std::cos(6.28f * u / W + p1) *
                                   std::cos(6.28f * v / W + p2);
        }
        return t;
    };
    Tensor batch = smooth({N, 1, W, W});

    clustering::KMeansState km;
    for (int k = 0; k < K; ++k) km.prototypes.push_back(ad::leaf(smooth({1, W, W})));
    std::vector<ad::Var> params;
    for (int k = 0; k < K; ++k) {
        Tensor t = rand_uniform({N, 6}, rng);
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = (t[i] - 0.5f) * 0.1f;
        params.push_back(ad::leaf(t));
    }
    auto kf = [&]() {
        predictor::PredictedParams pp(K);
        for (int k = 0; k < K; ++k) pp[k].push_back(params[k]);
        return clustering::kmeans_loss(batch, km, steps, pp).loss;
    };
    for (int k = 0; k < K; ++k) {
        CHECK(ad::gradcheck(kf, km.prototypes[k]) <= 1e-2);
        CHECK(ad::gradcheck(kf, params[k]) <= 1e-2);
    }

    // well-separated components saturate the responsibilities, so the
    // detached-gamma analytic gradient matches finite differences
    clustering::GMMState gm;
    Tensor gbatch({N, 1, W, W});
    for (int k = 0; k < K; ++k) {
        float level = k ? 0.9f : 0.1f;
        Tensor m = smooth({1, W, W});
        for (int64_t i = 0; i < m.numel(); ++i) {
            gbatch[k * W * W + i] = level + 0.1f * (m[i] - 0.5f);
            m[i] = level + 0.05f * (m[i] - 0.5f);
        }
        gm.means.push_back(ad::leaf(m));
        gm.var_params.push_back(ad::leaf(Tensor({1, W, W}, 0.3f)));
        gm.mixing_logits.push_back(ad::leaf(Tensor({1}, 0.5f * k)));
    }
    auto gf = [&]() {
        return clustering::gmm_forward(gbatch, gm, {}, identity_predicted(K, {}, N)).m_loss;
    };
    for (int k = 0; k < K; ++k) {
        CHECK(ad::gradcheck(gf, gm.means[k]) <= 1e-2);
        CHECK(ad::gradcheck(gf, gm.var_params[k]) <= 1e-2);
        // scalar logits need a wider step: the loss is evaluated in single
        // precision, so a 1e-3 step is dominated by rounding noise
        CHECK(ad::gradcheck(gf, gm.mixing_logits[k], 1e-2f) <= 1e-2);
    }
}

TEST_CASE("responsibility rows always sum to one") {
    Rng rng(35);
    int K = 4, N = 32;
    clustering::GMMState gm;
    for (int k = 0; k < K; ++k) {
        gm.means.push_back(ad::leaf(rand_uniform({1, 5, 5}, rng)));
        gm.var_params.push_back(ad::leaf(rand_uniform({1, 5, 5}, rng)));
        gm.mixing_logits.push_back(ad::leaf(Tensor({1}, float(k) - 1.5f)));
    }
    Tensor batch = rand_uniform({N, 1, 5, 5}, rng);
    auto r = clustering::gmm_e_step(batch, gm, {}, identity_predicted(K, {}, N));
    for (int i = 0; i < N; ++i) {
        double s = 0;
        for (int k = 0; k < K; ++k) s += r.gamma[i * K + k];
        CHECK(std::abs(s - 1.0) <= 1e-6);
    }
}

TEST_CASE("the variance floor holds at sigma_min squared") {
    // with a zero variance parameter the NLL at the mean is the floor's
    // closed form: D/2 * log(2*pi*sigma_min^2)
    clustering::GMMState gm;
    int D = 9;
    gm.means.push_back(ad::leaf(Tensor({1, 3, 3}, 0.4f)));
    gm.var_params.push_back(ad::leaf(Tensor({1, 3, 3}, 0.f)));
    gm.mixing_logits.push_back(ad::leaf(Tensor({1}, 0.f)));
    Tensor batch({1, 1, 3, 3});
    batch.fill(0.4f);
    auto fwd = clustering::gmm_forward(batch, gm, {}, identity_predicted(1, {}, 1));
    float floor_var = clustering::kSigmaMin * clustering::kSigmaMin;
    CHECK(floor_var == 0.0625f);
    double want = 0.5 * D * std::log(2.0 * M_PI * floor_var);
    CHECK(fwd.m_loss->value[0] == doctest::Approx(want).epsilon(1e-5));
}

TEST_CASE("hungarian matching equals factorial enumeration on 50 instances") {
    std::mt19937 gen(4242);
    std::uniform_real_distribution<double> u(-10.0, 10.0);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<std::vector<double>> s(4, std::vector<double>(4));
        for (auto& row : s)
            for (auto& v : row) v = u(gen);
        auto match = eval::hungarian(s);
        double got = 0;
        for (int i = 0; i < 4; ++i) got += s[i][match[i]];
        std::vector<int> perm = {0, 1, 2, 3};
        double best = -1e300;
        do {
            double t = 0;
            for (int i = 0; i < 4; ++i) t += s[i][perm[i]];
            best = std::max(best, t);
        } while (std::next_permutation(perm.begin(), perm.end()));
        CHECK(got == doctest::Approx(best).epsilon(1e-9));
    }
}

TEST_CASE("reassignment triggers strictly below a fifth of the expected size") {
    training::RunState rs;
    rs.config.method = training::Method::kmeans;
    rs.config.n_clusters = 10;
    rs.dataset.images = Tensor({1000, 1, 2, 2});  // threshold 0.2*1000/10 = 20
    for (int k = 0; k < 10; ++k)
        rs.kmeans.prototypes.push_back(ad::leaf(Tensor({1, 2, 2}, float(k))));
    Rng rng(36);
    std::vector<int> at_boundary = {760, 20, 20, 25, 25, 30, 30, 30, 30, 30};
    CHECK(training::reassign_empty(rs, at_boundary, rng).empty());
    std::vector<int> below = {761, 19, 20, 25, 25, 30, 30, 30, 30, 30};
    auto events = training::reassign_empty(rs, below, rng);
    REQUIRE(events.size() == 1);
    CHECK(events[0].target == 1);
}

TEST_CASE("training metrics are a pure function of config and seed") {
    auto ds = data::make_synthetic_digits(32, 55);
    training::TrainConfig cfg;
    cfg.method = training::Method::dti_kmeans;
    cfg.recipe = "aff";
    cfg.n_clusters = 3;
    cfg.batch_size = 32;
    cfg.epochs_per_stage = {1, 1};
    cfg.final_lr_epochs = 1;
    cfg.plateau_patience = 100;
    cfg.seed = 202;
    auto base = std::filesystem::temp_directory_path() / "dti_prop_det";
    std::filesystem::remove_all(base);
    training::fit(ds, cfg, (base / "a").string());
    training::fit(ds, cfg, (base / "b").string());
    auto a = slurp((base / "a" / "metrics.jsonl").string());
    CHECK(!a.empty());
    CHECK(a == slurp((base / "b" / "metrics.jsonl").string()));
}
