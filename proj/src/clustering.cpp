#include "dti/clustering.hpp"

#include <cmath>

namespace dti::clustering {

using namespace transforms;

namespace {
// an empty recipe leaves prototypes unbatched; tile across the batch
Var tile_batch(const Var& v, int N) {
    if (v->value.dim(0) == N) return v;
    int64_t sz = v->value.numel() / v->value.dim(0);
    std::vector<int> s = v->value.shape();
    s[0] = N;
    Tensor out(s);
    for (int n = 0; n < N; ++n) std::copy_n(v->value.data(), sz, out.data() + n * sz);
    return ad::make_op(std::move(out), {v}, [v, N, sz](ad::Node& node) {
        Tensor& g = v->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int64_t i = 0; i < sz; ++i) g[i] += node.grad[n * sz + i];
    });
}

Tensor expand_weights(const Tensor& w, int C) {
    // [H,W] -> per-sample element weights [C*H*W]
    if (w.numel() == 0) return {};
    Tensor out({C * w.dim(0) * w.dim(1)});
    for (int c = 0; c < C; ++c)
        std::copy_n(w.data(), w.numel(), out.data() + c * w.numel());
    return out;
}
}  // namespace

KMeansLossResult kmeans_loss(const Tensor& batch, const KMeansState& state,
                             const std::vector<TransformStep>& steps,
                             const PredictedParams& predicted, const Tensor& weights) {
    int N = batch.dim(0), K = state.k();
    int C = batch.dim(1);
    Tensor wflat = expand_weights(weights, C);

    std::vector<Var> per_cluster(K);
    Tensor dists({N, K});
    for (int k = 0; k < K; ++k) {
        Var warped = tile_batch(apply_steps(state.prototypes[k], steps, predicted[k]), N);
        Var diff = ad::sub(warped, ad::constant(batch));
        per_cluster[k] = ad::rowsum_weighted(ad::square(diff), wflat);
        for (int i = 0; i < N; ++i) dists[i * K + k] = per_cluster[k]->value[i];
    }

    std::vector<int> assign(N);
    for (int i = 0; i < N; ++i) {
        int best = 0;
        for (int k = 1; k < K; ++k)
            if (dists[i * K + k] < dists[i * K + best]) best = k;
        assign[i] = best;
    }

    Var loss;
    for (int k = 0; k < K; ++k) {
        Tensor mask({N});
        bool any = false;
        for (int i = 0; i < N; ++i)
            if (assign[i] == k) {
                mask[i] = 1.f;
                any = true;
            }
        if (!any) continue;
        Var term = ad::dot_const(per_cluster[k], mask);
        loss = loss ? ad::add(loss, term) : term;
    }
    loss = ad::mul_scalar(loss, 1.f / N);
    return {loss, std::move(assign), std::move(dists)};
}

Tensor gaussian_weight(int H, int W, float sigma) {
    if (sigma <= 0.f) throw std::invalid_argument("gaussian_weight: sigma must be > 0");
    Tensor w({H, W});
    float uc = (H - 1) * 0.5f, vc = (W - 1) * 0.5f;
    for (int u = 0; u < H; ++u)
        for (int v = 0; v < W; ++v)
            w[u * W + v] =
                std::exp(-((u - uc) * (u - uc) + (v - vc) * (v - vc)) / (2.f * sigma * sigma));
    // even dims put the center between pixels; rescale so the max is exactly 1
    float m = w.max_abs();
    for (int64_t i = 0; i < w.numel(); ++i) w[i] /= m;
    return w;
}

GMMForward gmm_forward(const Tensor& batch, const GMMState& state,
                       const std::vector<TransformStep>& steps,
                       const PredictedParams& predicted) {
    int N = batch.dim(0), K = state.k();
    int64_t D = batch.numel() / N;
    Tensor flat = batch;
    flat.reshape({N, static_cast<int>(D)});

    GMMForward out;
    out.log_density.resize(K);
    for (int k = 0; k < K; ++k) {
        Var mu_w = tile_batch(apply_steps(state.means[k], steps, predicted[k]), N);
        Var var_img = ad::square(state.var_params[k]);
        Var var_w = tile_batch(
            apply_steps(var_img, steps, predicted[k], Pad::border, /*covariance=*/true), N);
        var_w = ad::add_scalar(var_w, state.sigma_min * state.sigma_min);
        out.log_density[k] =
            ad::gauss_logdensity(flat, ad::reshape(mu_w, {N, static_cast<int>(D)}),
                                 ad::reshape(var_w, {N, static_cast<int>(D)}));
        for (int i = 0; i < N; ++i)
            if (!std::isfinite(out.log_density[k]->value[i]))
                throw std::runtime_error("gmm: non-finite log density (divergence)");
    }

    // mixing logits -> log pi
    Tensor eta({K});
    for (int k = 0; k < K; ++k) eta[k] = state.mixing_logits[k]->value[0];
    Var eta_cat = ad::make_op(
        eta,
        std::vector<Var>(state.mixing_logits.begin(), state.mixing_logits.end()),
        [logits = state.mixing_logits](ad::Node& n) {
            for (size_t k = 0; k < logits.size(); ++k)
                if (logits[k]->requires_grad) logits[k]->ensure_grad()[0] += n.grad[k];
        });
    out.log_pi = ad::log_softmax(eta_cat);

    // E-step in log space; gamma is detached (standard EM semantics)
    out.resp.gamma = Tensor({N, K});
    out.assignments.resize(N);
    for (int i = 0; i < N; ++i) {
        double mx = -1e300;
        std::vector<double> lg(K);
        for (int k = 0; k < K; ++k) {
            lg[k] = static_cast<double>(out.log_pi->value[k]) + out.log_density[k]->value[i];
            mx = std::max(mx, lg[k]);
        }
        double z = 0.0;
        for (int k = 0; k < K; ++k) z += std::exp(lg[k] - mx);
        int best = 0;
        for (int k = 0; k < K; ++k) {
            out.resp.gamma[i * K + k] = static_cast<float>(std::exp(lg[k] - mx) / z);
            if (lg[k] > lg[best]) best = k;
        }
        out.assignments[i] = best;
    }

    // M-step objective: -(1/N) sum_i sum_k gamma_ki (logG_ki + log pi_k)
    Var loss;
    Tensor gamma_colsum({K});
    for (int k = 0; k < K; ++k) {
        Tensor col({N});
        double cs = 0.0;
        for (int i = 0; i < N; ++i) {
            col[i] = out.resp.gamma[i * K + k];
            cs += col[i];
        }
        gamma_colsum[k] = static_cast<float>(cs);
        Var term = ad::dot_const(out.log_density[k], col);
        loss = loss ? ad::add(loss, term) : term;
    }
    loss = ad::add(loss, ad::dot_const(out.log_pi, gamma_colsum));
    out.m_loss = ad::mul_scalar(loss, -1.f / N);
    return out;
}

Responsibilities gmm_e_step(const Tensor& batch, const GMMState& state,
                            const std::vector<TransformStep>& steps,
                            const PredictedParams& predicted) {
    return gmm_forward(batch, state, steps, predicted).resp;
}

std::vector<int> gmm_assign(const Tensor& batch, const GMMState& state,
                            const std::vector<TransformStep>& steps,
                            const PredictedParams& predicted) {
    return gmm_forward(batch, state, steps, predicted).assignments;
}

KMeansLossResult ti_loss(const Tensor& batch, const KMeansState& state,
                         const std::vector<TransformStep>& steps,
                         const PredictedParams& per_sample_params, const Tensor& weights) {
    return kmeans_loss(batch, state, steps, per_sample_params, weights);
}

}  // namespace dti::clustering
