#include "dti/nn.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>

namespace dti::nn {

using ad::Var;

using ad::make_op;

namespace {

void im2col(const float* img, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo,
            float* col, int64_t ld) {
    // col layout: [C*k*k, ld] with this sample's patch columns at `col`
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                float* dst = col + ((c * k + ki) * k + kj) * ld;
                for (int oi = 0; oi < Ho; ++oi) {
                    int ii = oi * stride - pad + ki;
                    for (int oj = 0; oj < Wo; ++oj) {
                        int jj = oj * stride - pad + kj;
                        dst[oi * Wo + oj] = (ii >= 0 && ii < H && jj >= 0 && jj < W)
                                                ? img[(c * H + ii) * W + jj]
                                                : 0.f;
                    }
                }
            }
}

void col2im(const float* col, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo,
            float* img, int64_t ld) {
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                const float* src = col + ((c * k + ki) * k + kj) * ld;
                for (int oi = 0; oi < Ho; ++oi) {
                    int ii = oi * stride - pad + ki;
                    if (ii < 0 || ii >= H) continue;
                    for (int oj = 0; oj < Wo; ++oj) {
                        int jj = oj * stride - pad + kj;
                        if (jj >= 0 && jj < W) img[(c * H + ii) * W + jj] += src[oi * Wo + oj];
                    }
                }
            }
}

// Batch samples into one wide GEMM; chunk so the column buffer stays modest.
int conv_chunk(int N, int ck, int hw) {
    const int64_t budget = 2LL << 20;  // floats
    int g = static_cast<int>(std::max<int64_t>(1, budget / (static_cast<int64_t>(ck) * hw)));
    return std::min(N, g);
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const auto& xs = x->value.shape();
    int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    int Cout = w->value.dim(0), k = w->value.dim(2);
    assert(w->value.dim(1) == C);
    int Ho = (H + 2 * pad - k) / stride + 1;
    int Wo = (W + 2 * pad - k) / stride + 1;
    int ck = C * k * k, hw = Ho * Wo;

    Tensor out({N, Cout, Ho, Wo});
    int g = conv_chunk(N, ck, hw);
    Tensor col({ck, static_cast<int>(g) * hw}), tmp({Cout, static_cast<int>(g) * hw});
    for (int n0 = 0; n0 < N; n0 += g) {
        int gn = std::min(g, N - n0);
        int64_t ld = static_cast<int64_t>(gn) * hw;
        for (int i = 0; i < gn; ++i)
            im2col(x->value.data() + static_cast<int64_t>(n0 + i) * C * H * W, C, H, W, k,
                   stride, pad, Ho, Wo, col.data() + static_cast<int64_t>(i) * hw, ld);
        cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, Cout, static_cast<int>(ld), ck,
                    1.f, w->value.data(), ck, col.data(), static_cast<int>(ld), 0.f, tmp.data(),
                    static_cast<int>(ld));
        for (int i = 0; i < gn; ++i)
            for (int c = 0; c < Cout; ++c)
                std::copy_n(tmp.data() + static_cast<int64_t>(c) * ld + static_cast<int64_t>(i) * hw,
                            hw, out.data() + (static_cast<int64_t>(n0 + i) * Cout + c) * hw);
    }
    if (b) {
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < Cout; ++c) {
                float* o = out.data() + (n * Cout + c) * hw;
                for (int i = 0; i < hw; ++i) o[i] += b->value[c];
            }
    }
    std::vector<Var> parents = b ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return make_op(
        std::move(out), parents,
        [x, w, b, N, C, H, W, Cout, k, stride, pad, Ho, Wo, ck, hw](ad::Node& n) {
            int g = conv_chunk(N, ck, hw);
            Tensor col({ck, g * hw}), dcol({ck, g * hw}), gbig({Cout, g * hw});
            for (int n0 = 0; n0 < N; n0 += g) {
                int gn = std::min(g, N - n0);
                int64_t ld = static_cast<int64_t>(gn) * hw;
                // gather grads into [Cout, gn*hw]
                for (int i = 0; i < gn; ++i)
                    for (int c = 0; c < Cout; ++c)
                        std::copy_n(
                            n.grad.data() + (static_cast<int64_t>(n0 + i) * Cout + c) * hw, hw,
                            gbig.data() + static_cast<int64_t>(c) * ld +
                                static_cast<int64_t>(i) * hw);
                if (w->requires_grad) {
                    for (int i = 0; i < gn; ++i)
                        im2col(x->value.data() + static_cast<int64_t>(n0 + i) * C * H * W, C, H,
                               W, k, stride, pad, Ho, Wo,
                               col.data() + static_cast<int64_t>(i) * hw, ld);
                    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, Cout, ck,
                                static_cast<int>(ld), 1.f, gbig.data(), static_cast<int>(ld),
                                col.data(), static_cast<int>(ld), 1.f,
                                w->ensure_grad().data(), ck);
                }
                if (x->requires_grad) {
                    cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, ck,
                                static_cast<int>(ld), Cout, 1.f, w->value.data(), ck,
                                gbig.data(), static_cast<int>(ld), 0.f, dcol.data(),
                                static_cast<int>(ld));
                    for (int i = 0; i < gn; ++i)
                        col2im(dcol.data() + static_cast<int64_t>(i) * hw, C, H, W, k, stride,
                               pad, Ho, Wo,
                               x->ensure_grad().data() + static_cast<int64_t>(n0 + i) * C * H * W,
                               ld);
                }
                if (b && b->requires_grad) {
                    Tensor& gb = b->ensure_grad();
                    for (int c = 0; c < Cout; ++c) {
                        const float* gr = gbig.data() + static_cast<int64_t>(c) * ld;
                        float s = 0.f;
                        for (int64_t j = 0; j < ld; ++j) s += gr[j];
                        gb[c] += s;
                    }
                }
            }
        });
}

Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta,
                const std::shared_ptr<BnStats>& stats, bool training, float momentum,
                float eps) {
    const auto& xs = x->value.shape();
    int N = xs[0], C = xs[1], HW = xs[2] * xs[3];
    int64_t m = static_cast<int64_t>(N) * HW;

    Tensor mean({C}), var({C});
    std::vector<float> ones(HW, 1.f);
    if (training) {
        std::vector<float> diff(HW);
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int n = 0; n < N; ++n)
                s += cblas_sdot(HW, x->value.data() + (n * C + c) * HW, 1, ones.data(), 1);
            mean[c] = static_cast<float>(s / m);
            double v = 0.0;
            for (int n = 0; n < N; ++n) {
                const float* p = x->value.data() + (n * C + c) * HW;
                for (int i = 0; i < HW; ++i) diff[i] = p[i] - mean[c];
                v += cblas_sdot(HW, diff.data(), 1, diff.data(), 1);
            }
            var[c] = static_cast<float>(v / m);
            stats->mean[c] = (1.f - momentum) * stats->mean[c] + momentum * mean[c];
            float unbiased = m > 1 ? var[c] * m / (m - 1) : var[c];
            stats->var[c] = (1.f - momentum) * stats->var[c] + momentum * unbiased;
        }
    } else {
        mean = stats->mean;
        var = stats->var;
    }

    Tensor invstd({C});
    for (int c = 0; c < C; ++c) invstd[c] = 1.f / std::sqrt(var[c] + eps);
    Tensor out(xs), xhat(xs);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float* p = x->value.data() + (n * C + c) * HW;
            float* xh = xhat.data() + (n * C + c) * HW;
            float* o = out.data() + (n * C + c) * HW;
            float g = gamma->value[c], bb = beta->value[c], mu = mean[c], is = invstd[c];
            for (int i = 0; i < HW; ++i) {
                xh[i] = (p[i] - mu) * is;
                o[i] = g * xh[i] + bb;
            }
        }

    auto xhat_sp = std::make_shared<Tensor>(std::move(xhat));
    auto invstd_sp = std::make_shared<Tensor>(std::move(invstd));
    return make_op(
        std::move(out), {x, gamma, beta},
        [x, gamma, beta, xhat_sp, invstd_sp, N, C, HW, m, training](ad::Node& n) {
            std::vector<float> ones(HW, 1.f);
            for (int c = 0; c < C; ++c) {
                double dg = 0.0, db = 0.0;
                for (int i = 0; i < N; ++i) {
                    const float* go = n.grad.data() + (i * C + c) * HW;
                    const float* xh = xhat_sp->data() + (i * C + c) * HW;
                    dg += cblas_sdot(HW, go, 1, xh, 1);
                    db += cblas_sdot(HW, go, 1, ones.data(), 1);
                }
                if (gamma->requires_grad) gamma->ensure_grad()[c] += static_cast<float>(dg);
                if (beta->requires_grad) beta->ensure_grad()[c] += static_cast<float>(db);
                if (x->requires_grad) {
                    float g = gamma->value[c] * (*invstd_sp)[c];
                    for (int i = 0; i < N; ++i) {
                        const float* go = n.grad.data() + (i * C + c) * HW;
                        const float* xh = xhat_sp->data() + (i * C + c) * HW;
                        float* gx = x->ensure_grad().data() + (i * C + c) * HW;
                        if (training) {
                            for (int j = 0; j < HW; ++j)
                                gx[j] += g * (go[j] - static_cast<float>(db) / m -
                                              xh[j] * static_cast<float>(dg) / m);
                        } else {
                            for (int j = 0; j < HW; ++j) gx[j] += g * go[j];
                        }
                    }
                }
            }
        });
}

Var maxpool2d(const Var& x, int k, int stride, int pad) {
    const auto& xs = x->value.shape();
    int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    int Ho = (H + 2 * pad - k) / stride + 1;
    int Wo = (W + 2 * pad - k) / stride + 1;
    Tensor out({N, C, Ho, Wo});
    auto argmax = std::make_shared<std::vector<int>>(static_cast<size_t>(out.numel()));
    int64_t idx = 0;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float* p = x->value.data() + (n * C + c) * H * W;
            for (int oi = 0; oi < Ho; ++oi)
                for (int oj = 0; oj < Wo; ++oj, ++idx) {
                    float best = -1e30f;
                    int besti = -1;
                    for (int ki = 0; ki < k; ++ki) {
                        int ii = oi * stride - pad + ki;
                        if (ii < 0 || ii >= H) continue;
                        for (int kj = 0; kj < k; ++kj) {
                            int jj = oj * stride - pad + kj;
                            if (jj < 0 || jj >= W) continue;
                            if (p[ii * W + jj] > best) {
                                best = p[ii * W + jj];
                                besti = ii * W + jj;
                            }
                        }
                    }
                    out[idx] = best;
                    (*argmax)[idx] = (n * C + c) * H * W + besti;
                }
        }
    return make_op(std::move(out), {x}, [x, argmax](ad::Node& n) {
        Tensor& g = x->ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) g[(*argmax)[i]] += n.grad[i];
    });
}

Var global_avg_pool(const Var& x) {
    const auto& xs = x->value.shape();
    int N = xs[0], C = xs[1], HW = xs[2] * xs[3];
    Tensor out({N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float* p = x->value.data() + (n * C + c) * HW;
            double s = 0.0;
            for (int i = 0; i < HW; ++i) s += p[i];
            out[n * C + c] = static_cast<float>(s / HW);
        }
    return make_op(std::move(out), {x}, [x, N, C, HW](ad::Node& n) {
        Tensor& g = x->ensure_grad();
        for (int i = 0; i < N; ++i)
            for (int c = 0; c < C; ++c) {
                float v = n.grad[i * C + c] / HW;
                float* gp = g.data() + (i * C + c) * HW;
                for (int j = 0; j < HW; ++j) gp[j] += v;
            }
    });
}

// ---- layers ----

Conv2d::Conv2d(int cin, int cout, int k, int stride_, int pad_, bool bias, Rng& rng)
    : stride(stride_), pad(pad_), has_bias(bias) {
    // Kaiming normal, fan-in
    float std_dev = std::sqrt(2.f / (cin * k * k));
    w = ad::leaf(randn({cout, cin, k, k}, rng, std_dev));
    if (bias) b = ad::leaf(Tensor({cout}));
}

Var Conv2d::forward(const Var& x) const { return conv2d(x, w, has_bias ? b : nullptr, stride, pad); }

void Conv2d::collect(const std::string& p, std::map<std::string, Var>& params,
                     std::map<std::string, std::shared_ptr<BnStats>>&) {
    params[p + ".w"] = w;
    if (has_bias) params[p + ".b"] = b;
}

BatchNorm2d::BatchNorm2d(int c) {
    gamma = ad::leaf(Tensor({c}, 1.f));
    beta = ad::leaf(Tensor({c}));
    stats = std::make_shared<BnStats>(BnStats{Tensor({c}), Tensor({c}, 1.f)});
}

Var BatchNorm2d::forward(const Var& x, bool training) const {
    return batchnorm2d(x, gamma, beta, stats, training);
}

void BatchNorm2d::collect(const std::string& p, std::map<std::string, Var>& params,
                          std::map<std::string, std::shared_ptr<BnStats>>& st) {
    params[p + ".gamma"] = gamma;
    params[p + ".beta"] = beta;
    st[p + ".stats"] = stats;
}

Linear::Linear(int in, int out, Rng& rng, bool zero_init) {
    if (zero_init) {
        w = ad::leaf(Tensor({out, in}));
        b = ad::leaf(Tensor({out}));
    } else {
        float bound = 1.f / std::sqrt(static_cast<float>(in));
        w = ad::leaf(rand_uniform({out, in}, rng, -bound, bound));
        b = ad::leaf(rand_uniform({out}, rng, -bound, bound));
    }
}

void Linear::collect(const std::string& p, std::map<std::string, Var>& params,
                     std::map<std::string, std::shared_ptr<BnStats>>&) {
    params[p + ".w"] = w;
    params[p + ".b"] = b;
}

ResidualBlock::ResidualBlock(int cin, int cout, int stride, Rng& rng) {
    conv1 = std::make_unique<Conv2d>(cin, cout, 3, stride, 1, false, rng);
    bn1 = std::make_unique<BatchNorm2d>(cout);
    conv2 = std::make_unique<Conv2d>(cout, cout, 3, 1, 1, false, rng);
    bn2 = std::make_unique<BatchNorm2d>(cout);
    if (stride != 1 || cin != cout) {
        proj = std::make_unique<Conv2d>(cin, cout, 1, stride, 0, false, rng);
        bn_proj = std::make_unique<BatchNorm2d>(cout);
    }
}

Var ResidualBlock::forward(const Var& x, bool training) const {
    Var h = ad::relu(bn1->forward(conv1->forward(x), training));
    h = bn2->forward(conv2->forward(h), training);
    Var skip = proj ? bn_proj->forward(proj->forward(x), training) : x;
    return ad::relu(ad::add(h, skip));
}

void ResidualBlock::collect(const std::string& p, std::map<std::string, Var>& params,
                            std::map<std::string, std::shared_ptr<BnStats>>& st) {
    conv1->collect(p + ".conv1", params, st);
    bn1->collect(p + ".bn1", params, st);
    conv2->collect(p + ".conv2", params, st);
    bn2->collect(p + ".bn2", params, st);
    if (proj) {
        proj->collect(p + ".proj", params, st);
        bn_proj->collect(p + ".bn_proj", params, st);
    }
}

ResNetBackbone::ResNetBackbone(Arch a, int in_channels, Rng& rng) : arch(a) {
    if (arch == Arch::resnet20) {
        stem = std::make_unique<Conv2d>(in_channels, 16, 3, 1, 1, false, rng);
        bn_stem = std::make_unique<BatchNorm2d>(16);
        int widths[3] = {16, 32, 64};
        int cin = 16;
        for (int s = 0; s < 3; ++s)
            for (int i = 0; i < 3; ++i) {
                blocks.push_back(std::make_unique<ResidualBlock>(
                    cin, widths[s], (s > 0 && i == 0) ? 2 : 1, rng));
                cin = widths[s];
            }
        out_features = 64;
    } else {
        stem = std::make_unique<Conv2d>(in_channels, 64, 7, 2, 3, false, rng);
        bn_stem = std::make_unique<BatchNorm2d>(64);
        stem_pool = true;
        int widths[4] = {64, 128, 256, 512};
        int cin = 64;
        for (int s = 0; s < 4; ++s)
            for (int i = 0; i < 2; ++i) {
                blocks.push_back(std::make_unique<ResidualBlock>(
                    cin, widths[s], (s > 0 && i == 0) ? 2 : 1, rng));
                cin = widths[s];
            }
        out_features = 512;
    }
}

Var ResNetBackbone::forward(const Var& x, bool training) const {
    Var h = ad::relu(bn_stem->forward(stem->forward(x), training));
    if (stem_pool) h = maxpool2d(h, 3, 2, 1);
    for (const auto& b : blocks) h = b->forward(h, training);
    return global_avg_pool(h);
}

void ResNetBackbone::collect(const std::string& p, std::map<std::string, Var>& params,
                             std::map<std::string, std::shared_ptr<BnStats>>& st) {
    stem->collect(p + ".stem", params, st);
    bn_stem->collect(p + ".bn_stem", params, st);
    for (size_t i = 0; i < blocks.size(); ++i)
        blocks[i]->collect(p + ".block" + std::to_string(i), params, st);
}

MlpHead::MlpHead(int in, int out, Rng& rng) {
    fc1 = std::make_unique<Linear>(in, 128, rng);
    fc2 = std::make_unique<Linear>(128, 128, rng);
    fc3 = std::make_unique<Linear>(128, out, rng, /*zero_init=*/true);
}

Var MlpHead::forward(const Var& x) const {
    return fc3->forward(ad::relu(fc2->forward(ad::relu(fc1->forward(x)))));
}

void MlpHead::collect(const std::string& p, std::map<std::string, Var>& params,
                      std::map<std::string, std::shared_ptr<BnStats>>& st) {
    fc1->collect(p + ".fc1", params, st);
    fc2->collect(p + ".fc2", params, st);
    fc3->collect(p + ".fc3", params, st);
}

}  // namespace dti::nn
