#include "dti/transforms.hpp"

#include <cmath>
#include <map>
#include <mutex>

namespace dti::transforms {

using ad::Var;
using ad::make_op;

std::string kind_name(Kind k) {
    switch (k) {
        case Kind::identity: return "id";
        case Kind::affine: return "aff";
        case Kind::projective: return "proj";
        case Kind::tps: return "tps";
        case Kind::color: return "col";
        case Kind::morpho: return "morpho";
    }
    return "?";
}

Kind kind_from_name(const std::string& s) {
    if (s == "id" || s == "identity") return Kind::identity;
    if (s == "aff" || s == "affine") return Kind::affine;
    if (s == "proj" || s == "projective") return Kind::projective;
    if (s == "tps") return Kind::tps;
    if (s == "col" || s == "color") return Kind::color;
    if (s == "morpho" || s == "mor") return Kind::morpho;
    throw std::invalid_argument("unknown transform kind: " + s);
}

TransformStep make_step(Kind kind, int channels) {
    TransformStep s;
    s.kind = kind;
    s.applies_to_covariance =
        kind == Kind::affine || kind == Kind::projective || kind == Kind::tps;
    switch (kind) {
        case Kind::identity: s.param_count = 0; break;
        case Kind::affine: s.param_count = 6; break;
        case Kind::projective: s.param_count = 8; break;
        case Kind::tps: s.param_count = 32; break;
        case Kind::color: s.param_count = 2 * channels; break;
        case Kind::morpho: s.param_count = 1 + kMorphoWindow * kMorphoWindow; break;
    }
    s.identity_params = Tensor({s.param_count});
    if (kind == Kind::morpho) {
        // alpha = 0; kernel logits saturated to a one-hot at the center.
        // +/-14 keeps the worst-case identity residual on binary images
        // under 1e-4 (48 * sigmoid(-14) ~ 4e-5); +/-12 does not.
        for (int i = 1; i < s.param_count; ++i) s.identity_params[i] = -14.f;
        int c = kMorphoWindow / 2;
        s.identity_params[1 + c * kMorphoWindow + c] = 14.f;
    }
    return s;
}

std::vector<TransformStep> parse_recipe(const std::string& recipe, int channels) {
    std::vector<TransformStep> steps;
    if (recipe.empty()) return steps;
    size_t start = 0;
    while (start <= recipe.size()) {
        size_t end = recipe.find('-', start);
        if (end == std::string::npos) end = recipe.size();
        std::string tok = recipe.substr(start, end - start);
        if (!tok.empty()) steps.push_back(make_step(kind_from_name(tok), channels));
        start = end + 1;
        if (end == recipe.size()) break;
    }
    return steps;
}

std::string recipe_string(const std::vector<TransformStep>& steps) {
    std::string s;
    for (size_t i = 0; i < steps.size(); ++i) s += (i ? "-" : "") + kind_name(steps[i].kind);
    return s;
}

Tensor identity_grid(int H, int W) {
    Tensor g({H, W, 2});
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            g[(i * W + j) * 2 + 0] = (2.f * j - (W - 1)) / W;
            g[(i * W + j) * 2 + 1] = (2.f * i - (H - 1)) / H;
        }
    return g;
}

// ---- TPS basis ----

namespace {

// 4x4 control lattice over [-1,1]^2, row-major (x fastest)
constexpr int kTpsN = 16;

void control_points(double* cx, double* cy) {
    const double c[4] = {-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0};
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            cx[i * 4 + j] = c[j];
            cy[i * 4 + j] = c[i];
        }
}

double tps_u(double r2) { return r2 > 0.0 ? r2 * 0.5 * std::log(r2) : 0.0; }

// Gauss-Jordan inverse of an n x n matrix in doubles (n = 19; fine).
void invert(std::vector<double>& m, int n) {
    std::vector<double> inv(n * n, 0.0);
    for (int i = 0; i < n; ++i) inv[i * n + i] = 1.0;
    for (int col = 0; col < n; ++col) {
        int piv = col;
        for (int r = col + 1; r < n; ++r)
            if (std::abs(m[r * n + col]) > std::abs(m[piv * n + col])) piv = r;
        if (std::abs(m[piv * n + col]) < 1e-14)
            throw std::runtime_error("tps: singular system");
        if (piv != col)
            for (int j = 0; j < n; ++j) {
                std::swap(m[piv * n + j], m[col * n + j]);
                std::swap(inv[piv * n + j], inv[col * n + j]);
            }
        double d = m[col * n + col];
        for (int j = 0; j < n; ++j) {
            m[col * n + j] /= d;
            inv[col * n + j] /= d;
        }
        for (int r = 0; r < n; ++r) {
            if (r == col) continue;
            double f = m[r * n + col];
            if (f == 0.0) continue;
            for (int j = 0; j < n; ++j) {
                m[r * n + j] -= f * m[col * n + j];
                inv[r * n + j] -= f * inv[col * n + j];
            }
        }
    }
    m = std::move(inv);
}

}  // namespace

const Tensor& tps_basis(int H, int W) {
    static std::map<std::pair<int, int>, Tensor> cache;
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find({H, W});
    if (it != cache.end()) return it->second;

    double cx[kTpsN], cy[kTpsN];
    control_points(cx, cy);
    const int n = kTpsN + 3;
    std::vector<double> L(n * n, 0.0);
    for (int i = 0; i < kTpsN; ++i) {
        for (int j = 0; j < kTpsN; ++j) {
            double dx = cx[i] - cx[j], dy = cy[i] - cy[j];
            L[i * n + j] = tps_u(dx * dx + dy * dy);
        }
        L[i * n + kTpsN] = 1.0;
        L[i * n + kTpsN + 1] = cx[i];
        L[i * n + kTpsN + 2] = cy[i];
        L[(kTpsN)*n + i] = 1.0;
        L[(kTpsN + 1) * n + i] = cx[i];
        L[(kTpsN + 2) * n + i] = cy[i];
    }
    invert(L, n);

    Tensor id = identity_grid(H, W);
    Tensor basis({H * W, kTpsN});
    for (int p = 0; p < H * W; ++p) {
        double px = id[p * 2 + 0], py = id[p * 2 + 1];
        double phi[kTpsN + 3];
        for (int j = 0; j < kTpsN; ++j) {
            double dx = px - cx[j], dy = py - cy[j];
            phi[j] = tps_u(dx * dx + dy * dy);
        }
        phi[kTpsN] = 1.0;
        phi[kTpsN + 1] = px;
        phi[kTpsN + 2] = py;
        for (int j = 0; j < kTpsN; ++j) {
            double acc = 0.0;
            for (int t = 0; t < n; ++t) acc += phi[t] * L[t * n + j];
            basis[p * kTpsN + j] = static_cast<float>(acc);
        }
    }
    return cache.emplace(std::make_pair(H, W), std::move(basis)).first->second;
}

// ---- grids ----

Var make_grid_batch(Kind kind, const Var& params, int H, int W) {
    if (H < 2 || W < 2) throw std::invalid_argument("make_grid: H,W must be >= 2");
    int N = params->value.dim(0);
    int P = params->value.dim(1);
    Tensor id = identity_grid(H, W);
    int HW = H * W;

    if (kind == Kind::affine) {
        if (P != 6) throw std::invalid_argument("affine grid expects 6 params");
        Tensor out({N, H, W, 2});
        for (int n = 0; n < N; ++n) {
            const float* p = params->value.data() + n * 6;
            float* g = out.data() + n * HW * 2;
            for (int q = 0; q < HW; ++q) {
                float x = id[q * 2], y = id[q * 2 + 1];
                g[q * 2 + 0] = (1.f + p[0]) * x + p[1] * y + p[2];
                g[q * 2 + 1] = p[3] * x + (1.f + p[4]) * y + p[5];
            }
        }
        return make_op(std::move(out), {params}, [params, id, N, HW](ad::Node& node) {
            Tensor& g = params->ensure_grad();
            for (int n = 0; n < N; ++n) {
                const float* go = node.grad.data() + n * HW * 2;
                float* gp = g.data() + n * 6;
                for (int q = 0; q < HW; ++q) {
                    float x = id[q * 2], y = id[q * 2 + 1];
                    gp[0] += go[q * 2] * x;
                    gp[1] += go[q * 2] * y;
                    gp[2] += go[q * 2];
                    gp[3] += go[q * 2 + 1] * x;
                    gp[4] += go[q * 2 + 1] * y;
                    gp[5] += go[q * 2 + 1];
                }
            }
        });
    }

    if (kind == Kind::projective) {
        if (P != 8) throw std::invalid_argument("projective grid expects 8 params");
        for (int n = 0; n < N; ++n) {
            const float* p = params->value.data() + n * 8;
            double m[9] = {1.0 + p[0], p[1], p[2], p[3], 1.0 + p[4], p[5], p[6], p[7], 1.0};
            double det = m[0] * (m[4] * m[8] - m[5] * m[7]) -
                         m[1] * (m[3] * m[8] - m[5] * m[6]) +
                         m[2] * (m[3] * m[7] - m[4] * m[6]);
            if (std::abs(det) < 1e-8)
                throw DegenerateTransformError("projective matrix is singular");
        }
        Tensor out({N, H, W, 2});
        for (int n = 0; n < N; ++n) {
            const float* p = params->value.data() + n * 8;
            float* g = out.data() + n * HW * 2;
            for (int q = 0; q < HW; ++q) {
                float x = id[q * 2], y = id[q * 2 + 1];
                float d = p[6] * x + p[7] * y + 1.f;
                g[q * 2 + 0] = ((1.f + p[0]) * x + p[1] * y + p[2]) / d;
                g[q * 2 + 1] = (p[3] * x + (1.f + p[4]) * y + p[5]) / d;
            }
        }
        return make_op(std::move(out), {params}, [params, id, N, HW](ad::Node& node) {
            Tensor& g = params->ensure_grad();
            for (int n = 0; n < N; ++n) {
                const float* p = params->value.data() + n * 8;
                const float* go = node.grad.data() + n * HW * 2;
                const float* ov = node.value.data() + n * HW * 2;
                float* gp = g.data() + n * 8;
                for (int q = 0; q < HW; ++q) {
                    float x = id[q * 2], y = id[q * 2 + 1];
                    float d = p[6] * x + p[7] * y + 1.f;
                    float gx = go[q * 2] / d, gy = go[q * 2 + 1] / d;
                    gp[0] += gx * x;
                    gp[1] += gx * y;
                    gp[2] += gx;
                    gp[3] += gy * x;
                    gp[4] += gy * y;
                    gp[5] += gy;
                    gp[6] += -(gx * ov[q * 2] + gy * ov[q * 2 + 1]) * x;
                    gp[7] += -(gx * ov[q * 2] + gy * ov[q * 2 + 1]) * y;
                }
            }
        });
    }

    if (kind == Kind::tps) {
        if (P != 2 * kTpsN) throw std::invalid_argument("tps grid expects 32 params");
        const Tensor& B = tps_basis(H, W);
        Tensor out({N, H, W, 2});
        for (int n = 0; n < N; ++n) {
            const float* dx = params->value.data() + n * P;        // first 16
            const float* dy = params->value.data() + n * P + kTpsN;  // last 16
            float* g = out.data() + n * HW * 2;
            for (int q = 0; q < HW; ++q) {
                float ox = 0.f, oy = 0.f;
                const float* b = B.data() + q * kTpsN;
                for (int j = 0; j < kTpsN; ++j) {
                    ox += b[j] * dx[j];
                    oy += b[j] * dy[j];
                }
                g[q * 2 + 0] = id[q * 2] + ox;
                g[q * 2 + 1] = id[q * 2 + 1] + oy;
            }
        }
        return make_op(std::move(out), {params}, [params, &B, N, HW, P](ad::Node& node) {
            Tensor& g = params->ensure_grad();
            for (int n = 0; n < N; ++n) {
                const float* go = node.grad.data() + n * HW * 2;
                float* gdx = g.data() + n * P;
                float* gdy = g.data() + n * P + kTpsN;
                for (int q = 0; q < HW; ++q) {
                    const float* b = B.data() + q * kTpsN;
                    for (int j = 0; j < kTpsN; ++j) {
                        gdx[j] += go[q * 2] * b[j];
                        gdy[j] += go[q * 2 + 1] * b[j];
                    }
                }
            }
        });
    }

    throw std::invalid_argument("make_grid: kind has no sampling grid");
}

// ---- sampling ----

Var grid_sample(const Var& img, const Var& grid, Pad pad) {
    bool shared = img->value.ndim() == 3;
    const auto& gs = grid->value.shape();
    int N = gs[0], Ho = gs[1], Wo = gs[2];
    int C = shared ? img->value.dim(0) : img->value.dim(1);
    int H = shared ? img->value.dim(1) : img->value.dim(2);
    int W = shared ? img->value.dim(2) : img->value.dim(3);
    if (!shared && img->value.dim(0) != N)
        throw std::invalid_argument("grid_sample: batch mismatch");

    Tensor out({N, C, Ho, Wo});
    // forward when node==nullptr, backward otherwise
    auto run = [img, grid, pad, shared, N, Ho, Wo, C, H, W](Tensor* out_t, ad::Node* node) {
        for (int n = 0; n < N; ++n) {
            const float* src = img->value.data() + (shared ? 0 : n * C * H * W);
            for (int q = 0; q < Ho * Wo; ++q) {
                float xs = grid->value[(n * Ho * Wo + q) * 2 + 0];
                float ys = grid->value[(n * Ho * Wo + q) * 2 + 1];
                float fx = (xs * W + W - 1) * 0.5f;
                float fy = (ys * H + H - 1) * 0.5f;
                // snap to pixel centers: keeps identity grids and exact 90
                // degree rotations bit-exact despite float rounding
                if (std::abs(fx - std::round(fx)) < 1e-4f) fx = std::round(fx);
                if (std::abs(fy - std::round(fy)) < 1e-4f) fy = std::round(fy);
                int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
                float wx = fx - x0, wy = fy - y0;
                int xi[2] = {x0, x0 + 1}, yi[2] = {y0, y0 + 1};
                float cw[2][2] = {{(1 - wx) * (1 - wy), wx * (1 - wy)},
                                  {(1 - wx) * wy, wx * wy}};
                bool inb[2][2];
                int cx[2], cy[2];
                for (int t = 0; t < 2; ++t) {
                    cx[t] = std::clamp(xi[t], 0, W - 1);
                    cy[t] = std::clamp(yi[t], 0, H - 1);
                }
                for (int a = 0; a < 2; ++a)
                    for (int b = 0; b < 2; ++b)
                        inb[a][b] = xi[b] >= 0 && xi[b] < W && yi[a] >= 0 && yi[a] < H;

                for (int c = 0; c < C; ++c) {
                    const float* sc = src + c * H * W;
                    int64_t oidx = ((static_cast<int64_t>(n) * C + c) * Ho * Wo) + q;
                    if (!node) {
                        float acc = 0.f;
                        for (int a = 0; a < 2; ++a)
                            for (int b = 0; b < 2; ++b) {
                                if (pad == Pad::zeros && !inb[a][b]) continue;
                                acc += cw[a][b] * sc[cy[a] * W + cx[b]];
                            }
                        (*out_t)[oidx] = acc;
                    } else {
                        float go = node->grad[oidx];
                        if (go == 0.f) continue;
                        if (img->requires_grad) {
                            float* gi = img->ensure_grad().data() +
                                        (shared ? 0 : n * C * H * W) + c * H * W;
                            for (int a = 0; a < 2; ++a)
                                for (int b = 0; b < 2; ++b) {
                                    if (pad == Pad::zeros && !inb[a][b]) continue;
                                    gi[cy[a] * W + cx[b]] += go * cw[a][b];
                                }
                        }
                        if (grid->requires_grad) {
                            // d(out)/d(fx), d(out)/d(fy) from the bilinear form
                            float v[2][2];
                            for (int a = 0; a < 2; ++a)
                                for (int b = 0; b < 2; ++b)
                                    v[a][b] = (pad == Pad::zeros && !inb[a][b])
                                                  ? 0.f
                                                  : sc[cy[a] * W + cx[b]];
                            float dfx = (1 - wy) * (v[0][1] - v[0][0]) + wy * (v[1][1] - v[1][0]);
                            float dfy = (1 - wx) * (v[1][0] - v[0][0]) + wx * (v[1][1] - v[0][1]);
                            Tensor& gg = grid->ensure_grad();
                            gg[(n * Ho * Wo + q) * 2 + 0] += go * dfx * (W * 0.5f);
                            gg[(n * Ho * Wo + q) * 2 + 1] += go * dfy * (H * 0.5f);
                        }
                    }
                }
            }
        }
    };
    run(&out, nullptr);
    return make_op(std::move(out), {img, grid},
                   [run](ad::Node& node) { run(nullptr, &node); });
}

// ---- color ----

Var color_apply_batch(const Var& img, const Var& params) {
    bool shared = img->value.ndim() == 3;
    int N = params->value.dim(0);
    int C = shared ? img->value.dim(0) : img->value.dim(1);
    if (params->value.dim(1) != 2 * C)
        throw std::invalid_argument("color_apply: expected 2*C params");
    if (!shared && img->value.dim(0) != N)
        throw std::invalid_argument("color_apply: batch mismatch");
    int HW = shared ? img->value.dim(1) * img->value.dim(2)
                    : img->value.dim(2) * img->value.dim(3);

    Tensor out({N, C, img->value.dim(shared ? 1 : 2), img->value.dim(shared ? 2 : 3)});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float* src = img->value.data() + (shared ? 0 : n * C * HW) + c * HW;
            const float* p = params->value.data() + n * 2 * C + 2 * c;
            float* o = out.data() + (n * C + c) * HW;
            for (int i = 0; i < HW; ++i) o[i] = (1.f + p[0]) * src[i] + p[1];
        }
    return make_op(std::move(out), {img, params}, [img, params, shared, N, C, HW](ad::Node& node) {
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const float* go = node.grad.data() + (n * C + c) * HW;
                const float* src = img->value.data() + (shared ? 0 : n * C * HW) + c * HW;
                const float* p = params->value.data() + n * 2 * C + 2 * c;
                if (img->requires_grad) {
                    float* gi = img->ensure_grad().data() + (shared ? 0 : n * C * HW) + c * HW;
                    for (int i = 0; i < HW; ++i) gi[i] += go[i] * (1.f + p[0]);
                }
                if (params->requires_grad) {
                    float* gp = params->ensure_grad().data() + n * 2 * C + 2 * c;
                    double gs = 0.0, gt = 0.0;
                    for (int i = 0; i < HW; ++i) {
                        gs += static_cast<double>(go[i]) * src[i];
                        gt += go[i];
                    }
                    gp[0] += static_cast<float>(gs);
                    gp[1] += static_cast<float>(gt);
                }
            }
    });
}

// ---- morphology ----

namespace {
constexpr int kW = kMorphoWindow;
constexpr int kHalf = kW / 2;
constexpr int kK2 = kW * kW;
}  // namespace

namespace {

// Replicate-pad a [H,W] plane into a [(H+2h),(W+2h)] buffer.
void pad_replicate(const float* src, int H, int W, int h, float* dst) {
    int Wp = W + 2 * h;
    for (int i = -h; i < H + h; ++i) {
        int si = std::clamp(i, 0, H - 1);
        float* row = dst + (i + h) * Wp;
        const float* srow = src + si * W;
        for (int j = -h; j < W + h; ++j) row[j + h] = srow[std::clamp(j, 0, W - 1)];
    }
}

// Adjoint of replicate padding: fold pad contributions back onto edges.
void fold_replicate(const float* pad, int H, int W, int h, float* dst) {
    int Wp = W + 2 * h;
    for (int i = -h; i < H + h; ++i) {
        int si = std::clamp(i, 0, H - 1);
        const float* row = pad + (i + h) * Wp;
        float* drow = dst + si * W;
        for (int j = -h; j < W + h; ++j) drow[std::clamp(j, 0, W - 1)] += row[j + h];
    }
}

}  // namespace

// The window exponential e^{alpha x} depends on the source pixel only, so
// it is computed once per pixel; window sums become 49 shifted axpy passes.
Var morpho_apply_batch(const Var& img, const Var& params) {
    bool shared = img->value.ndim() == 3;
    int N = params->value.dim(0);
    if (params->value.dim(1) != 1 + kK2)
        throw std::invalid_argument("morpho_apply: expected 50 params");
    int C = shared ? img->value.dim(0) : img->value.dim(1);
    int H = shared ? img->value.dim(1) : img->value.dim(2);
    int W = shared ? img->value.dim(2) : img->value.dim(3);
    if (!shared && img->value.dim(0) != N)
        throw std::invalid_argument("morpho_apply: batch mismatch");

    int Hp = H + 2 * kHalf, Wp = W + 2 * kHalf;
    int HW = H * W, HWp = Hp * Wp;
    Tensor out({N, C, H, W});
    // saved per (n,c): Zsum; padded E and E*x are recomputed in backward
    auto zsave = std::make_shared<Tensor>(Tensor({N, C, H, W}));

    auto compute_planes = [=](int n, int c, std::vector<float>& Epad, std::vector<float>& Qpad,
                              float alpha) {
        const float* src = img->value.data() + (shared ? 0 : n * C * HW) + c * HW;
        float m = alpha * src[0];
        for (int i = 1; i < HW; ++i) m = std::max(m, alpha * src[i]);
        std::vector<float> E(HW), Q(HW);
        for (int i = 0; i < HW; ++i) {
            float e = std::exp(std::max(alpha * src[i] - m, -80.f));
            E[i] = e;
            Q[i] = e * src[i];
        }
        Epad.resize(HWp);
        Qpad.resize(HWp);
        pad_replicate(E.data(), H, W, kHalf, Epad.data());
        pad_replicate(Q.data(), H, W, kHalf, Qpad.data());
    };

    for (int n = 0; n < N; ++n) {
        const float* pp = params->value.data() + n * (1 + kK2);
        float alpha = pp[0];
        float a[kK2];
        for (int j = 0; j < kK2; ++j) a[j] = 1.f / (1.f + std::exp(-pp[1 + j]));
        for (int c = 0; c < C; ++c) {
            std::vector<float> Epad, Qpad;
            compute_planes(n, c, Epad, Qpad, alpha);
            std::vector<float> S(HW, 0.f), Z(HW, 0.f);
            for (int j = 0; j < kK2; ++j) {
                int du = j / kW - kHalf, dv = j % kW - kHalf;
                float aj = a[j];
                for (int u = 0; u < H; ++u) {
                    const float* er = Epad.data() + (u + du + kHalf) * Wp + dv + kHalf;
                    const float* qr = Qpad.data() + (u + du + kHalf) * Wp + dv + kHalf;
                    float* sr = S.data() + u * W;
                    float* zr = Z.data() + u * W;
                    for (int v = 0; v < W; ++v) {
                        sr[v] += aj * qr[v];
                        zr[v] += aj * er[v];
                    }
                }
            }
            float* o = out.data() + (n * C + c) * HW;
            float* zs = zsave->data() + (n * C + c) * HW;
            for (int i = 0; i < HW; ++i) {
                zs[i] = Z[i] + 1e-12f;
                o[i] = S[i] / zs[i];
            }
        }
    }

    auto out_sp = std::make_shared<Tensor>(out);  // values needed in backward
    return make_op(
        std::move(out), {img, params},
        [img, params, zsave, out_sp, compute_planes, shared, N, C, H, W, HW, HWp,
         Wp](ad::Node& node) {
            for (int n = 0; n < N; ++n) {
                const float* pp = params->value.data() + n * (1 + kK2);
                float alpha = pp[0];
                float a[kK2];
                for (int j = 0; j < kK2; ++j) a[j] = 1.f / (1.f + std::exp(-pp[1 + j]));
                float* gp = params->requires_grad
                                ? params->ensure_grad().data() + n * (1 + kK2)
                                : nullptr;
                for (int c = 0; c < C; ++c) {
                    std::vector<float> Epad, Qpad;
                    compute_planes(n, c, Epad, Qpad, alpha);
                    const float* src =
                        img->value.data() + (shared ? 0 : n * C * HW) + c * HW;
                    const float* o = out_sp->data() + (n * C + c) * HW;
                    const float* zs = zsave->data() + (n * C + c) * HW;
                    const float* go = node.grad.data() + (n * C + c) * HW;
                    // u = go/Z, t = u*o
                    std::vector<float> uu(HW), tt(HW);
                    for (int i = 0; i < HW; ++i) {
                        uu[i] = go[i] / zs[i];
                        tt[i] = uu[i] * o[i];
                    }
                    std::vector<float> R2pad;
                    if (gp) {
                        // R2 = E * x^2 (for d/dalpha)
                        std::vector<float> R2(HW);
                        for (int i = 0; i < HW; ++i)
                            R2[i] = Qpad[(i / W + kHalf) * Wp + i % W + kHalf] * src[i];
                        R2pad.resize(HWp);
                        pad_replicate(R2.data(), H, W, kHalf, R2pad.data());
                    }
                    std::vector<float> apadbuf;
                    float* gipad = nullptr;
                    if (img->requires_grad) {
                        apadbuf.assign(HWp, 0.f);
                        gipad = apadbuf.data();
                    }
                    double galpha = 0.0;
                    for (int j = 0; j < kK2; ++j) {
                        int du = j / kW - kHalf, dv = j % kW - kHalf;
                        float aj = a[j];
                        double gaj = 0.0, raj = 0.0;
                        for (int u = 0; u < H; ++u) {
                            const float* er = Epad.data() + (u + du + kHalf) * Wp + dv + kHalf;
                            const float* qr = Qpad.data() + (u + du + kHalf) * Wp + dv + kHalf;
                            const float* ur = uu.data() + u * W;
                            const float* tr = tt.data() + u * W;
                            for (int v = 0; v < W; ++v) {
                                float contrib = ur[v] * qr[v] - tr[v] * er[v];
                                gaj += contrib;
                            }
                            if (gp) {
                                const float* rr =
                                    R2pad.data() + (u + du + kHalf) * Wp + dv + kHalf;
                                for (int v = 0; v < W; ++v)
                                    raj += ur[v] * rr[v] - tr[v] * qr[v];
                            }
                            if (gipad) {
                                // scatter into padded grad buffer at (u+du, v+dv)
                                float* gr = gipad + (u + du + kHalf) * Wp + dv + kHalf;
                                for (int v = 0; v < W; ++v) {
                                    // dS/dx = E(1+alpha x), dZ/dx = alpha E
                                    // d out/dx = [E(1+alpha x) - alpha(E x... )]/Z...
                                    // assembled below from u,t:
                                    gr[v] += aj * (ur[v] * (er[v] + alpha * qr[v]) -
                                                   tr[v] * alpha * er[v]);
                                }
                            }
                        }
                        if (gp) {
                            gp[1 + j] += static_cast<float>(gaj) * aj * (1.f - aj);
                            galpha += aj * raj;
                        }
                    }
                    if (gp) gp[0] += static_cast<float>(galpha);
                    if (gipad) {
                        float* gi = img->ensure_grad().data() +
                                    (shared ? 0 : n * C * HW) + c * HW;
                        fold_replicate(gipad, H, W, kHalf, gi);
                    }
                }
            }
        });
}

// ---- composition ----

Var apply_steps(const Var& img, const std::vector<TransformStep>& steps,
                const std::vector<Var>& params, Pad pad, bool covariance) {
    if (steps.size() != params.size())
        throw std::invalid_argument("apply_steps: steps/params length mismatch");
    Var cur = img;
    int H = img->value.dim(img->value.ndim() - 2);
    int W = img->value.dim(img->value.ndim() - 1);
    for (size_t m = 0; m < steps.size(); ++m) {
        const auto& st = steps[m];
        if (st.param_count != params[m]->value.dim(1))
            throw std::invalid_argument("apply_steps: param length mismatch for step " +
                                        kind_name(st.kind));
        if (covariance && !st.applies_to_covariance) continue;
        switch (st.kind) {
            case Kind::identity: break;
            case Kind::affine:
            case Kind::projective:
            case Kind::tps:
                cur = grid_sample(cur, make_grid_batch(st.kind, params[m], H, W), pad);
                break;
            case Kind::color: cur = color_apply_batch(cur, params[m]); break;
            case Kind::morpho: cur = morpho_apply_batch(cur, params[m]); break;
        }
    }
    // a no-op sequence must still produce a batched output
    if (cur->value.ndim() == 3) {
        int N = params.empty() ? 1 : params[0]->value.dim(0);
        std::vector<int> s = cur->value.shape();
        Tensor out({N, s[0], s[1], s[2]});
        for (int n = 0; n < N; ++n)
            std::copy_n(cur->value.data(), cur->value.numel(), out.data() + n * cur->value.numel());
        Var src = cur;
        cur = make_op(std::move(out), {src}, [src, N](ad::Node& node) {
            Tensor& g = src->ensure_grad();
            int64_t sz = g.numel();
            for (int n = 0; n < N; ++n)
                for (int64_t i = 0; i < sz; ++i) g[i] += node.grad[n * sz + i];
        });
    }
    return cur;
}

// ---- single-image wrappers ----

namespace {
Var as_batch_params(const Tensor& p) {
    Tensor t = p;
    t.reshape({1, static_cast<int>(p.numel())});
    return ad::constant(std::move(t));
}

Tensor unbatch(Tensor t) {
    auto s = t.shape();
    t.reshape({s[1], s[2], s[3]});
    return t;
}
}  // namespace

SamplingGrid make_grid(Kind kind, const Tensor& params, int H, int W) {
    return SamplingGrid{make_grid_batch(kind, as_batch_params(params), H, W)->value};
}

Tensor sample(const Tensor& image, const SamplingGrid& grid, Pad pad) {
    return unbatch(grid_sample(ad::constant(image), ad::constant(grid.coords), pad)->value);
}

Tensor color_apply(const Tensor& image, const Tensor& params) {
    return unbatch(color_apply_batch(ad::constant(image), as_batch_params(params))->value);
}

Tensor morpho_apply(const Tensor& image, const MorphoParams& mp) {
    Tensor p({1, 1 + kK2});
    p[0] = mp.alpha;
    for (int j = 0; j < kK2; ++j) p[1 + j] = mp.a_logits[j];
    return unbatch(morpho_apply_batch(ad::constant(image), ad::constant(std::move(p)))->value);
}

Tensor compose_apply(const Tensor& image, const std::vector<TransformStep>& steps,
                     const std::vector<Tensor>& params, Pad pad) {
    std::vector<Var> ps;
    for (const auto& p : params) ps.push_back(as_batch_params(p));
    return unbatch(apply_steps(ad::constant(image), steps, ps, pad, false)->value);
}

Tensor covariance_apply(const Tensor& var_map, const std::vector<TransformStep>& steps,
                        const std::vector<Tensor>& params, Pad pad) {
    std::vector<Var> ps;
    for (const auto& p : params) ps.push_back(as_batch_params(p));
    return unbatch(apply_steps(ad::constant(var_map), steps, ps, pad, true)->value);
}

}  // namespace dti::transforms
