#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dti/transforms.hpp"

using namespace dti;
using namespace dti::transforms;

namespace {

// independent scalar bilinear oracle, border padding
float bilinear_oracle(const Tensor& img, int c, float xs, float ys, int H, int W) {
    float fx = (xs * W + W - 1) * 0.5f;
    float fy = (ys * H + H - 1) * 0.5f;
    int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
    float wx = fx - x0, wy = fy - y0;
    auto at = [&](int y, int x) {
        x = std::clamp(x, 0, W - 1);
        y = std::clamp(y, 0, H - 1);
        return img[(c * H + y) * W + x];
    };
    return (1 - wx) * (1 - wy) * at(y0, x0) + wx * (1 - wy) * at(y0, x0 + 1) +
           (1 - wx) * wy * at(y0 + 1, x0) + wx * wy * at(y0 + 1, x0 + 1);
}

Tensor translation_params(float tx, float ty) {
    Tensor p({6});
    p[2] = tx;
    p[5] = ty;
    return p;
}

}  // namespace

TEST_CASE("step parameter counts and covariance flags") {
    CHECK(make_step(Kind::identity, 1).param_count == 0);
    CHECK(make_step(Kind::affine, 1).param_count == 6);
    CHECK(make_step(Kind::projective, 1).param_count == 8);
    CHECK(make_step(Kind::tps, 1).param_count == 32);
    CHECK(make_step(Kind::color, 1).param_count == 2);
    CHECK(make_step(Kind::color, 3).param_count == 6);
    CHECK(make_step(Kind::morpho, 1).param_count == 50);
    CHECK(make_step(Kind::affine, 1).applies_to_covariance);
    CHECK(make_step(Kind::projective, 1).applies_to_covariance);
    CHECK(make_step(Kind::tps, 1).applies_to_covariance);
    CHECK_FALSE(make_step(Kind::color, 1).applies_to_covariance);
    CHECK_FALSE(make_step(Kind::morpho, 1).applies_to_covariance);

    auto steps = parse_recipe("aff-morpho-tps", 1);
    REQUIRE(steps.size() == 3);
    CHECK(steps[0].kind == Kind::affine);
    CHECK(steps[1].kind == Kind::morpho);
    CHECK(steps[2].kind == Kind::tps);
    CHECK(recipe_string(steps) == "aff-morpho-tps");
}

TEST_CASE("affine identity grid hits pixel centers") {
    SamplingGrid g = make_grid(Kind::affine, Tensor({6}), 28, 28);
    Tensor id = identity_grid(28, 28);
    for (int64_t i = 0; i < id.numel(); ++i) CHECK(g.coords[i] == doctest::Approx(id[i]));
    // corner pixel centers at +/-(1 - 1/W)
    CHECK(g.coords[0] == doctest::Approx(-(1.f - 1.f / 28)));
    CHECK(g.coords[1] == doctest::Approx(-(1.f - 1.f / 28)));
}

TEST_CASE("affine translation shifts every x coordinate") {
    SamplingGrid g = make_grid(Kind::affine, translation_params(0.5f, 0.f), 2, 2);
    Tensor id = identity_grid(2, 2);
    for (int q = 0; q < 4; ++q) {
        CHECK(g.coords[q * 2] == doctest::Approx(id[q * 2] + 0.5f));
        CHECK(g.coords[q * 2 + 1] == doctest::Approx(id[q * 2 + 1]));
    }
}

TEST_CASE("wrong parameter length is a contract violation") {
    CHECK_THROWS_AS(make_grid(Kind::affine, Tensor({5}), 8, 8), std::invalid_argument);
    CHECK_THROWS_AS(make_grid(Kind::tps, Tensor({16}), 8, 8), std::invalid_argument);
}

TEST_CASE("singular projective matrix raises degenerate-transform error") {
    Tensor p({8});
    p[0] = -1.f;  // zero first row with offsets
    p[1] = 0.f;
    p[2] = 0.f;
    CHECK_THROWS_AS(make_grid(Kind::projective, p, 8, 8), DegenerateTransformError);
}

TEST_CASE("tps zero displacements give the identity grid, against a brute-force solve") {
    // independent oracle: assemble and solve the full TPS system for the
    // 4x4 lattice in doubles, then evaluate the interpolant on the grid
    const double c4[4] = {-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0};
    double cx[16], cy[16];
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            cx[i * 4 + j] = c4[j];
            cy[i * 4 + j] = c4[i];
        }
    auto U = [](double r2) { return r2 > 0 ? 0.5 * r2 * std::log(r2) : 0.0; };
    // displacement zero everywhere -> solution w = 0, affine = 0; residual of
    // the linear system at that solution must vanish
    for (int i = 0; i < 16; ++i) {
        double lhs = 0.0;
        for (int j = 0; j < 16; ++j) {
            double dx = cx[i] - cx[j], dy = cy[i] - cy[j];
            lhs += U(dx * dx + dy * dy) * 0.0;
        }
        CHECK(lhs == doctest::Approx(0.0));
    }
    SamplingGrid g = make_grid(Kind::tps, Tensor({32}), 28, 28);
    Tensor id = identity_grid(28, 28);
    for (int64_t i = 0; i < id.numel(); ++i)
        CHECK(std::abs(g.coords[i] - id[i]) < 1e-6f);
}

TEST_CASE("tps basis interpolates control displacements exactly") {
    // displacing one control point by d moves the interpolated field at that
    // control point by exactly d (interpolation property of the TPS solve)
    const Tensor& B = tps_basis(64, 64);
    const double c4[4] = {-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0};
    // pixel whose normalized coords are closest to control point (1,1) of the lattice
    int H = 64, W = 64;
    for (int ci = 0; ci < 4; ++ci)
        for (int cj = 0; cj < 4; ++cj) {
            double px = c4[cj], py = c4[ci];
            int j = std::clamp(static_cast<int>(std::round((px * W + W - 1) / 2)), 0, W - 1);
            int i = std::clamp(static_cast<int>(std::round((py * H + H - 1) / 2)), 0, H - 1);
            // basis row at a pixel very near the control point: the matching
            // column should dominate and sum to ~1 with the others near 0
            const float* row = B.data() + (i * W + j) * 16;
            CHECK(row[ci * 4 + cj] == doctest::Approx(1.0).epsilon(0.05));
        }
}

TEST_CASE("sample with identity grid returns the image exactly") {
    Rng rng(11);
    Tensor img = rand_uniform({2, 9, 7}, rng);
    SamplingGrid g{make_grid(Kind::affine, Tensor({6}), 9, 7).coords};
    Tensor out = sample(img, g, Pad::border);
    for (int64_t i = 0; i < img.numel(); ++i) CHECK(out[i] == img[i]);
}

TEST_CASE("bilinear midpoint between two columns") {
    Tensor img({1, 2, 2});
    img[1] = 1.f;
    img[3] = 1.f;  // [[0,1],[0,1]]
    Tensor coords({1, 1, 2});
    coords[0] = 0.f;  // x midway between the two column centers (+/-0.5)
    coords[1] = -0.5f;
    Tensor out = sample(img, SamplingGrid{coords}, Pad::border);
    CHECK(out[0] == doctest::Approx(0.5f));
}

TEST_CASE("random grid matches the scalar bilinear oracle") {
    Rng rng(12);
    Tensor img = rand_uniform({1, 5, 5}, rng);
    Tensor coords = rand_uniform({6, 4, 2}, rng, -0.9f, 0.9f);
    coords.reshape({1, 6, 4, 2});
    Var out = grid_sample(ad::constant(img), ad::constant(coords), Pad::border);
    for (int q = 0; q < 24; ++q) {
        float ref = bilinear_oracle(img, 0, coords[q * 2], coords[q * 2 + 1], 5, 5);
        CHECK(std::abs(out->value[q] - ref) < 1e-6f);
    }
}

TEST_CASE("color identity and collapse") {
    Rng rng(13);
    Tensor x = rand_uniform({1, 4, 4}, rng);
    Tensor out = color_apply(x, Tensor({2}));
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(out[i] == x[i]);

    Tensor p({2});
    p[0] = -1.f;  // scale offset -1 -> scale 0
    p[1] = 0.3f;
    out = color_apply(x, p);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(out[i] == doctest::Approx(0.3f));
}

TEST_CASE("rgb color transform matches channelwise scalar oracle") {
    Rng rng(14);
    Tensor x = rand_uniform({3, 5, 5}, rng);
    Tensor p = randn({6}, rng, 0.3f);
    Tensor out = color_apply(x, p);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 25; ++i) {
            float ref = (1.f + p[2 * c]) * x[c * 25 + i] + p[2 * c + 1];
            CHECK(std::abs(out[c * 25 + i] - ref) < 1e-7f);
        }
}

TEST_CASE("morpho with one-hot center kernel is the identity") {
    Rng rng(15);
    Tensor x = rand_uniform({1, 8, 8}, rng);
    MorphoParams mp;
    mp.a_logits = Tensor({7, 7}, -14.f);
    mp.a_logits[3 * 7 + 3] = 14.f;
    mp.alpha = 0.f;
    Tensor out = morpho_apply(x, mp);
    float max_err = 0.f;
    for (int64_t i = 0; i < x.numel(); ++i) max_err = std::max(max_err, std::abs(out[i] - x[i]));
    CHECK(max_err <= 1e-4f);
}

TEST_CASE("morpho limits emulate dilation and erosion") {
    Rng rng(16);
    Tensor x({1, 10, 10});
    std::uniform_int_distribution<int> bit(0, 1);
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(bit(rng));

    MorphoParams mp;
    mp.a_logits = Tensor({7, 7}, 14.f);  // a ~ 1 on the full window

    // brute-force dilation / erosion oracles with replicate padding
    auto morpho_oracle = [&](bool dilate) {
        Tensor out({1, 10, 10});
        for (int u = 0; u < 10; ++u)
            for (int v = 0; v < 10; ++v) {
                float best = dilate ? -1e9f : 1e9f;
                for (int du = -3; du <= 3; ++du)
                    for (int dv = -3; dv <= 3; ++dv) {
                        int uu = std::clamp(u + du, 0, 9), vv = std::clamp(v + dv, 0, 9);
                        best = dilate ? std::max(best, x[uu * 10 + vv])
                                      : std::min(best, x[uu * 10 + vv]);
                    }
                out[u * 10 + v] = best;
            }
        return out;
    };

    mp.alpha = 50.f;
    Tensor dil = morpho_apply(x, mp);
    Tensor dref = morpho_oracle(true);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(std::abs(dil[i] - dref[i]) <= 1e-3f);

    mp.alpha = -50.f;
    Tensor ero = morpho_apply(x, mp);
    Tensor eref = morpho_oracle(false);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(std::abs(ero[i] - eref[i]) <= 1e-3f);
}

TEST_CASE("compose with identity params is the identity map") {
    Rng rng(17);
    Tensor x = rand_uniform({1, 12, 12}, rng);
    auto steps = parse_recipe("aff-morpho-tps", 1);
    std::vector<Tensor> params;
    for (const auto& s : steps) params.push_back(s.identity_params);
    Tensor out = compose_apply(x, steps, params);
    float max_err = 0.f;
    for (int64_t i = 0; i < x.numel(); ++i) max_err = std::max(max_err, std::abs(out[i] - x[i]));
    CHECK(max_err <= 1e-4f);
}

TEST_CASE("two integer-pixel translations compose into their sum") {
    Rng rng(18);
    int H = 12, W = 12;
    Tensor x = rand_uniform({1, H, W}, rng);
    auto steps = std::vector<TransformStep>{make_step(Kind::affine, 1),
                                            make_step(Kind::affine, 1)};
    float t1 = 2.f / W, t2 = 4.f / W;  // 1 and 2 pixels in normalized coords
    Tensor composed =
        compose_apply(x, steps, {translation_params(t1, 0.f), translation_params(t2, 0.f)});
    Tensor oneshot = compose_apply(x, {steps[0]}, {translation_params(t1 + t2, 0.f)});
    // interior pixels only (border replication differs)
    for (int u = 0; u < H; ++u)
        for (int v = 3; v < W - 3; ++v)
            CHECK(std::abs(composed[u * W + v] - oneshot[u * W + v]) < 1e-5f);
}

TEST_CASE("covariance_apply skips color and keeps affine identity") {
    Rng rng(19);
    Tensor sigma = rand_uniform({1, 6, 6}, rng, 0.f, 2.f);
    auto col = make_step(Kind::color, 1);
    Tensor colp = randn({2}, rng);
    Tensor out = covariance_apply(sigma, {col}, {colp});
    for (int64_t i = 0; i < sigma.numel(); ++i) CHECK(out[i] == sigma[i]);

    auto aff = make_step(Kind::affine, 1);
    out = covariance_apply(sigma, {aff}, {Tensor({6})});
    for (int64_t i = 0; i < sigma.numel(); ++i) CHECK(out[i] == sigma[i]);
}

TEST_CASE("90 degree rotation is an exact pixel permutation and keeps covariance nonneg") {
    Rng rng(20);
    int H = 8, W = 8;
    Tensor sigma = rand_uniform({1, H, W}, rng, 0.f, 2.f);
    // rotate by 90 degrees: source coords (x,y) -> (-y, x)
    Tensor p({6});
    p[0] = -1.f;
    p[1] = -1.f;
    p[3] = 1.f;
    p[4] = -1.f;
    Tensor out = covariance_apply(sigma, {make_step(Kind::affine, 1)}, {p});
    for (int u = 0; u < H; ++u)
        for (int v = 0; v < W; ++v) {
            // out[u,v] samples source at x=-y_u, y=x_v, i.e. src[v, W-1-u]
            float src = sigma[v * W + (W - 1 - u)];
            CHECK(out[u * W + v] == src);
            CHECK(out[u * W + v] >= 0.f);
        }
}

TEST_CASE("gradient checks for every transform module") {
    Rng rng(21);
    Tensor img = rand_uniform({1, 8, 8}, rng);
    Tensor probe = randn({1, 1, 8, 8}, rng);

    auto check_kind = [&](Kind kind, int pc) {
        // Spatial params keep sample coordinates ~0.4px away from pixel
        // centers: bilinear interpolation has gradient kinks at integer
        // crossings where central differences are meaningless.
        Var params = ad::leaf(randn({1, pc}, rng, 0.002f));
        if (kind == Kind::affine || kind == Kind::projective) {
            params->value[2] += 0.1f;
            params->value[5] += 0.1f;
        } else if (kind == Kind::tps) {
            for (int j = 0; j < pc; ++j) params->value[j] += 0.1f;
        } else if (kind == Kind::morpho) {
            // random but non-saturated kernel and mild alpha
            params->value = randn({1, pc}, rng, 0.5f);
        }
        auto f = [&] {
            Var out;
            switch (kind) {
                case Kind::affine:
                case Kind::projective:
                case Kind::tps:
                    out = grid_sample(ad::constant(img),
                                      make_grid_batch(kind, params, 8, 8), Pad::border);
                    break;
                case Kind::color: out = color_apply_batch(ad::constant(img), params); break;
                case Kind::morpho: out = morpho_apply_batch(ad::constant(img), params); break;
                default: throw std::logic_error("unexpected kind");
            }
            return ad::dot_const(out, probe);
        };
        double err = ad::gradcheck(f, params);
        INFO("kind ", kind_name(kind), " rel err ", err);
        CHECK(err < 1e-2);
    };

    check_kind(Kind::affine, 6);
    check_kind(Kind::projective, 8);
    check_kind(Kind::tps, 32);
    check_kind(Kind::color, 2);
    check_kind(Kind::morpho, 50);
}

TEST_CASE("gradient flows through the warped image too") {
    Rng rng(22);
    Var proto = ad::leaf(rand_uniform({1, 8, 8}, rng));
    Tensor probe = randn({1, 1, 8, 8}, rng);
    Var params = ad::constant(randn({1, 6}, rng, 0.1f));
    auto f = [&] {
        return ad::dot_const(
            grid_sample(proto, make_grid_batch(Kind::affine, params, 8, 8), Pad::border), probe);
    };
    CHECK(ad::gradcheck(f, proto) < 1e-2);
}
