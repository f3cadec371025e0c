#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dti/autodiff.hpp"
#include "dti/nn.hpp"

using namespace dti;
using ad::Var;

TEST_CASE("elementwise ops match finite differences") {
    Rng rng(1);
    Var p = ad::leaf(rand_uniform({3, 4}, rng, 0.2f, 1.5f));
    auto reset = [&] { p->grad = Tensor(); };

    CHECK(ad::gradcheck([&] { return ad::sum(ad::square(p)); }, p) < 1e-2);
    reset();
    CHECK(ad::gradcheck([&] { return ad::sum(ad::vlog(p)); }, p) < 1e-2);
    reset();
    CHECK(ad::gradcheck([&] { return ad::sum(ad::sigmoid(p)); }, p) < 1e-2);
    reset();
    CHECK(ad::gradcheck([&] { return ad::mean(ad::mul(p, p)); }, p) < 1e-2);
}

TEST_CASE("matmul and linear gradients") {
    Rng rng(2);
    Var a = ad::leaf(randn({3, 5}, rng));
    Var b = ad::leaf(randn({5, 2}, rng));
    CHECK(ad::gradcheck([&] { return ad::sum(ad::matmul(a, b)); }, a) < 1e-2);
    a->grad = Tensor();
    b->grad = Tensor();
    CHECK(ad::gradcheck([&] { return ad::sum(ad::matmul(a, b)); }, b) < 1e-2);

    Var x = ad::leaf(randn({4, 6}, rng));
    Var w = ad::leaf(randn({3, 6}, rng));
    Var bias = ad::leaf(randn({3}, rng));
    for (Var v : {x, w, bias}) {
        x->grad = Tensor();
        w->grad = Tensor();
        bias->grad = Tensor();
        CHECK(ad::gradcheck([&] { return ad::sum(ad::linear(x, w, bias)); }, v) < 1e-2);
    }
}

TEST_CASE("log_softmax shift invariance and gradient") {
    Rng rng(3);
    Var eta = ad::leaf(randn({5}, rng));
    Var ls = ad::log_softmax(eta);
    Tensor shifted = eta->value;
    for (int i = 0; i < 5; ++i) shifted[i] += 3.7f;
    Var ls2 = ad::log_softmax(ad::leaf(shifted));
    for (int i = 0; i < 5; ++i) CHECK(ls->value[i] == doctest::Approx(ls2->value[i]).epsilon(1e-5));

    Tensor w({5});
    Rng rng2(4);
    for (int i = 0; i < 5; ++i) w[i] = static_cast<float>(i + 1);
    CHECK(ad::gradcheck([&] { return ad::dot_const(ad::log_softmax(eta), w); }, eta) < 1e-2);
}

TEST_CASE("gauss_logdensity matches scalar formula and gradients") {
    Rng rng(5);
    int N = 3, D = 4;
    Tensor x = randn({N, D}, rng);
    Var mu = ad::leaf(randn({N, D}, rng));
    Var var = ad::leaf(rand_uniform({N, D}, rng, 0.5f, 2.f));
    Var lg = ad::gauss_logdensity(x, mu, var);
    for (int i = 0; i < N; ++i) {
        double ref = 0.0;
        for (int d = 0; d < D; ++d) {
            double r = x[i * D + d] - mu->value[i * D + d];
            double v = var->value[i * D + d];
            ref += -0.5 * (std::log(2.0 * M_PI * v) + r * r / v);
        }
        CHECK(lg->value[i] == doctest::Approx(ref).epsilon(1e-4));
    }
    Tensor w({N}, 1.f);
    CHECK(ad::gradcheck([&] { return ad::dot_const(ad::gauss_logdensity(x, mu, var), w); }, mu) <
          1e-2);
    mu->grad = Tensor();
    var->grad = Tensor();
    CHECK(ad::gradcheck([&] { return ad::dot_const(ad::gauss_logdensity(x, mu, var), w); }, var) <
          1e-2);
}

TEST_CASE("conv2d / batchnorm / pooling gradients on tiny inputs") {
    Rng rng(6);
    Var x = ad::leaf(randn({2, 2, 5, 5}, rng));
    Var w = ad::leaf(randn({3, 2, 3, 3}, rng, 0.5f));
    Var b = ad::leaf(randn({3}, rng));
    for (Var v : {x, w, b}) {
        x->grad = Tensor();
        w->grad = Tensor();
        b->grad = Tensor();
        CHECK(ad::gradcheck([&] { return ad::sum(ad::square(nn::conv2d(x, w, b, 1, 1))); }, v) <
              1e-2);
    }

    Var gamma = ad::leaf(Tensor({2}, 1.2f));
    Var beta = ad::leaf(Tensor({2}, 0.1f));
    Tensor probe = randn({2, 2, 5, 5}, rng);  // random weighting so the loss
                                              // is not invariant to x
    for (Var v : {x, gamma, beta}) {
        x->grad = Tensor();
        gamma->grad = Tensor();
        beta->grad = Tensor();
        CHECK(ad::gradcheck(
                  [&] {
                      auto st = std::make_shared<nn::BnStats>(
                          nn::BnStats{Tensor({2}), Tensor({2}, 1.f)});
                      return ad::dot_const(nn::batchnorm2d(x, gamma, beta, st, true), probe);
                  },
                  v) < 2e-2);
    }

    x->grad = Tensor();
    CHECK(ad::gradcheck([&] { return ad::sum(ad::square(nn::maxpool2d(x, 2, 2, 0))); }, x) < 1e-2);
    x->grad = Tensor();
    CHECK(ad::gradcheck([&] { return ad::sum(ad::square(nn::global_avg_pool(x))); }, x) < 1e-2);
}

TEST_CASE("index_select scatter-add backward") {
    Rng rng(7);
    Var a = ad::leaf(randn({4, 3}, rng));
    std::vector<int> rows{1, 1, 3};
    Var sel = ad::index_select(a, rows);
    CHECK(sel->value.dim(0) == 3);
    Var loss = ad::sum(sel);
    ad::backward(loss);
    CHECK(a->grad[1 * 3 + 0] == doctest::Approx(2.f));  // row 1 picked twice
    CHECK(a->grad[0] == doctest::Approx(0.f));
    CHECK(a->grad[3 * 3 + 2] == doctest::Approx(1.f));
}
