#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dti/data.hpp"
#include "dti/predictor.hpp"
#include "dti/training.hpp"

using namespace dti;
namespace fs = std::filesystem;

namespace {

std::string tmp_dir(const std::string& tag) {
    auto p = fs::temp_directory_path() / ("dti_test_" + tag);
    fs::remove_all(p);
    return p.string();
}

std::string slurp(const std::string& path) {
    std::ifstream is(path);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

int count_lines(const std::string& text) {
    int n = 0;
    for (char c : text)
        if (c == '\n') ++n;
    return n;
}

Tensor sample(const data::Dataset& ds, int i) {
    int64_t sz = static_cast<int64_t>(ds.channels()) * ds.height() * ds.width();
    Tensor t({ds.channels(), ds.height(), ds.width()});
    std::copy_n(ds.images.data() + i * sz, sz, t.data());
    return t;
}

}  // namespace

TEST_CASE("adam single step matches the closed-form update") {
    // value 1, grad 0.5, wd 0.1 -> g = 0.6:
    //   m = 0.06, v = 3.6e-4, mhat = 0.6, vhat = 0.36,
    //   step = lr * 0.6 / (0.6 + 1e-8)
    auto p = ad::leaf(Tensor({1}, 1.f));
    training::Adam opt(0.1f);
    opt.add_param(p, 0.1f);
    p->grad = Tensor({1}, 0.5f);
    opt.step();
    double expected = 1.0 - 0.1 * 0.6 / (0.6 + 1e-8);
    CHECK(p->value[0] == doctest::Approx(expected).epsilon(1e-6));
}

TEST_CASE("adam skips parameters with no gradient") {
    auto p = ad::leaf(Tensor({2}, 3.f));
    training::Adam opt(0.5f);
    opt.add_param(p, 1.f);  // even with weight decay, no grad means no step
    opt.step();
    CHECK(p->value[0] == 3.f);
    CHECK(opt.slots[p.get()].t == 0);
}

TEST_CASE("adam zero_grad clears and reset_state restarts the moments") {
    auto p = ad::leaf(Tensor({1}, 0.f));
    training::Adam opt(0.1f);
    opt.add_param(p, 0.f);
    p->grad = Tensor({1}, 1.f);
    opt.step();
    CHECK(opt.slots[p.get()].t == 1);
    opt.reset_state(p);
    CHECK(opt.slots[p.get()].t == 0);
    CHECK(opt.slots[p.get()].m[0] == 0.f);
    opt.zero_grad();
    CHECK(p->grad.numel() == 0);
}

TEST_CASE("reassignment threshold boundary is exact") {
    // N=1000, K=10 -> threshold 20: a count of 20 survives, 19 does not.
    training::RunState rs;
    rs.config.method = training::Method::kmeans;
    rs.config.n_clusters = 10;
    rs.dataset.images = Tensor({1000, 1, 2, 2});
    for (int k = 0; k < 10; ++k)
        rs.kmeans.prototypes.push_back(ad::leaf(Tensor({1, 2, 2}, float(k))));
    std::vector<int> counts = {760, 19, 20, 21, 30, 30, 30, 30, 30, 30};
    Rng rng(1);
    auto events = training::reassign_empty(rs, counts, rng);
    REQUIRE(events.size() == 1);
    CHECK(events[0].target == 1);
    CHECK(events[0].source == 0);
    // target now carries the source prototype (value 0) plus small noise
    for (int64_t i = 0; i < 4; ++i)
        CHECK(std::abs(rs.kmeans.prototypes[1]->value[i]) < 0.1f);
    // untouched cluster at the boundary keeps its prototype
    CHECK(rs.kmeans.prototypes[2]->value[0] == 2.f);
}

TEST_CASE("reassignment recomputes the largest cluster after each split") {
    training::RunState rs;
    rs.config.method = training::Method::kmeans;
    rs.config.n_clusters = 4;
    rs.dataset.images = Tensor({1000, 1, 2, 2});  // threshold 50
    for (int k = 0; k < 4; ++k)
        rs.kmeans.prototypes.push_back(ad::leaf(Tensor({1, 2, 2}, float(k))));
    std::vector<int> counts = {940, 40, 10, 10};
    Rng rng(2);
    auto events = training::reassign_empty(rs, counts, rng);
    // 940 splits to 470/470 for cluster 1, then 470 splits to 235/235 for
    // cluster 2, leaving cluster 1's fresh 470 as the donor for cluster 3.
    REQUIRE(events.size() == 3);
    CHECK(events[0].source == 0);
    CHECK(events[1].source == 0);
    CHECK(events[2].source == 1);
}

TEST_CASE("reassignment noise has the configured standard deviation") {
    training::RunState rs;
    rs.config.method = training::Method::kmeans;
    rs.config.n_clusters = 2;
    rs.config.noise_std = 0.01f;
    rs.dataset.images = Tensor({100, 1, 64, 64});
    rs.kmeans.prototypes.push_back(ad::leaf(Tensor({1, 64, 64}, 0.5f)));
    rs.kmeans.prototypes.push_back(ad::leaf(Tensor({1, 64, 64}, 0.9f)));
    std::vector<int> counts = {95, 5};
    Rng rng(3);
    auto events = training::reassign_empty(rs, counts, rng);
    REQUIRE(events.size() == 1);
    double m = 0, m2 = 0;
    const Tensor& t = rs.kmeans.prototypes[1]->value;
    for (int64_t i = 0; i < t.numel(); ++i) {
        double d = t[i] - 0.5;
        m += d;
        m2 += d * d;
    }
    m /= t.numel();
    double sd = std::sqrt(m2 / t.numel() - m * m);
    CHECK(sd > 0.008);
    CHECK(sd < 0.012);
}

TEST_CASE("enabling a transformation module does not move the loss") {
    auto ds = data::make_synthetic_digits(32, 7);
    auto steps = transforms::parse_recipe("aff", ds.channels());
    predictor::PredictorConfig pc;
    pc.n_clusters = 4;
    pc.steps = steps;
    pc.channels = 1;
    pc.H = ds.height();
    pc.W = ds.width();
    auto pred = predictor::init_identity(pc, 11);
    clustering::KMeansState km;
    for (int k = 0; k < 4; ++k) km.prototypes.push_back(ad::leaf(sample(ds, k)));

    auto l0 = clustering::kmeans_loss(ds.images, km, steps, pred->identity_params(ds.n()),
                                      Tensor());
    pred->active_modules = 1;
    auto l1 =
        clustering::kmeans_loss(ds.images, km, steps, pred->predict(ds.images), Tensor());
    CHECK(std::abs(l1.loss->value[0] - l0.loss->value[0]) <= 1e-3f);
}

TEST_CASE("plateau rule stops a stage early") {
    // K distinct images as both data and prototypes: the loss starts at 0
    // and cannot improve, so each stage runs exactly 1 + patience epochs.
    auto ds = data::subset(data::make_synthetic_digits(10, 5), {0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
    training::TrainConfig cfg;
    cfg.method = training::Method::kmeans;
    cfg.n_clusters = 10;
    cfg.epochs_per_stage = {50};
    cfg.final_lr_epochs = 50;
    cfg.plateau_patience = 2;
    cfg.seed = 9;
    auto dir = tmp_dir("plateau");
    training::fit(ds, cfg, dir);
    CHECK(count_lines(slurp(dir + "/metrics.jsonl")) == 6);
}

TEST_CASE("identical config and seed give identical metrics") {
    auto ds = data::make_synthetic_digits(40, 21);
    training::TrainConfig cfg;
    cfg.method = training::Method::kmeans;
    cfg.n_clusters = 5;
    cfg.epochs_per_stage = {3};
    cfg.final_lr_epochs = 2;
    cfg.plateau_patience = 100;
    cfg.seed = 77;
    auto d1 = tmp_dir("det1"), d2 = tmp_dir("det2");
    auto r1 = training::fit(ds, cfg, d1);
    auto r2 = training::fit(ds, cfg, d2);
    CHECK(slurp(d1 + "/metrics.jsonl") == slurp(d2 + "/metrics.jsonl"));
    CHECK(r1.record.final_loss == r2.record.final_loss);
    CHECK(r1.final_assignments == r2.final_assignments);
    CHECK(fs::exists(d1 + "/config.json"));
    CHECK(fs::exists(d1 + "/final.ckpt"));
    CHECK(fs::exists(d1 + "/run_record.json"));
}

TEST_CASE("transformation-free runs reduce exactly to plain clustering") {
    auto ds = data::make_synthetic_digits(40, 33);
    training::TrainConfig cfg;
    cfg.method = training::Method::kmeans;
    cfg.n_clusters = 4;
    cfg.epochs_per_stage = {3};
    cfg.final_lr_epochs = 1;
    cfg.plateau_patience = 100;
    cfg.seed = 4;
    auto d1 = tmp_dir("plain");
    training::fit(ds, cfg, d1);

    cfg.method = training::Method::dti_kmeans;
    cfg.recipe = "id";
    auto d2 = tmp_dir("idrecipe");
    training::fit(ds, cfg, d2);
    CHECK(slurp(d1 + "/metrics.jsonl") == slurp(d2 + "/metrics.jsonl"));
}

TEST_CASE("a reloaded checkpoint reproduces the final loss and assignments") {
    auto ds = data::make_synthetic_digits(24, 13);
    training::TrainConfig cfg;
    cfg.method = training::Method::dti_kmeans;
    cfg.recipe = "aff";
    cfg.n_clusters = 3;
    cfg.batch_size = 24;
    cfg.epochs_per_stage = {1, 1};
    cfg.final_lr_epochs = 1;
    cfg.plateau_patience = 100;
    cfg.seed = 3;
    auto dir = tmp_dir("reload");
    auto res = training::fit(ds, cfg, dir);
    auto rs = training::load_state(dir + "/final.ckpt", ds);
    auto [loss, assign] = training::evaluate(rs, ds);
    CHECK(loss == doctest::Approx(res.record.final_loss).epsilon(1e-6));
    CHECK(assign == res.final_assignments);
    CHECK_THROWS(training::load_state(dir + "/nope.ckpt", ds));
}

TEST_CASE("method names round-trip") {
    for (auto m : {training::Method::dti_kmeans, training::Method::dti_gmm,
                   training::Method::kmeans, training::Method::gmm,
                   training::Method::ti_kmeans})
        CHECK(training::method_from_name(training::method_name(m)) == m);
    CHECK_THROWS(training::method_from_name("spectral"));
}
