#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "dti/data.hpp"
#include "dti/training.hpp"
#include "dti/transforms.hpp"
#include "dti/viz.hpp"

using namespace dti;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

Tensor image_at(const data::Dataset& ds, int i) {
    int64_t sz = static_cast<int64_t>(ds.channels()) * ds.height() * ds.width();
    Tensor t({ds.channels(), ds.height(), ds.width()});
    std::copy_n(ds.images.data() + i * sz, sz, t.data());
    return t;
}

Tensor gather(const data::Dataset& ds, const std::vector<int>& idx) {
    int64_t sz = static_cast<int64_t>(ds.channels()) * ds.height() * ds.width();
    Tensor t({static_cast<int>(idx.size()), ds.channels(), ds.height(), ds.width()});
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy_n(ds.images.data() + idx[i] * sz, sz, t.data() + i * sz);
    return t;
}

// attaches the shared train/model flags; values already hold the defaults
// (possibly loaded from --config), so unset flags leave them alone
void add_config_flags(CLI::App* app, training::TrainConfig& cfg, std::string& method,
                      std::string& epochs) {
    app->add_option("--dataset", cfg.dataset, "dataset name or image-folder path");
    app->add_option("--method", method, "dti_kmeans|dti_gmm|kmeans|gmm|ti_kmeans");
    app->add_option("-k,--k", cfg.n_clusters, "number of clusters");
    app->add_option("--recipe", cfg.recipe, "transformation recipe, e.g. aff-morpho-tps");
    app->add_option("--lr", cfg.lr, "learning rate");
    app->add_option("--batch-size", cfg.batch_size, "batch size");
    app->add_option("--epochs", epochs, "comma-separated epochs per stage");
    app->add_option("--final-lr-epochs", cfg.final_lr_epochs,
                    "extra epochs at lr/decay after the last stage");
    app->add_option("--plateau-patience", cfg.plateau_patience, "plateau patience");
    app->add_option("--gaussian-sigma", cfg.gaussian_weight_sigma,
                    "sigma of the center-weighted loss (0 = off)");
    app->add_option("--seed", cfg.seed, "base seed");
    app->add_flag("--no-curriculum", [&cfg](int64_t) { cfg.curriculum = false; },
                  "enable all transformation modules from the start");
    app->add_flag("--no-reassign", [&cfg](int64_t) { cfg.reassign_enabled = false; },
                  "disable empty-cluster reassignment");
}

void apply_late_flags(training::TrainConfig& cfg, const std::string& method,
                      const std::string& epochs) {
    if (!method.empty()) cfg.method = training::method_from_name(method);
    if (!epochs.empty()) {
        cfg.epochs_per_stage.clear();
        std::stringstream ss(epochs);
        std::string tok;
        while (std::getline(ss, tok, ',')) cfg.epochs_per_stage.push_back(std::stoi(tok));
    }
}

json record_json(const eval::RunRecord& r) {
    return {{"run_dir", r.run_dir}, {"final_loss", r.final_loss}, {"acc", r.acc},
            {"nmi", r.nmi},         {"wall_seconds", r.wall_seconds}, {"seed", r.seed}};
}

int cmd_train(training::TrainConfig cfg, int runs, const std::string& out) {
    auto ds = data::load_named(cfg.dataset, cfg.seed);
    std::vector<eval::RunRecord> records;
    for (int r = 0; r < runs; ++r) {
        training::TrainConfig c = cfg;
        c.seed = cfg.seed + r;
        std::string dir = runs > 1 ? out + "/run" + std::to_string(r) : out;
        auto res = training::fit(ds, c, dir);
        records.push_back(res.record);
        std::cout << "run " << r << ": loss " << res.record.final_loss;
        if (ds.labeled())
            std::cout << "  acc " << res.record.acc << "  nmi " << res.record.nmi;
        std::cout << "  (" << res.record.wall_seconds << "s)\n";
    }
    json stats = {{"runs", json::array()}};
    for (const auto& r : records) stats["runs"].push_back(record_json(r));
    if (ds.labeled() && runs > 1) {
        auto s = eval::aggregate(records);
        stats["acc"] = {{"avg", s.avg},       {"std", s.std_dev},
                        {"min", s.min},       {"median", s.median},
                        {"max", s.max},       {"min_loss_acc", s.min_loss_acc},
                        {"min_loss_run", s.min_loss_index}};
        std::cout << "acc avg " << s.avg << " +/- " << s.std_dev << ", minLoss "
                  << s.min_loss_acc << " (run " << s.min_loss_index << ")\n";
    }
    fs::create_directories(out);
    std::ofstream(out + "/stats.json") << stats.dump(2) << "\n";
    return 0;
}

// shared by eval and viz: rebuild the model and recover the dataset
struct LoadedRun {
    data::Dataset ds;
    training::RunState rs;
};

LoadedRun load_run(const std::string& run_dir, const std::string& dataset_override) {
    if (!fs::exists(run_dir + "/final.ckpt"))
        throw std::runtime_error("no checkpoint at " + run_dir + "/final.ckpt");
    auto cfg = training::config_from_json_file(run_dir + "/config.json");
    std::string name = dataset_override.empty() ? cfg.dataset : dataset_override;
    LoadedRun lr{data::load_named(name, cfg.seed), {}};
    lr.rs = training::load_state(run_dir + "/final.ckpt", lr.ds);
    return lr;
}

int cmd_eval(const std::string& run_dir, const std::string& dataset_override) {
    auto lr = load_run(run_dir, dataset_override);
    auto [loss, assign] = training::evaluate(lr.rs, lr.ds);
    std::cout << "loss " << loss << "\n";
    std::vector<int> sizes(lr.rs.config.n_clusters, 0);
    for (int a : assign) ++sizes[a];
    std::cout << "cluster sizes:";
    for (int s : sizes) std::cout << " " << s;
    std::cout << "\n";
    if (lr.ds.labeled()) {
        std::cout << "acc " << eval::accuracy(assign, lr.ds.labels, lr.rs.config.n_clusters)
                  << "\n";
        std::cout << "nmi " << eval::nmi(assign, lr.ds.labels) << "\n";
    }
    return 0;
}

int cmd_viz(const std::string& run_dir, const std::string& dataset_override, int samples) {
    auto lr = load_run(run_dir, dataset_override);
    auto [loss, assign] = training::evaluate(lr.rs, lr.ds);
    std::string vdir = run_dir + "/viz";
    fs::create_directories(vdir);

    bool gmm = !lr.rs.gmm.means.empty();
    int K = lr.rs.config.n_clusters;
    std::vector<Tensor> protos;
    for (int k = 0; k < K; ++k)
        protos.push_back(gmm ? lr.rs.gmm.means[k]->value : lr.rs.kmeans.prototypes[k]->value);
    viz::prototype_grid(protos, vdir + "/prototypes_0.png");

    for (int k = 0; k < K; ++k) {
        std::vector<Tensor> members;
        for (int i = 0; i < lr.ds.n() && members.size() < 63; ++i)
            if (assign[i] == k) members.push_back(image_at(lr.ds, i));
        viz::cluster_montage(protos[k], members, vdir + "/montage_" + std::to_string(k) +
                                                     ".png");
    }

    int n = std::min(samples, lr.ds.n());
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Tensor batch = gather(lr.ds, idx);
    auto predicted = training::predicted_params(lr.rs, batch, idx);
    int64_t sz = static_cast<int64_t>(lr.ds.channels()) * lr.ds.height() * lr.ds.width();
    for (int i = 0; i < n; ++i) {
        std::vector<Tensor> aligned;
        for (int k = 0; k < K; ++k) {
            Tensor img = protos[k];
            if (!lr.rs.steps.empty()) {
                auto proto = gmm ? lr.rs.gmm.means[k] : lr.rs.kmeans.prototypes[k];
                auto warped = transforms::apply_steps(proto, lr.rs.steps, predicted[k]);
                Tensor one({lr.ds.channels(), lr.ds.height(), lr.ds.width()});
                int row = warped->value.dim(0) == 1 ? 0 : i;
                std::copy_n(warped->value.data() + row * sz, sz, one.data());
                img = one;
            }
            aligned.push_back(img);
        }
        viz::alignment_strip(image_at(lr.ds, i), aligned, assign[i],
                             vdir + "/alignment_" + std::to_string(i) + ".png");
    }
    std::cout << "wrote " << vdir << " (loss " << loss << ")\n";
    return 0;
}

int cmd_scan(training::TrainConfig cfg, const std::string& klist, int runs,
             const std::string& out) {
    std::vector<int> ks;
    std::stringstream ss(klist);
    std::string tok;
    while (std::getline(ss, tok, ',')) ks.push_back(std::stoi(tok));
    if (ks.empty()) throw std::runtime_error("scan-k: empty --k-list");
    auto ds = data::load_named(cfg.dataset, cfg.seed);
    auto table = training::elbow_scan(ds, ks, cfg, runs, out);
    viz::loss_curve(table, out + "/scan_curve.png");
    for (auto [k, l] : table) std::cout << "K=" << k << "  avg loss " << l << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"transformation-invariant clustering toolkit"};
    app.require_subcommand(1);

    // --config seeds the defaults before the real parse reads the flags
    training::TrainConfig cfg;
    for (int i = 1; i + 1 < argc; ++i)
        if (std::string(argv[i]) == "--config") {
            try {
                cfg = training::config_from_json_file(argv[i + 1]);
            } catch (const std::exception& e) {
                std::cerr << "error: " << e.what() << "\n";
                return 1;
            }
        }
    std::string method = training::method_name(cfg.method), epochs;
    std::string config_path, out, run_dir, dataset_override, klist;
    int runs = 1, samples = 8;

    auto* train = app.add_subcommand("train", "fit a clustering model");
    train->add_option("--config", config_path, "JSON config file");
    add_config_flags(train, cfg, method, epochs);
    train->add_option("--runs", runs, "independent runs with consecutive seeds");
    train->add_option("-o,--out", out, "output directory")->required();

    auto* ev = app.add_subcommand("eval", "evaluate a finished run");
    ev->add_option("--run", run_dir, "run directory")->required();
    ev->add_option("--dataset", dataset_override, "evaluate on another dataset");

    auto* vz = app.add_subcommand("viz", "render prototypes and alignments");
    vz->add_option("--run", run_dir, "run directory")->required();
    vz->add_option("--dataset", dataset_override, "dataset override");
    vz->add_option("--samples", samples, "alignment strips to render");

    auto* scan = app.add_subcommand("scan-k", "loss-vs-K elbow scan");
    scan->add_option("--config", config_path, "JSON config file");
    add_config_flags(scan, cfg, method, epochs);
    scan->add_option("--k-list", klist, "comma-separated cluster counts")->required();
    scan->add_option("--runs", runs, "runs per K");
    scan->add_option("-o,--out", out, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        apply_late_flags(cfg, method, epochs);
        if (train->parsed()) return cmd_train(cfg, runs, out);
        if (ev->parsed()) return cmd_eval(run_dir, dataset_override);
        if (vz->parsed()) return cmd_viz(run_dir, dataset_override, samples);
        if (scan->parsed()) return cmd_scan(cfg, klist, runs, out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
