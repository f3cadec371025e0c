#include "dti/training.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "dti/checkpoint.hpp"

namespace dti::training {

using nlohmann::json;

std::string method_name(Method m) {
    switch (m) {
        case Method::dti_kmeans: return "dti_kmeans";
        case Method::dti_gmm: return "dti_gmm";
        case Method::kmeans: return "kmeans";
        case Method::gmm: return "gmm";
        case Method::ti_kmeans: return "ti_kmeans";
    }
    return "?";
}

Method method_from_name(const std::string& s) {
    for (Method m : {Method::dti_kmeans, Method::dti_gmm, Method::kmeans, Method::gmm,
                     Method::ti_kmeans})
        if (method_name(m) == s) return m;
    throw std::invalid_argument("unknown method: " + s);
}

// ---- Adam ----

void Adam::add_param(const ad::Var& p, float weight_decay) {
    params.push_back(p);
    slots[p.get()] = {Tensor(p->value.shape()), Tensor(p->value.shape()), 0};
    decay[p.get()] = weight_decay;
}

void Adam::step() {
    for (auto& p : params) {
        if (p->grad.numel() == 0) continue;
        Slot& s = slots[p.get()];
        float wd = decay[p.get()];
        ++s.t;
        float c1 = 1.f - std::pow(beta1, static_cast<float>(s.t));
        float c2 = 1.f - std::pow(beta2, static_cast<float>(s.t));
        for (int64_t i = 0; i < p->value.numel(); ++i) {
            float g = p->grad[i] + wd * p->value[i];
            s.m[i] = beta1 * s.m[i] + (1.f - beta1) * g;
            s.v[i] = beta2 * s.v[i] + (1.f - beta2) * g * g;
            p->value[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + eps);
        }
    }
}

void Adam::zero_grad() {
    for (auto& p : params) p->grad = Tensor();
}

void Adam::reset_state(const ad::Var& p) {
    auto it = slots.find(p.get());
    if (it == slots.end()) return;
    it->second = {Tensor(p->value.shape()), Tensor(p->value.shape()), 0};
}

// ---- initialization ----

namespace {

bool is_dti(Method m) { return m == Method::dti_kmeans || m == Method::dti_gmm; }
bool is_gmm(Method m) { return m == Method::dti_gmm || m == Method::gmm; }

Tensor sample_image(const data::Dataset& ds, int i) {
    int64_t sz = static_cast<int64_t>(ds.channels()) * ds.height() * ds.width();
    Tensor t({ds.channels(), ds.height(), ds.width()});
    std::copy_n(ds.images.data() + i * sz, sz, t.data());
    return t;
}

Tensor gather_batch(const data::Dataset& ds, const std::vector<int>& idx) {
    int64_t sz = static_cast<int64_t>(ds.channels()) * ds.height() * ds.width();
    Tensor t({static_cast<int>(idx.size()), ds.channels(), ds.height(), ds.width()});
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy_n(ds.images.data() + idx[i] * sz, sz, t.data() + i * sz);
    return t;
}

}  // namespace

void init_prototypes(RunState& rs, uint64_t seed) {
    const auto& ds = rs.dataset;
    int K = rs.config.n_clusters;
    if (ds.n() < K) throw std::invalid_argument("init: dataset smaller than K");
    std::vector<int> idx(ds.n());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(mix_seed(seed, /*stream*/ 1));
    std::shuffle(idx.begin(), idx.end(), rng);

    if (is_gmm(rs.config.method)) {
        rs.gmm = clustering::GMMState{};
        for (int k = 0; k < K; ++k) {
            rs.gmm.means.push_back(ad::leaf(sample_image(ds, idx[k])));
            Tensor v({ds.channels(), ds.height(), ds.width()});
            v.fill(std::sqrt(0.5f));  // raw variance 0.5 via squared parameter
            rs.gmm.var_params.push_back(ad::leaf(v));
            rs.gmm.mixing_logits.push_back(ad::leaf(Tensor({1}, 1.f)));
        }
    } else {
        rs.kmeans = clustering::KMeansState{};
        for (int k = 0; k < K; ++k)
            rs.kmeans.prototypes.push_back(ad::leaf(sample_image(ds, idx[k])));
    }

    if (rs.config.method == Method::ti_kmeans) {
        rs.ti_params.assign(K, {});
        for (int k = 0; k < K; ++k)
            for (const auto& st : rs.steps) {
                Tensor t({ds.n(), st.param_count});
                for (int i = 0; i < ds.n(); ++i)
                    std::copy_n(st.identity_params.data(), st.param_count,
                                t.data() + static_cast<int64_t>(i) * st.param_count);
                rs.ti_params[k].push_back(ad::leaf(std::move(t)));
            }
    }
}

void curriculum_step(RunState& rs) {
    int M = static_cast<int>(rs.steps.size());
    if (rs.stage >= M) throw std::logic_error("curriculum_step: already at final stage");
    ++rs.stage;
    if (rs.predictor) rs.predictor->active_modules = rs.stage;
    // new heads start optimizing now; their moments must be clean
    if (rs.opt && rs.predictor)
        for (int k = 0; k < rs.config.n_clusters; ++k)
            for (const auto& p : rs.predictor->cluster_head_params(k))
                rs.opt->reset_state(p);
}

std::vector<ReassignEvent> reassign_empty(RunState& rs, const std::vector<int>& epoch_counts,
                                          Rng& rng) {
    std::vector<ReassignEvent> events;
    int K = rs.config.n_clusters;
    double thr = rs.config.reassign_threshold_frac * rs.dataset.n() / double(K);
    std::vector<double> counts(epoch_counts.begin(), epoch_counts.end());
    for (int k = 0; k < K; ++k) {
        if (counts[k] >= thr) continue;
        int src = static_cast<int>(std::max_element(counts.begin(), counts.end()) -
                                   counts.begin());
        if (src == k) continue;
        auto noisy_copy = [&](const ad::Var& dst, const ad::Var& from, bool add_noise) {
            for (int64_t i = 0; i < dst->value.numel(); ++i)
                dst->value[i] = from->value[i];
            if (add_noise) {
                std::normal_distribution<float> n(0.f, rs.config.noise_std);
                for (int64_t i = 0; i < dst->value.numel(); ++i) dst->value[i] += n(rng);
            }
            if (rs.opt) rs.opt->reset_state(dst);
        };
        if (is_gmm(rs.config.method)) {
            noisy_copy(rs.gmm.means[k], rs.gmm.means[src], true);
            noisy_copy(rs.gmm.var_params[k], rs.gmm.var_params[src], false);
            noisy_copy(rs.gmm.mixing_logits[k], rs.gmm.mixing_logits[src], false);
        } else {
            noisy_copy(rs.kmeans.prototypes[k], rs.kmeans.prototypes[src], true);
        }
        if (rs.predictor) {
            rs.predictor->copy_cluster_heads(src, k);
            for (const auto& p : rs.predictor->cluster_head_params(k))
                if (rs.opt) rs.opt->reset_state(p);
        }
        if (rs.config.method == Method::ti_kmeans)
            for (size_t m = 0; m < rs.ti_params[k].size(); ++m)
                noisy_copy(rs.ti_params[k][m], rs.ti_params[src][m], false);
        // the source cluster is now split between the two
        counts[src] *= 0.5;
        counts[k] = counts[src];
        events.push_back({k, src});
    }
    return events;
}

// ---- fit ----

namespace {

json config_to_json(const TrainConfig& c, const std::string& recipe) {
    return json{{"method", method_name(c.method)},
                {"dataset", c.dataset},
                {"K", c.n_clusters},
                {"steps", recipe},
                {"lr", c.lr},
                {"lr_decay_factor", c.lr_decay_factor},
                {"weight_decay", c.weight_decay},
                {"batch_size", c.batch_size},
                {"epochs_per_stage", c.epochs_per_stage},
                {"final_lr_epochs", c.final_lr_epochs},
                {"plateau_rel_tol", c.plateau_rel_tol},
                {"plateau_patience", c.plateau_patience},
                {"reassign_threshold_frac", c.reassign_threshold_frac},
                {"noise_std", c.noise_std},
                {"curriculum", c.curriculum},
                {"reassign_enabled", c.reassign_enabled},
                {"gaussian_weight_sigma", c.gaussian_weight_sigma},
                {"seed", c.seed}};
}

struct BatchResult {
    ad::Var loss;
    std::vector<int> assignments;
};

}  // namespace

// predicted parameters for one batch, honoring the curriculum stage
predictor::PredictedParams predicted_params(const RunState& rs, const Tensor& batch,
                                            const std::vector<int>& idx) {
    int K = rs.config.n_clusters;
    if (rs.predictor)
        return rs.predictor->active_modules == 0
                   ? rs.predictor->identity_params(batch.dim(0))
                   : rs.predictor->predict(batch);
    predictor::PredictedParams out(K);
    if (rs.config.method != Method::ti_kmeans) return out;  // plain: no steps
    int N = static_cast<int>(idx.size());
    for (int k = 0; k < K; ++k)
        for (size_t m = 0; m < rs.steps.size(); ++m) {
            if (static_cast<int>(m) < rs.stage) {
                out[k].push_back(ad::index_select(rs.ti_params[k][m], idx));
            } else {
                const auto& st = rs.steps[m];
                Tensor t({N, st.param_count});
                for (int i = 0; i < N; ++i)
                    std::copy_n(st.identity_params.data(), st.param_count,
                                t.data() + static_cast<int64_t>(i) * st.param_count);
                out[k].push_back(ad::constant(std::move(t)));
            }
        }
    return out;
}

namespace {

BatchResult batch_loss(const RunState& rs, const Tensor& batch, const std::vector<int>& idx,
                       const Tensor& weights) {
    auto predicted = predicted_params(rs, batch, idx);
    if (is_gmm(rs.config.method)) {
        auto fwd = clustering::gmm_forward(batch, rs.gmm, rs.steps, predicted);
        return {fwd.m_loss, fwd.assignments};
    }
    auto res = clustering::kmeans_loss(batch, rs.kmeans, rs.steps, predicted, weights);
    return {res.loss, res.assignments};
}

void save_checkpoint(const RunState& rs, const std::string& path,
                     const std::string& recipe) {
    checkpoint::Checkpoint ck;
    ck.meta = config_to_json(rs.config, recipe);
    ck.meta["stage"] = rs.stage;
    ck.meta["channels"] = rs.dataset.channels();
    ck.meta["height"] = rs.dataset.height();
    ck.meta["width"] = rs.dataset.width();
    int K = rs.config.n_clusters;
    if (is_gmm(rs.config.method)) {
        for (int k = 0; k < K; ++k) {
            ck.tensors["mean" + std::to_string(k)] = rs.gmm.means[k]->value;
            ck.tensors["var" + std::to_string(k)] = rs.gmm.var_params[k]->value;
            ck.tensors["eta" + std::to_string(k)] = rs.gmm.mixing_logits[k]->value;
        }
    } else {
        for (int k = 0; k < K; ++k)
            ck.tensors["prototype" + std::to_string(k)] = rs.kmeans.prototypes[k]->value;
    }
    if (rs.predictor) {
        std::map<std::string, ad::Var> params;
        std::map<std::string, std::shared_ptr<nn::BnStats>> stats;
        rs.predictor->collect(params, stats);
        for (const auto& [name, p] : params) ck.tensors[name] = p->value;
        for (const auto& [name, s] : stats) {
            ck.tensors[name + ".running_mean"] = s->mean;
            ck.tensors[name + ".running_var"] = s->var;
        }
    }
    for (size_t k = 0; k < rs.ti_params.size(); ++k)
        for (size_t m = 0; m < rs.ti_params[k].size(); ++m)
            ck.tensors["ti" + std::to_string(k) + "_" + std::to_string(m)] =
                rs.ti_params[k][m]->value;
    checkpoint::save(path, ck);
}

}  // namespace

FitResult fit(const data::Dataset& dataset, const TrainConfig& config,
              const std::string& run_dir) {
    auto t_start = std::chrono::steady_clock::now();
    std::filesystem::create_directories(run_dir);

    RunState rs;
    rs.config = config;
    rs.dataset = dataset;
    std::string recipe = config.recipe.empty() ? dataset.default_steps : config.recipe;
    bool uses_transforms = is_dti(config.method) || config.method == Method::ti_kmeans;
    if (uses_transforms && !recipe.empty() && recipe != "id")
        rs.steps = transforms::parse_recipe(recipe, dataset.channels());
    int M = static_cast<int>(rs.steps.size());

    std::ofstream cfg_os(run_dir + "/config.json");
    cfg_os << config_to_json(config, uses_transforms ? recipe : "") << "\n";
    cfg_os.close();

    std::vector<int> eps = config.epochs_per_stage;
    if (eps.empty()) eps.assign(M + 1, 10);
    if (static_cast<int>(eps.size()) != M + 1)
        throw std::invalid_argument("epochs_per_stage must have one entry per stage (M+1)");

    if (is_dti(config.method)) {
        predictor::PredictorConfig pc;
        pc.n_clusters = config.n_clusters;
        pc.steps = rs.steps;
        pc.channels = dataset.channels();
        pc.H = dataset.height();
        pc.W = dataset.width();
        pc.active_modules = 0;
        rs.predictor = predictor::init_identity(pc, mix_seed(config.seed, 2));
    }
    init_prototypes(rs, config.seed);

    rs.lr = config.lr;
    rs.opt = std::make_unique<Adam>(rs.lr);
    if (is_gmm(config.method)) {
        for (auto& p : rs.gmm.means) rs.opt->add_param(p, 0.f);
        for (auto& p : rs.gmm.var_params) rs.opt->add_param(p, 0.f);
        for (auto& p : rs.gmm.mixing_logits) rs.opt->add_param(p, 0.f);
    } else {
        for (auto& p : rs.kmeans.prototypes) rs.opt->add_param(p, 0.f);
    }
    if (rs.predictor) {
        std::map<std::string, ad::Var> params;
        std::map<std::string, std::shared_ptr<nn::BnStats>> stats;
        rs.predictor->collect(params, stats);
        for (auto& [name, p] : params) rs.opt->add_param(p, config.weight_decay);
    }
    for (auto& ks : rs.ti_params)
        for (auto& p : ks) rs.opt->add_param(p, 0.f);

    // non-curriculum ablation: all modules active from the first epoch
    if (!config.curriculum && M > 0) {
        rs.stage = M;
        if (rs.predictor) rs.predictor->active_modules = M;
    }

    Tensor weights;
    if (config.gaussian_weight_sigma > 0.f)
        weights = clustering::gaussian_weight(dataset.height(), dataset.width(),
                                              config.gaussian_weight_sigma);

    Rng rng(mix_seed(config.seed, 3));
    std::ofstream metrics(run_dir + "/metrics.jsonl");
    int epoch = 0;
    bool diverged = false;
    std::string divergence_note;

    auto run_epoch = [&](int stage_for_log) -> double {
        std::vector<int> order(dataset.n());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        int64_t seen = 0;
        std::vector<int> counts(config.n_clusters, 0);
        for (int b0 = 0; b0 < dataset.n(); b0 += config.batch_size) {
            std::vector<int> idx(order.begin() + b0,
                                 order.begin() + std::min<int>(b0 + config.batch_size,
                                                               dataset.n()));
            Tensor batch = gather_batch(dataset, idx);
            auto res = batch_loss(rs, batch, idx, weights);
            float l = res.loss->value[0];
            if (!std::isfinite(l))
                throw std::runtime_error("training: non-finite loss (divergence)");
            rs.opt->zero_grad();
            ad::backward(res.loss);
            rs.opt->lr = rs.lr;
            rs.opt->step();
            loss_sum += static_cast<double>(l) * idx.size();
            seen += static_cast<int64_t>(idx.size());
            for (int a : res.assignments) ++counts[a];
        }
        double epoch_loss = loss_sum / seen;
        std::vector<ReassignEvent> events;
        if (config.reassign_enabled) events = reassign_empty(rs, counts, rng);
        json rec = {{"epoch", epoch},
                    {"stage", stage_for_log},
                    {"loss", epoch_loss},
                    {"lr", rs.lr},
                    {"reassignments", json::array()}};
        for (const auto& e : events)
            rec["reassignments"].push_back({{"cluster", e.target}, {"source", e.source}});
        metrics << rec << "\n";
        metrics.flush();
        ++epoch;
        return epoch_loss;
    };

    auto run_stage = [&](int budget) {
        double best = 1e300;
        int flat = 0;
        for (int e = 0; e < budget; ++e) {
            double l = run_epoch(rs.stage);
            if (l < best * (1.0 - config.plateau_rel_tol)) {
                best = std::min(best, l);
                flat = 0;
            } else if (++flat >= config.plateau_patience) {
                break;  // converged by the plateau rule
            }
            best = std::min(best, l);
        }
    };

    try {
        if (config.curriculum || M == 0) {
            run_stage(eps[0]);
            for (int s = 0; s < M; ++s) {
                curriculum_step(rs);
                run_stage(eps[s + 1]);
            }
        } else {
            run_stage(std::accumulate(eps.begin(), eps.end(), 0));
        }
        // "divide the learning rate by 10 after convergence"
        rs.lr = config.lr / config.lr_decay_factor;
        run_stage(config.final_lr_epochs);
    } catch (const std::runtime_error& e) {
        diverged = true;
        divergence_note = e.what();
    }

    // final full-dataset loss and assignments, running statistics frozen
    double final_loss = 0.0;
    std::vector<int> assignments;
    if (!diverged) std::tie(final_loss, assignments) = evaluate(rs, dataset);

    eval::RunRecord record;
    record.run_dir = run_dir;
    record.final_loss = diverged ? std::numeric_limits<double>::infinity() : final_loss;
    record.seed = config.seed;
    if (!diverged && dataset.labeled()) {
        record.acc = eval::accuracy(assignments, dataset.labels, config.n_clusters);
        record.nmi = eval::nmi(assignments, dataset.labels);
    }
    record.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

    save_checkpoint(rs, run_dir + "/final.ckpt", uses_transforms ? recipe : "");
    json rr = {{"final_loss", record.final_loss},
               {"acc", record.acc},
               {"nmi", record.nmi},
               {"wall_seconds", record.wall_seconds},
               {"seed", config.seed},
               {"epochs", epoch},
               {"diverged", diverged}};
    if (diverged) {
        rr["final_loss"] = "inf";
        rr["diagnostic"] = divergence_note;
    }
    std::ofstream(run_dir + "/run_record.json") << rr << "\n";
    if (diverged) throw std::runtime_error("fit: " + divergence_note);
    return {record, assignments};
}

std::pair<double, std::vector<int>> evaluate(RunState& rs, const data::Dataset& dataset) {
    if (rs.predictor) rs.predictor->training_mode = false;
    Tensor weights;
    if (rs.config.gaussian_weight_sigma > 0.f)
        weights = clustering::gaussian_weight(dataset.height(), dataset.width(),
                                              rs.config.gaussian_weight_sigma);
    double loss = 0.0;
    int64_t seen = 0;
    std::vector<int> assignments;
    for (int b0 = 0; b0 < dataset.n(); b0 += rs.config.batch_size) {
        std::vector<int> idx(std::min(rs.config.batch_size, dataset.n() - b0));
        std::iota(idx.begin(), idx.end(), b0);
        Tensor batch = gather_batch(dataset, idx);
        auto res = batch_loss(rs, batch, idx, weights);
        loss += static_cast<double>(res.loss->value[0]) * idx.size();
        seen += static_cast<int64_t>(idx.size());
        assignments.insert(assignments.end(), res.assignments.begin(),
                           res.assignments.end());
    }
    return {loss / seen, assignments};
}

TrainConfig config_from_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config: cannot open " + path);
    json j = json::parse(is);
    TrainConfig c;
    if (j.contains("method")) c.method = method_from_name(j["method"]);
    c.dataset = j.value("dataset", c.dataset);
    c.n_clusters = j.value("K", c.n_clusters);
    c.recipe = j.value("steps", c.recipe);
    c.lr = j.value("lr", c.lr);
    c.lr_decay_factor = j.value("lr_decay_factor", c.lr_decay_factor);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.batch_size = j.value("batch_size", c.batch_size);
    if (j.contains("epochs_per_stage"))
        c.epochs_per_stage = j["epochs_per_stage"].get<std::vector<int>>();
    c.final_lr_epochs = j.value("final_lr_epochs", c.final_lr_epochs);
    c.plateau_rel_tol = j.value("plateau_rel_tol", c.plateau_rel_tol);
    c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
    c.reassign_threshold_frac =
        j.value("reassign_threshold_frac", c.reassign_threshold_frac);
    c.noise_std = j.value("noise_std", c.noise_std);
    c.curriculum = j.value("curriculum", c.curriculum);
    c.reassign_enabled = j.value("reassign_enabled", c.reassign_enabled);
    c.gaussian_weight_sigma = j.value("gaussian_weight_sigma", c.gaussian_weight_sigma);
    c.seed = j.value("seed", c.seed);
    return c;
}

RunState load_state(const std::string& ckpt_path, const data::Dataset& dataset) {
    auto ck = checkpoint::load(ckpt_path);
    RunState rs;
    rs.config.method = method_from_name(ck.meta["method"].get<std::string>());
    rs.config.n_clusters = ck.meta["K"];
    rs.config.recipe = ck.meta.value("steps", std::string());
    rs.config.batch_size = ck.meta.value("batch_size", rs.config.batch_size);
    rs.config.gaussian_weight_sigma =
        ck.meta.value("gaussian_weight_sigma", rs.config.gaussian_weight_sigma);
    rs.config.seed = ck.meta.value("seed", uint64_t(0));
    rs.dataset = dataset;
    rs.stage = ck.meta.value("stage", 0);
    if (!rs.config.recipe.empty())
        rs.steps = transforms::parse_recipe(rs.config.recipe, dataset.channels());
    int K = rs.config.n_clusters;
    auto tensor = [&](const std::string& name) -> Tensor& {
        auto it = ck.tensors.find(name);
        if (it == ck.tensors.end())
            throw std::runtime_error("checkpoint: missing tensor " + name);
        return it->second;
    };
    if (is_gmm(rs.config.method)) {
        for (int k = 0; k < K; ++k) {
            rs.gmm.means.push_back(ad::leaf(tensor("mean" + std::to_string(k))));
            rs.gmm.var_params.push_back(ad::leaf(tensor("var" + std::to_string(k))));
            rs.gmm.mixing_logits.push_back(ad::leaf(tensor("eta" + std::to_string(k))));
        }
    } else {
        for (int k = 0; k < K; ++k)
            rs.kmeans.prototypes.push_back(ad::leaf(tensor("prototype" + std::to_string(k))));
    }
    if (is_dti(rs.config.method)) {
        predictor::PredictorConfig pc;
        pc.n_clusters = K;
        pc.steps = rs.steps;
        pc.channels = ck.meta.value("channels", dataset.channels());
        pc.H = ck.meta.value("height", dataset.height());
        pc.W = ck.meta.value("width", dataset.width());
        pc.active_modules = rs.stage;
        rs.predictor = predictor::init_identity(pc, 0);
        rs.predictor->active_modules = rs.stage;
        rs.predictor->training_mode = false;
        std::map<std::string, ad::Var> params;
        std::map<std::string, std::shared_ptr<nn::BnStats>> stats;
        rs.predictor->collect(params, stats);
        for (auto& [name, p] : params) p->value = tensor(name);
        for (auto& [name, s] : stats) {
            s->mean = tensor(name + ".running_mean");
            s->var = tensor(name + ".running_var");
        }
    }
    if (rs.config.method == Method::ti_kmeans) {
        rs.ti_params.assign(K, {});
        for (int k = 0; k < K; ++k)
            for (size_t m = 0; m < rs.steps.size(); ++m) {
                Tensor& t = tensor("ti" + std::to_string(k) + "_" + std::to_string(m));
                if (t.dim(0) != dataset.n())
                    throw std::runtime_error(
                        "checkpoint: per-sample parameters were trained on a different "
                        "dataset size");
                rs.ti_params[k].push_back(ad::leaf(t));
            }
    }
    return rs;
}

std::vector<std::pair<int, double>> elbow_scan(const data::Dataset& dataset,
                                               const std::vector<int>& k_list,
                                               const TrainConfig& config, int runs,
                                               const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::vector<std::pair<int, double>> table;
    for (int K : k_list) {
        double avg = 0.0;
        for (int r = 0; r < runs; ++r) {
            TrainConfig c = config;
            c.n_clusters = K;
            c.seed = mix_seed(config.seed, static_cast<uint64_t>(K) * 1000 + r);
            auto res = fit(dataset, c,
                           out_dir + "/k" + std::to_string(K) + "_run" + std::to_string(r));
            avg += res.record.final_loss;
        }
        table.emplace_back(K, avg / runs);
    }
    json j = json::array();
    for (auto [k, l] : table) j.push_back({{"K", k}, {"avg_final_loss", l}});
    std::ofstream(out_dir + "/scan.json") << j << "\n";
    return table;
}

}  // namespace dti::training
