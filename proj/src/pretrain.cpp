#include "finesdf/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace finesdf {
namespace pretrain {

using tk::Graph;
using tk::Tensor;

void TrainingConfig::validate() const {
    if (random_coords > coords_per_iter)
        throw InvalidParams("random_coords (N_r) must be <= coords_per_iter (N_c)");
    if (use_batch_attention && batch_geometries < 2)
        throw InvalidParams("batch attention needs >= 2 geometries per batch");
    if (use_batch_attention && !interpolation_enabled)
        throw InvalidParams("batch attention requires cross-geometry interpolation");
    if (batch_geometries == 0 || coords_per_iter == 0)
        throw InvalidParams("batch size and coordinate count must be positive");
    if (!(final_lr_fraction > 0.0) || final_lr_fraction > 1.0)
        throw InvalidParams("final_lr_fraction must be in (0, 1]");
}

WeightField batch_weights(const std::vector<double>& values, size_t batch, size_t count,
                          double eps) {
    if (batch < 2) throw InvalidParams("batch_weights needs batch >= 2");
    if (values.size() != batch * count) throw ShapeMismatch("batch_weights value matrix size");
    WeightField f;
    f.batch = batch;
    f.count = count;
    f.mu.resize(count);
    f.bd.resize(batch * count);
    f.mu_bd.resize(count);
    f.w.resize(batch * count);
    for (size_t n = 0; n < count; ++n) {
        double mu = 0.0;
        for (size_t b = 0; b < batch; ++b) mu += values[b * count + n];
        mu /= double(batch);
        f.mu[n] = mu;
        double mbd = 0.0;
        for (size_t b = 0; b < batch; ++b) {
            double bd = std::abs(values[b * count + n] - mu);
            f.bd[b * count + n] = bd;
            mbd += bd;
        }
        mbd /= double(batch);
        f.mu_bd[n] = mbd;
        double floored = std::max(mbd, eps);
        for (size_t b = 0; b < batch; ++b)
            f.w[b * count + n] = 1.0 + std::log((f.bd[b * count + n] + floored) / floored);
    }
    return f;
}

BatchPlan assemble_batch(PretrainDataset& data, const std::vector<uint32_t>& geometry_ids,
                         const TrainingConfig& cfg, Rng& rng) {
    const size_t B = geometry_ids.size();
    for (uint32_t gid : geometry_ids) {
        if (data.sample_sets[gid]->size() == 0)
            throw EmptySampleSet("geometry " + std::to_string(gid) + " has an empty sample set");
        if (!data.sample_sets[gid]->has_spatial_index() && cfg.interpolation_enabled)
            data.sample_sets[gid]->build_spatial_index();
    }
    BatchPlan plan;
    plan.geometry_ids = geometry_ids;

    if (!cfg.interpolation_enabled) {
        // crash-box mode: per-geometry independent coordinates, exact targets
        plan.shared = false;
        plan.own_coords.resize(B);
        plan.own_targets.resize(B);
        size_t per = cfg.coords_per_iter / B, extra = cfg.coords_per_iter % B;
        for (size_t b = 0; b < B; ++b) {
            const auto& set = *data.sample_sets[geometry_ids[b]];
            size_t n = per + (b < extra ? 1 : 0);
            for (size_t i = 0; i < n; ++i) {
                size_t idx = size_t(rng.index(set.size()));
                plan.own_coords[b].push_back(set.coord(idx));
                plan.own_targets[b].push_back(set.values[idx]);
            }
        }
        return plan;
    }

    size_t owned_total = cfg.coords_per_iter - cfg.random_coords;
    size_t per = owned_total / B, extra = owned_total % B;
    std::vector<double> exact;  // stored value for each owned coordinate
    for (size_t b = 0; b < B; ++b) {
        const auto& set = *data.sample_sets[geometry_ids[b]];
        size_t n = per + (b < extra ? 1 : 0);
        for (size_t i = 0; i < n; ++i) {
            size_t idx = size_t(rng.index(set.size()));
            plan.coords.push_back(set.coord(idx));
            plan.owner.push_back(int32_t(b));
            exact.push_back(set.values[idx]);
        }
    }
    for (size_t i = 0; i < cfg.random_coords; ++i) {
        double m = cfg.box_margin;
        plan.coords.push_back({rng.uniform(-m, m), rng.uniform(-m, m), rng.uniform(-m, m)});
        plan.owner.push_back(-1);
    }
    plan.targets.assign(B, std::vector<double>(plan.coords.size()));
    for (size_t b = 0; b < B; ++b) {
        auto& set = *data.sample_sets[geometry_ids[b]];
        for (size_t n = 0; n < plan.coords.size(); ++n) {
            if (plan.owner[n] == int32_t(b))
                plan.targets[b][n] = exact[n];
            else
                plan.targets[b][n] = set.knn_interpolate(plan.coords[n], cfg.knn);
        }
    }
    return plan;
}

StepStats train_step(net::PretrainModel& model, const PretrainDataset& data,
                     const BatchPlan& plan, const TrainingConfig& cfg, tk::AdamState& opt) {
    const size_t B = plan.geometry_ids.size();
    Graph g;
    std::vector<Graph::Id> latents(B);
    for (size_t b = 0; b < B; ++b)
        latents[b] = model.encode(g, *data.graphs[plan.geometry_ids[b]]);

    Graph::Id total = -1;
    StepStats stats;
    if (plan.shared) {
        const size_t N = plan.coords.size();
        Tensor loc = model.locality_rows(plan.coords);
        std::vector<double> flat(B * N);
        for (size_t b = 0; b < B; ++b)
            std::copy(plan.targets[b].begin(), plan.targets[b].end(), &flat[b * N]);
        Tensor weights = Tensor::full({B, N}, 1.0);
        if (cfg.use_batch_attention) {
            WeightField f = batch_weights(flat, B, N);
            weights.data = f.w;
        }
        double wsum = 0.0, wmax = 0.0;
        for (double w : weights.data) {
            wsum += w;
            wmax = std::max(wmax, w);
        }
        stats.mean_weight = wsum / double(weights.numel());
        stats.max_weight = wmax;
        for (size_t b = 0; b < B; ++b) {
            Graph::Id pred = model.decode(g, latents[b], loc);
            Tensor tgt({N, 1});
            std::copy(plan.targets[b].begin(), plan.targets[b].end(), tgt.data.begin());
            Tensor wb({N, 1});
            std::copy_n(&weights.data[b * N], N, wb.data.begin());
            Graph::Id lb = g.weighted_mse(pred, g.input(std::move(tgt)), wb);
            total = b == 0 ? lb : g.add(total, lb);
        }
        total = g.scale(total, 1.0 / double(B));
    } else {
        size_t cnt = 0;
        for (size_t b = 0; b < B; ++b) cnt += plan.own_coords[b].size();
        for (size_t b = 0; b < B; ++b) {
            size_t n = plan.own_coords[b].size();
            if (n == 0) continue;
            Tensor loc = model.locality_rows(plan.own_coords[b]);
            Graph::Id pred = model.decode(g, latents[b], loc);
            Tensor tgt({n, 1});
            std::copy(plan.own_targets[b].begin(), plan.own_targets[b].end(), tgt.data.begin());
            Graph::Id lb = g.scale(g.mse(pred, g.input(std::move(tgt))), double(n) / double(cnt));
            total = total < 0 ? lb : g.add(total, lb);
        }
    }

    double loss = g.val(total).data[0];
    if (!std::isfinite(loss)) {
        double vmax = 0.0;
        auto scan = [&](const std::vector<double>& v) {
            for (double x : v) vmax = std::max(vmax, std::abs(x));
        };
        if (plan.shared)
            for (const auto& row : plan.targets) scan(row);
        else
            for (const auto& row : plan.own_targets) scan(row);
        std::string ids;
        for (size_t b = 0; b < B; ++b) ids += (b ? "," : "") + std::to_string(plan.geometry_ids[b]);
        throw NonFiniteLoss("non-finite loss; geometry ids [" + ids + "], max |target| " +
                            std::to_string(vmax));
    }
    g.backward(total);
    tk::adam_step(g.param_grads(), opt, cfg.learning_rate);
    stats.loss = loss;
    return stats;
}

void save_train_state(const std::string& path, net::PretrainModel& model,
                      const tk::AdamState& opt, const Rng& rng, size_t step,
                      const std::vector<uint32_t>& epoch_order, size_t epoch_pos) {
    std::vector<std::pair<std::string, const Tensor*>> tensors;
    for (auto& [name, t] : model.named_params()) tensors.push_back({name, t});
    std::vector<Tensor> moment_store;
    moment_store.reserve(2 * model.named_params().size());
    for (auto& [name, t] : model.named_params()) {
        auto it = opt.moments.find(t);
        if (it == opt.moments.end()) continue;
        moment_store.push_back(it->second.first);
        tensors.push_back({"adam_m." + name, &moment_store.back()});
        moment_store.push_back(it->second.second);
        tensors.push_back({"adam_v." + name, &moment_store.back()});
    }
    tk::write_checkpoint(path, tensors);
    model.save(path + ".model");  // config header travels with the weights
    nlohmann::json j;
    j["step"] = step;
    j["adam_step"] = opt.step;
    j["rng_state"] = rng.state();
    j["epoch_order"] = epoch_order;
    j["epoch_pos"] = epoch_pos;
    std::ofstream out(path + ".state.json");
    out << j.dump(1);
}

PretrainResult run_pretrain(PretrainDataset& data, net::PretrainModel& model,
                            const TrainingConfig& cfg, const std::string& checkpoint_dir,
                            const std::string& resume_from) {
    cfg.validate();
    const size_t ngeom = data.graphs.size();
    if (ngeom == 0) throw EmptySampleSet("no geometries to pretrain on");
    const size_t B = std::min(cfg.batch_geometries, ngeom);

    Rng rng(cfg.seed);
    tk::AdamState opt;
    std::vector<uint32_t> order(ngeom);
    std::iota(order.begin(), order.end(), 0u);
    size_t pos = ngeom;  // forces a shuffle at first use
    size_t start_step = 0;
    double ema = 0.0;

    if (!resume_from.empty()) {
        auto tensors = tk::read_checkpoint(resume_from);
        for (auto& [name, t] : model.named_params()) {
            auto it = tensors.find(name);
            if (it == tensors.end()) throw FormatError("resume missing tensor: " + name);
            *t = it->second;
            auto im = tensors.find("adam_m." + name);
            auto iv = tensors.find("adam_v." + name);
            if (im != tensors.end() && iv != tensors.end())
                opt.moments[t] = {im->second, iv->second};
        }
        std::ifstream in(resume_from + ".state.json");
        if (!in) throw MissingArtifact("missing train state json: " + resume_from);
        nlohmann::json j;
        in >> j;
        start_step = j["step"].get<size_t>();
        opt.step = j["adam_step"].get<int64_t>();
        rng.set_state(j["rng_state"].get<uint64_t>());
        order = j["epoch_order"].get<std::vector<uint32_t>>();
        pos = j["epoch_pos"].get<size_t>();
    }

    PretrainResult result;
    for (size_t step = start_step; step < cfg.iterations; ++step) {
        if (pos + B > ngeom) {
            for (size_t i = ngeom - 1; i > 0; --i)
                std::swap(order[i], order[rng.index(i + 1)]);
            pos = 0;
        }
        std::vector<uint32_t> ids(order.begin() + pos, order.begin() + pos + B);
        pos += B;
        BatchPlan plan = assemble_batch(data, ids, cfg, rng);
        TrainingConfig step_cfg = cfg;
        if (cfg.final_lr_fraction < 1.0) {
            // pure function of step, so resumed runs stay bit-identical
            double c = 0.5 * (1.0 + std::cos(M_PI * double(step) / double(cfg.iterations)));
            step_cfg.learning_rate =
                cfg.learning_rate * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * c);
        }
        StepStats st = train_step(model, data, plan, step_cfg, opt);
        ema = step == start_step && result.curve.empty() ? st.loss : 0.99 * ema + 0.01 * st.loss;
        result.curve.push_back({step, st.loss, ema, st.mean_weight, st.max_weight});
        if (!checkpoint_dir.empty() && cfg.checkpoint_every > 0 &&
            (step + 1) % cfg.checkpoint_every == 0)
            save_train_state(checkpoint_dir + "/state_" + std::to_string(step + 1) + ".tkpt",
                             model, opt, rng, step + 1, order, pos);
    }
    if (!checkpoint_dir.empty())
        save_train_state(checkpoint_dir + "/state_final.tkpt", model, opt, rng, cfg.iterations,
                         order, pos);
    return result;
}

void write_loss_csv(const std::vector<CurveRow>& curve, const std::string& path) {
    std::ofstream out(path);
    out << "step,raw_loss,ema_loss,mean_weight,max_weight\n";
    char buf[256];
    for (const auto& r : curve) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g\n", r.step, r.raw_loss,
                      r.ema_loss, r.mean_weight, r.max_weight);
        out << buf;
    }
}

void write_training_config_json(const TrainingConfig& cfg, const std::string& path) {
    nlohmann::json j;
    j["batch_geometries"] = cfg.batch_geometries;
    j["knn"] = cfg.knn;
    j["coords_per_iter"] = cfg.coords_per_iter;
    j["random_coords"] = cfg.random_coords;
    j["iterations"] = cfg.iterations;
    j["learning_rate"] = cfg.learning_rate;
    j["final_lr_fraction"] = cfg.final_lr_fraction;
    j["seed"] = cfg.seed;
    j["use_batch_attention"] = cfg.use_batch_attention;
    j["interpolation_enabled"] = cfg.interpolation_enabled;
    j["checkpoint_every"] = cfg.checkpoint_every;
    std::ofstream out(path);
    out << j.dump(1);
}

TrainingConfig read_training_config_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifact("missing training config: " + path);
    nlohmann::json j;
    in >> j;
    TrainingConfig cfg;
    cfg.batch_geometries = j.value("batch_geometries", cfg.batch_geometries);
    cfg.knn = j.value("knn", cfg.knn);
    cfg.coords_per_iter = j.value("coords_per_iter", cfg.coords_per_iter);
    cfg.random_coords = j.value("random_coords", cfg.random_coords);
    cfg.iterations = j.value("iterations", cfg.iterations);
    cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
    cfg.final_lr_fraction = j.value("final_lr_fraction", cfg.final_lr_fraction);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.use_batch_attention = j.value("use_batch_attention", cfg.use_batch_attention);
    cfg.interpolation_enabled = j.value("interpolation_enabled", cfg.interpolation_enabled);
    cfg.checkpoint_every = j.value("checkpoint_every", cfg.checkpoint_every);
    return cfg;
}

}  // namespace pretrain
}  // namespace finesdf
