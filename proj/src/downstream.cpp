#include "finesdf/downstream.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

namespace finesdf {
namespace down {

using tk::Graph;
using tk::Tensor;

std::string strategy_name(Strategy s) {
    switch (s) {
        case Strategy::Parametric: return "parametric";
        case Strategy::LatentDirect: return "latent_direct";
        case Strategy::Finetune: return "finetune";
        case Strategy::Scratch: return "scratch";
    }
    return "?";
}

std::string task_name(TaskKind t) {
    return t == TaskKind::ReactionForce ? "reaction_force" : "deformation_field";
}

Strategy strategy_from_name(const std::string& s) {
    if (s == "parametric") return Strategy::Parametric;
    if (s == "latent_direct") return Strategy::LatentDirect;
    if (s == "finetune") return Strategy::Finetune;
    if (s == "scratch") return Strategy::Scratch;
    throw InvalidParams("unknown strategy: " + s);
}

double force_amplitude(const ParamVector& p) {
    if (p.family == Family::CrashBox) {
        double h = p.values[0], w = p.values[1], t = p.values[3];
        return t * 2.0 * (w + h);
    }
    double rt = p.values[0], r = p.values[1], pitch = p.values[2];
    return rt * r * (1.0 + 1.0 / pitch);
}

namespace {

double force_phase(const ParamVector& p) {
    // crash box: pi*length; bottle: pi*rib_spacing
    return M_PI * (p.family == Family::CrashBox ? p.values[2] : p.values[3]);
}

double frame_tau(size_t f, size_t frames) { return double(f) / double(frames - 1); }

}  // namespace

std::vector<double> proxy_reaction_force(const ParamVector& p, size_t frames) {
    if (frames < 2) throw InvalidParams("need at least 2 frames");
    double A = force_amplitude(p), phi = force_phase(p);
    std::vector<double> out(frames);
    for (size_t f = 0; f < frames; ++f) {
        double tau = frame_tau(f, frames);
        out[f] = A * (1.0 - std::exp(-6.0 * tau)) * (1.0 + 0.25 * std::sin(14.0 * tau + phi));
    }
    return out;
}

std::vector<double> proxy_displacement(const ParamVector& p, const std::vector<Vec3>& nodes,
                                       double z_min, size_t frames) {
    if (frames < 2) throw InvalidParams("need at least 2 frames");
    double c = 0.25 * force_amplitude(p);
    double kx = 0.4 * (1.0 + 0.5 * std::sin(force_phase(p)));
    std::vector<double> out(frames * nodes.size() * 3);
    for (size_t f = 0; f < frames; ++f) {
        double tau = frame_tau(f, frames);
        for (size_t n = 0; n < nodes.size(); ++n) {
            const Vec3& x = nodes[n];
            Vec3 d{kx * x.x, kx * x.y, -1.0};
            d = d.normalized();
            double amp = tau * c * (x.z - z_min);
            size_t o = (f * nodes.size() + n) * 3;
            out[o] = amp * d.x;
            out[o + 1] = amp * d.y;
            out[o + 2] = amp * d.z;
        }
    }
    return out;
}

LatentStats latent_stats(const std::vector<std::vector<double>>& latents,
                         const std::vector<uint32_t>& idx) {
    if (idx.empty()) throw InvalidParams("latent_stats on empty index set");
    size_t d = latents[idx[0]].size();
    LatentStats s;
    s.mean.assign(d, 0.0);
    s.stddev.assign(d, 0.0);
    for (uint32_t i : idx)
        for (size_t k = 0; k < d; ++k) s.mean[k] += latents[i][k];
    for (size_t k = 0; k < d; ++k) s.mean[k] /= double(idx.size());
    for (uint32_t i : idx)
        for (size_t k = 0; k < d; ++k) {
            double dv = latents[i][k] - s.mean[k];
            s.stddev[k] += dv * dv;
        }
    for (size_t k = 0; k < d; ++k) s.stddev[k] = std::sqrt(s.stddev[k] / double(idx.size()));
    return s;
}

std::vector<double> normalize_latents(const std::vector<double>& z, const LatentStats& stats) {
    std::vector<double> out(z.size());
    for (size_t k = 0; k < z.size(); ++k)
        out[k] = stats.stddev[k] > 0.0 ? (z[k] - stats.mean[k]) / stats.stddev[k] : z[k];
    return out;
}

const ParamVector& DownstreamDataset::param(uint32_t i) const {
    access_log.push_back({i, training_phase});
    return params[i];
}

const std::vector<double>& DownstreamDataset::latent(uint32_t i) const {
    access_log.push_back({i, training_phase});
    return latents[i];
}

const BrepGraph& DownstreamDataset::graph(uint32_t i) const {
    access_log.push_back({i, training_phase});
    return *graphs[i];
}

const std::vector<Vec3>& DownstreamDataset::node_set(uint32_t i) const {
    access_log.push_back({i, training_phase});
    return nodes[i];
}

bool DownstreamDataset::test_touched_in_training() const {
    std::set<uint32_t> test(test_ids.begin(), test_ids.end());
    for (const auto& a : access_log)
        if (a.during_training && test.count(a.geometry)) return true;
    return false;
}

namespace {

struct Head {
    std::vector<Tensor> w, b;

    static Head init(size_t in_dim, size_t width, size_t depth, size_t out_dim, Rng& rng) {
        Head h;
        size_t prev = in_dim;
        for (size_t l = 0; l < depth; ++l) {
            size_t next = l + 1 == depth ? out_dim : width;
            h.w.push_back(Tensor::randn({prev, next}, rng, std::sqrt(2.0 / double(prev))));
            h.b.push_back(Tensor::zeros({1, next}));
            prev = next;
        }
        return h;
    }

    Graph::Id forward(Graph& g, Graph::Id x) {
        for (size_t l = 0; l < w.size(); ++l) {
            x = g.add_bias(g.matmul(x, g.param(&w[l])), g.param(&b[l]));
            if (l + 1 < w.size()) x = g.elu(x);
        }
        return x;
    }

    std::vector<std::pair<Tensor*, Tensor*>> params() {
        std::vector<std::pair<Tensor*, Tensor*>> out;
        for (size_t l = 0; l < w.size(); ++l) out.push_back({&w[l], &b[l]});
        return out;
    }
};

struct ParamScaler {
    std::array<double, 4> lo{}, hi{};

    static ParamScaler fit(const DownstreamDataset& ds, const std::vector<uint32_t>& idx) {
        ParamScaler s;
        s.lo.fill(1e300);
        s.hi.fill(-1e300);
        for (uint32_t i : idx)
            for (size_t k = 0; k < 4; ++k) {
                double v = ds.param(i).values[k];
                s.lo[k] = std::min(s.lo[k], v);
                s.hi[k] = std::max(s.hi[k], v);
            }
        return s;
    }

    std::array<double, 4> apply(const ParamVector& p) const {
        std::array<double, 4> out;
        for (size_t k = 0; k < 4; ++k)
            out[k] = hi[k] > lo[k] ? (p.values[k] - lo[k]) / (hi[k] - lo[k]) : 0.5;
        return out;
    }
};

// one geometry's contribution to a batch: a feature row source plus rows of
// (frame [, node]) inputs and targets
struct GeomRows {
    uint32_t geometry;
    std::vector<double> extra;   // per row: tau [+ node xyz]
    std::vector<double> target;  // per row: 1 or 3 values
    size_t rows = 0;
};

GeomRows make_rows(const DownstreamDataset& ds, uint32_t gid, const FewshotConfig& cfg,
                   Rng* subsample) {
    GeomRows r;
    r.geometry = gid;
    const ParamVector& p = ds.param(gid);
    if (cfg.task == TaskKind::ReactionForce) {
        std::vector<double> f = proxy_reaction_force(p, cfg.frames);
        r.rows = cfg.frames;
        for (size_t i = 0; i < cfg.frames; ++i) {
            r.extra.push_back(frame_tau(i, cfg.frames));
            r.target.push_back(f[i]);
        }
    } else {
        const std::vector<Vec3>& nodes = ds.node_set(gid);
        std::vector<double> u = proxy_displacement(p, nodes, ds.z_min, cfg.frames);
        size_t total = cfg.frames * nodes.size();
        size_t take = subsample ? std::min(cfg.rows_per_geometry, total) : total;
        r.rows = take;
        for (size_t i = 0; i < take; ++i) {
            size_t pick = subsample ? size_t(subsample->index(total)) : i;
            size_t f = pick / nodes.size(), n = pick % nodes.size();
            r.extra.push_back(frame_tau(f, cfg.frames));
            r.extra.push_back(nodes[n].x);
            r.extra.push_back(nodes[n].y);
            r.extra.push_back(nodes[n].z);
            r.target.insert(r.target.end(), &u[pick * 3], &u[pick * 3] + 3);
        }
    }
    return r;
}

}  // namespace

FewshotRun fewshot_run(DownstreamDataset& data, const FewshotConfig& cfg,
                       const net::PretrainModel* pretrained) {
    auto t0 = std::chrono::steady_clock::now();
    if (cfg.shots < 2) throw InsufficientShots("need at least 2 shot geometries");
    if (cfg.shots > data.train_ids.size())
        throw InsufficientShots("shots exceed available train geometries");
    bool needs_pretrained =
        cfg.strategy == Strategy::LatentDirect || cfg.strategy == Strategy::Finetune;
    if (needs_pretrained && !pretrained)
        throw MissingArtifact("strategy requires a pretrained model");

    // Seeded shot sampling: the leading train indices cluster in one corner of
    // the design grid, so a fixed prefix would make every few-shot run an
    // extrapolation test. A shuffled draw keeps the shots representative and
    // varies them across seeds.
    Rng rng(cfg.seed);
    std::vector<uint32_t> pool = data.train_ids;
    for (size_t i = pool.size() - 1; i > 0; --i) std::swap(pool[i], pool[rng.index(i + 1)]);
    std::vector<uint32_t> shot_ids(pool.begin(), pool.begin() + cfg.shots);

    const size_t feat_dim = cfg.strategy == Strategy::Parametric ? 4 : net::kLatentDim;
    const size_t extra_dim = cfg.task == TaskKind::ReactionForce ? 1 : 4;
    const size_t out_dim = cfg.task == TaskKind::ReactionForce ? 1 : 3;

    data.training_phase = true;

    net::PretrainModel model;  // encoder actually used (Finetune/Scratch only)
    bool use_encoder =
        cfg.strategy == Strategy::Finetune || cfg.strategy == Strategy::Scratch;
    if (cfg.strategy == Strategy::Finetune) {
        model = *pretrained;
    } else if (cfg.strategy == Strategy::Scratch) {
        net::EncoderConfig ec = pretrained ? pretrained->enc : net::EncoderConfig::desk();
        net::DecoderConfig dc = pretrained ? pretrained->dec : net::DecoderConfig::desk_crashbox();
        model = net::PretrainModel::init(ec, dc, rng.next_u64());
    }

    ParamScaler scaler;
    LatentStats stats;
    if (cfg.strategy == Strategy::Parametric) scaler = ParamScaler::fit(data, shot_ids);
    if (cfg.strategy == Strategy::LatentDirect) stats = latent_stats(data.latents, shot_ids);

    // fixed feature rows for the non-encoder strategies
    auto fixed_feature = [&](uint32_t gid) -> std::vector<double> {
        if (cfg.strategy == Strategy::Parametric) {
            auto a = scaler.apply(data.param(gid));
            return {a.begin(), a.end()};
        }
        return normalize_latents(data.latent(gid), stats);
    };

    Head head = Head::init(feat_dim + extra_dim, cfg.head_width, cfg.head_depth, out_dim, rng);
    tk::AdamState opt;

    std::map<Tensor*, double> lr_scale;
    auto run_batch = [&](const std::vector<uint32_t>& gids, bool train, Rng* subsample) {
        Graph g;
        Graph::Id total = -1;
        size_t total_rows = 0;
        std::vector<GeomRows> rows;
        for (uint32_t gid : gids) {
            rows.push_back(make_rows(data, gid, cfg, subsample));
            total_rows += rows.back().rows;
        }
        for (const GeomRows& r : rows) {
            Graph::Id feat;
            if (use_encoder) {
                feat = model.encode(g, data.graph(r.geometry));
            } else {
                std::vector<double> f = fixed_feature(r.geometry);
                feat = g.input(Tensor::from({1, feat_dim}, std::move(f)));
            }
            Graph::Id frow = g.broadcast_rows(feat, r.rows);
            Tensor extra({r.rows, extra_dim});
            extra.data = r.extra;
            Graph::Id x = g.concat_cols(frow, g.input(std::move(extra)));
            Graph::Id pred = head.forward(g, x);
            Tensor tgt({r.rows, out_dim});
            tgt.data = r.target;
            Graph::Id l =
                g.scale(g.mse(pred, g.input(std::move(tgt))), double(r.rows) / double(total_rows));
            total = total < 0 ? l : g.add(total, l);
        }
        double loss = g.val(total).data[0];
        if (train) {
            if (!std::isfinite(loss)) throw NonFiniteLoss("downstream loss diverged");
            g.backward(total);
            tk::adam_step(g.param_grads(), opt, cfg.learning_rate, lr_scale);
        }
        return loss;
    };

    if (cfg.strategy == Strategy::Finetune)
        for (Tensor* t : model.encoder_params()) lr_scale[t] = cfg.finetune_lr_factor;

    std::vector<uint32_t> order = shot_ids;
    size_t pos = order.size();
    size_t bsz = std::min(cfg.batch_geometries, shot_ids.size());
    for (size_t step = 0; step < cfg.steps; ++step) {
        if (pos + bsz > order.size()) {
            for (size_t i = order.size() - 1; i > 0; --i)
                std::swap(order[i], order[rng.index(i + 1)]);
            pos = 0;
        }
        std::vector<uint32_t> gids(order.begin() + pos, order.begin() + pos + bsz);
        pos += bsz;
        run_batch(gids, true, &rng);
    }

    data.training_phase = false;

    // full-coverage evaluation on the fixed test split
    double mse_sum = 0.0;
    size_t mse_rows = 0;
    for (uint32_t gid : data.test_ids) {
        double l = run_batch({gid}, false, nullptr);
        GeomRows probe = make_rows(data, gid, cfg, nullptr);
        mse_sum += l * double(probe.rows);
        mse_rows += probe.rows;
    }

    FewshotRun result;
    result.strategy = cfg.strategy;
    result.task = cfg.task;
    result.shots = cfg.shots;
    result.seed = cfg.seed;
    result.test_mse = mse_sum / double(mse_rows);
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

void write_results_csv(const std::vector<FewshotRun>& runs, const std::string& path) {
    std::ofstream out(path);
    // No wall-clock column: reruns of the same config must be byte-identical.
    out << "strategy,task,shots,seed,test_mse\n";
    char buf[256];
    for (const auto& r : runs) {
        std::snprintf(buf, sizeof(buf), "%s,%s,%zu,%llu,%.17g\n",
                      strategy_name(r.strategy).c_str(), task_name(r.task).c_str(), r.shots,
                      (unsigned long long)r.seed, r.test_mse);
        out << buf;
    }
}

void write_sweep_svg(const std::vector<FewshotRun>& runs, const std::string& path) {
    // mean log10 MSE vs shots, one polyline per strategy
    std::map<Strategy, std::map<size_t, std::pair<double, int>>> agg;
    double lo = 1e300, hi = -1e300;
    size_t smin = SIZE_MAX, smax = 0;
    for (const auto& r : runs) {
        double v = std::log10(std::max(r.test_mse, 1e-12));
        auto& cell = agg[r.strategy][r.shots];
        cell.first += v;
        cell.second += 1;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        smin = std::min(smin, r.shots);
        smax = std::max(smax, r.shots);
    }
    if (agg.empty()) throw InvalidParams("no runs to plot");
    if (hi <= lo) hi = lo + 1.0;
    if (smax <= smin) smax = smin + 1;
    const double W = 640, H = 420, ml = 60, mr = 20, mt = 20, mb = 40;
    auto px = [&](double shots) {
        return ml + (W - ml - mr) * (shots - double(smin)) / double(smax - smin);
    };
    auto py = [&](double v) { return H - mb - (H - mt - mb) * (v - lo) / (hi - lo); };
    const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"};
    std::ofstream out(path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
        << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << W / 2 << "\" y=\"" << H - 8
        << "\" text-anchor=\"middle\" font-size=\"13\">shots</text>\n";
    out << "<text x=\"14\" y=\"" << H / 2 << "\" font-size=\"13\" transform=\"rotate(-90 14 "
        << H / 2 << ")\" text-anchor=\"middle\">log10 test MSE</text>\n";
    int ci = 0;
    double ly = mt + 10;
    for (const auto& [strat, by_shots] : agg) {
        std::string pts;
        for (const auto& [shots, cell] : by_shots) {
            double v = cell.first / cell.second;
            pts += std::to_string(px(double(shots))) + "," + std::to_string(py(v)) + " ";
        }
        const char* c = colors[ci % 4];
        out << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"2\" points=\""
            << pts << "\"/>\n";
        out << "<text x=\"" << W - mr - 150 << "\" y=\"" << ly << "\" font-size=\"12\" fill=\""
            << c << "\">" << strategy_name(strat) << "</text>\n";
        ly += 16;
        ++ci;
    }
    out << "</svg>\n";
}

}  // namespace down
}  // namespace finesdf
