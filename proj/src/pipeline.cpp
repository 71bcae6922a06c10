#include "finesdf/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace finesdf {
namespace pipe {

namespace {

const char* kStageGen = "gen";
const char* kStageSdf = "sdf";
const char* kStageTrain = "train";
const char* kStageProbe = "probe";
const char* kStageRecon = "recon";
const char* kStageDownstream = "downstream";

std::vector<std::string> family_param_names(Family f) {
    if (f == Family::CrashBox) return {"height", "width", "length", "thickness"};
    return {"rib_thickness", "top_radius", "rib_pitch", "rib_spacing"};
}

void parallel_for(size_t n, int threads, const std::function<void(size_t)>& body) {
    if (threads <= 1 || n <= 1) {
        for (size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr err;
    std::mutex err_mu;
    for (int t = 0; t < threads; ++t)
        pool.emplace_back([&] {
            for (size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
                try {
                    body(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mu);
                    if (!err) err = std::current_exception();
                }
            }
        });
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
}

json encoder_json(const net::EncoderConfig& e) {
    return {{"face_c1", e.face_c1}, {"face_c2", e.face_c2}, {"edge_c1", e.edge_c1},
            {"edge_c2", e.edge_c2}, {"hidden", e.hidden},   {"rounds", e.rounds}};
}

net::EncoderConfig encoder_from_json(const json& j) {
    net::EncoderConfig e;
    e.face_c1 = j.value("face_c1", e.face_c1);
    e.face_c2 = j.value("face_c2", e.face_c2);
    e.edge_c1 = j.value("edge_c1", e.edge_c1);
    e.edge_c2 = j.value("edge_c2", e.edge_c2);
    e.hidden = j.value("hidden", e.hidden);
    e.rounds = j.value("rounds", e.rounds);
    return e;
}

json decoder_json(const net::DecoderConfig& d) {
    return {{"width", d.width},
            {"depth", d.depth},
            {"locality", d.mode == net::LocalityMode::RawXYZ ? "raw_xyz" : "fourier"},
            {"fourier_m", d.fourier_m},
            {"fourier_sigma", d.fourier_sigma},
            {"fourier_seed", d.fourier_seed},
            {"latent_skip", d.latent_skip}};
}

net::DecoderConfig decoder_from_json(const json& j) {
    net::DecoderConfig d;
    d.width = j.value("width", d.width);
    d.depth = j.value("depth", d.depth);
    std::string loc = j.value("locality", std::string("raw_xyz"));
    if (loc == "raw_xyz")
        d.mode = net::LocalityMode::RawXYZ;
    else if (loc == "fourier")
        d.mode = net::LocalityMode::Fourier;
    else
        throw FormatError("unknown locality mode: " + loc);
    d.fourier_m = j.value("fourier_m", d.fourier_m);
    d.fourier_sigma = j.value("fourier_sigma", d.fourier_sigma);
    d.fourier_seed = j.value("fourier_seed", d.fourier_seed);
    d.latent_skip = j.value("latent_skip", d.latent_skip);
    return d;
}

json config_json(const PipelineConfig& cfg) {
    json j;
    j["family"] = family_name(cfg.family);
    j["grid"] = {{"levels", cfg.levels},
                 {"ranges", cfg.ranges},
                 {"test_fraction", cfg.test_fraction},
                 {"seed", cfg.grid_seed}};
    j["sampling"] = {
        {"mode", cfg.sampling_mode == sdf::SamplingMode::NearZero ? "near_zero" : "uniform_grid"},
        {"samples", cfg.samples_per_geometry},
        {"grid_resolution", cfg.grid_resolution},
        {"seed", cfg.sampling_seed}};
    j["model"] = {{"encoder", encoder_json(cfg.encoder)},
                  {"decoder", decoder_json(cfg.decoder)},
                  {"init_seed", cfg.init_seed}};
    j["training"] = {{"batch_geometries", cfg.training.batch_geometries},
                     {"knn", cfg.training.knn},
                     {"coords_per_iter", cfg.training.coords_per_iter},
                     {"random_coords", cfg.training.random_coords},
                     {"iterations", cfg.training.iterations},
                     {"learning_rate", cfg.training.learning_rate},
                     {"final_lr_fraction", cfg.training.final_lr_fraction},
                     {"seed", cfg.training.seed},
                     {"use_batch_attention", cfg.training.use_batch_attention},
                     {"interpolation_enabled", cfg.training.interpolation_enabled},
                     {"checkpoint_every", cfg.training.checkpoint_every}};
    j["eval"] = {{"recon_resolution", cfg.recon_resolution},
                 {"recon_geometry", cfg.recon_geometry},
                 {"density_thresholds", cfg.density_thresholds}};
    std::vector<std::string> strat;
    for (auto s : cfg.strategies) strat.push_back(down::strategy_name(s));
    j["downstream"] = {{"task", down::task_name(cfg.task)},
                       {"strategies", strat},
                       {"shots", cfg.shot_grid},
                       {"seeds", cfg.downstream_seeds},
                       {"steps", cfg.downstream.steps},
                       {"learning_rate", cfg.downstream.learning_rate},
                       {"finetune_lr_factor", cfg.downstream.finetune_lr_factor},
                       {"head_width", cfg.downstream.head_width},
                       {"head_depth", cfg.downstream.head_depth},
                       {"frames", cfg.downstream.frames},
                       {"batch_geometries", cfg.downstream.batch_geometries},
                       {"rows_per_geometry", cfg.downstream.rows_per_geometry}};
    j["out"] = cfg.out_dir;
    return j;
}

std::string stage_dir(const PipelineConfig& cfg, const char* stage) {
    return cfg.out_dir + "/" + stage;
}

void write_manifest(const PipelineConfig& cfg, const char* stage) {
    json j = {{"stage", stage}, {"config_hash", config_hash(cfg)}};
    std::ofstream out(stage_dir(cfg, stage) + "/manifest.json");
    out << j.dump(1);
}

std::string read_manifest_hash(const PipelineConfig& cfg, const char* stage) {
    std::string path = stage_dir(cfg, stage) + "/manifest.json";
    std::ifstream in(path);
    if (!in) throw MissingArtifact("missing stage manifest: " + path);
    json j;
    in >> j;
    return j.value("config_hash", std::string());
}

void require_stage(const PipelineConfig& cfg, const char* stage) {
    std::string h = read_manifest_hash(cfg, stage);
    if (h != config_hash(cfg))
        throw FormatError(std::string("config hash mismatch for stage '") + stage +
                          "': artifacts were produced by a different configuration");
}

DesignGrid load_grid(const PipelineConfig& cfg) {
    std::string path = stage_dir(cfg, kStageGen) + "/grid.json";
    if (!fs::exists(path)) throw MissingArtifact("missing design grid: " + path);
    return geomgen::read_grid_json(path);
}

BrepGraph load_graph(const PipelineConfig& cfg, uint32_t idx) {
    std::string path =
        stage_dir(cfg, kStageGen) + "/" + geometry_stem(idx) + ".brep.json";
    if (!fs::exists(path)) throw MissingArtifact("missing B-Rep graph: " + path);
    return geomgen::read_brep_json(path);
}

sdf::SdfSampleSet load_samples(const PipelineConfig& cfg, uint32_t idx) {
    std::string path = stage_dir(cfg, kStageSdf) + "/" + geometry_stem(idx) + ".nzs";
    if (!fs::exists(path)) throw MissingArtifact("missing sample set: " + path);
    return sdf::read_sample_set(path);
}

std::string model_path(const PipelineConfig& cfg) {
    return stage_dir(cfg, kStageTrain) + "/model.tkpt";
}

}  // namespace

void PipelineConfig::resolve_defaults() {
    bool zeroed = true;
    for (const auto& r : ranges)
        if (r[0] != 0.0 || r[1] != 0.0) zeroed = false;
    if (zeroed) ranges = geomgen::default_ranges(family);
}

PipelineConfig read_pipeline_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifact("missing config file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw FormatError("bad config JSON: " + std::string(e.what()));
    }
    PipelineConfig cfg;
    cfg.family = family_from_name(j.value("family", family_name(cfg.family)));
    if (j.contains("grid")) {
        const json& g = j["grid"];
        cfg.levels = g.value("levels", cfg.levels);
        if (g.contains("ranges")) cfg.ranges = g["ranges"].get<decltype(cfg.ranges)>();
        cfg.test_fraction = g.value("test_fraction", cfg.test_fraction);
        cfg.grid_seed = g.value("seed", cfg.grid_seed);
    }
    if (j.contains("sampling")) {
        const json& s = j["sampling"];
        std::string mode = s.value("mode", std::string("near_zero"));
        if (mode == "near_zero")
            cfg.sampling_mode = sdf::SamplingMode::NearZero;
        else if (mode == "uniform_grid")
            cfg.sampling_mode = sdf::SamplingMode::UniformGrid;
        else
            throw FormatError("unknown sampling mode: " + mode);
        cfg.samples_per_geometry = s.value("samples", cfg.samples_per_geometry);
        cfg.grid_resolution = s.value("grid_resolution", cfg.grid_resolution);
        cfg.sampling_seed = s.value("seed", cfg.sampling_seed);
    }
    if (j.contains("model")) {
        const json& m = j["model"];
        if (m.contains("encoder")) cfg.encoder = encoder_from_json(m["encoder"]);
        if (m.contains("decoder")) cfg.decoder = decoder_from_json(m["decoder"]);
        cfg.init_seed = m.value("init_seed", cfg.init_seed);
    }
    if (j.contains("training")) {
        const json& t = j["training"];
        cfg.training.batch_geometries = t.value("batch_geometries", cfg.training.batch_geometries);
        cfg.training.knn = t.value("knn", cfg.training.knn);
        cfg.training.coords_per_iter = t.value("coords_per_iter", cfg.training.coords_per_iter);
        cfg.training.random_coords = t.value("random_coords", cfg.training.random_coords);
        cfg.training.iterations = t.value("iterations", cfg.training.iterations);
        cfg.training.learning_rate = t.value("learning_rate", cfg.training.learning_rate);
        cfg.training.final_lr_fraction =
            t.value("final_lr_fraction", cfg.training.final_lr_fraction);
        cfg.training.seed = t.value("seed", cfg.training.seed);
        cfg.training.use_batch_attention =
            t.value("use_batch_attention", cfg.training.use_batch_attention);
        cfg.training.interpolation_enabled =
            t.value("interpolation_enabled", cfg.training.interpolation_enabled);
        cfg.training.checkpoint_every = t.value("checkpoint_every", cfg.training.checkpoint_every);
    }
    if (j.contains("eval")) {
        const json& e = j["eval"];
        cfg.recon_resolution = e.value("recon_resolution", cfg.recon_resolution);
        cfg.recon_geometry = e.value("recon_geometry", cfg.recon_geometry);
        if (e.contains("density_thresholds"))
            cfg.density_thresholds = e["density_thresholds"].get<std::vector<double>>();
    }
    if (j.contains("downstream")) {
        const json& d = j["downstream"];
        std::string task = d.value("task", down::task_name(cfg.task));
        if (task == "reaction_force")
            cfg.task = down::TaskKind::ReactionForce;
        else if (task == "deformation_field")
            cfg.task = down::TaskKind::DeformationField;
        else
            throw FormatError("unknown downstream task: " + task);
        if (d.contains("strategies")) {
            cfg.strategies.clear();
            for (const auto& s : d["strategies"])
                cfg.strategies.push_back(down::strategy_from_name(s.get<std::string>()));
        }
        if (d.contains("shots")) cfg.shot_grid = d["shots"].get<std::vector<size_t>>();
        if (d.contains("seeds"))
            cfg.downstream_seeds = d["seeds"].get<std::vector<uint64_t>>();
        cfg.downstream.steps = d.value("steps", cfg.downstream.steps);
        cfg.downstream.learning_rate = d.value("learning_rate", cfg.downstream.learning_rate);
        cfg.downstream.finetune_lr_factor =
            d.value("finetune_lr_factor", cfg.downstream.finetune_lr_factor);
        cfg.downstream.head_width = d.value("head_width", cfg.downstream.head_width);
        cfg.downstream.head_depth = d.value("head_depth", cfg.downstream.head_depth);
        cfg.downstream.frames = d.value("frames", cfg.downstream.frames);
        cfg.downstream.batch_geometries =
            d.value("batch_geometries", cfg.downstream.batch_geometries);
        cfg.downstream.rows_per_geometry =
            d.value("rows_per_geometry", cfg.downstream.rows_per_geometry);
    }
    cfg.out_dir = j.value("out", cfg.out_dir);
    cfg.resolve_defaults();
    return cfg;
}

void write_pipeline_config(const PipelineConfig& cfg, const std::string& path) {
    std::ofstream out(path);
    out << config_json(cfg).dump(1);
}

std::string config_hash(const PipelineConfig& cfg) {
    // out_dir says where artifacts go, not what they contain; keep it out of
    // the hash so a relocated run still validates.
    json j = config_json(cfg);
    j.erase("out");
    std::string s = j.dump();
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)h);
    return buf;
}

std::string geometry_stem(uint32_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "geom_%04u", index);
    return buf;
}

void cmd_gen(const PipelineConfig& cfg) {
    fs::create_directories(stage_dir(cfg, kStageGen));
    DesignGrid grid =
        geomgen::sample_design_grid(cfg.family, cfg.levels, cfg.ranges, cfg.test_fraction,
                                    cfg.grid_seed);
    Aabb box = geomgen::family_bounds(cfg.family, cfg.ranges);
    parallel_for(grid.entries.size(), cfg.threads, [&](size_t i) {
        auto [mesh, graph] = geomgen::gen_geometry(grid.entries[i]);
        geomgen::normalize_geometry(mesh, graph, box);
        std::string stem = stage_dir(cfg, kStageGen) + "/" + geometry_stem(uint32_t(i));
        write_obj(mesh, stem + ".obj");
        geomgen::write_brep_json(graph, stem + ".brep.json");
    });
    geomgen::write_grid_json(grid, stage_dir(cfg, kStageGen) + "/grid.json");
    write_pipeline_config(cfg, stage_dir(cfg, kStageGen) + "/config.json");
    write_manifest(cfg, kStageGen);
}

void cmd_sdf(const PipelineConfig& cfg) {
    require_stage(cfg, kStageGen);
    DesignGrid grid = load_grid(cfg);
    fs::create_directories(stage_dir(cfg, kStageSdf));
    parallel_for(grid.entries.size(), cfg.threads, [&](size_t i) {
        std::string stem = geometry_stem(uint32_t(i));
        TriMesh mesh = read_obj(stage_dir(cfg, kStageGen) + "/" + stem + ".obj");
        sdf::DistanceIndex index(mesh);
        sdf::SdfSampleSet set;
        if (cfg.sampling_mode == sdf::SamplingMode::NearZero)
            set = sdf::precompute_near_zero(index, cfg.samples_per_geometry,
                                            cfg.sampling_seed + i);
        else
            set = sdf::precompute_uniform_grid(index, cfg.grid_resolution);
        set.geometry_id = stem;
        sdf::write_sample_set(set, stage_dir(cfg, kStageSdf) + "/" + stem + ".nzs");
    });
    write_manifest(cfg, kStageSdf);
}

void cmd_pretrain(const PipelineConfig& cfg, const std::string& resume_from) {
    require_stage(cfg, kStageGen);
    require_stage(cfg, kStageSdf);
    DesignGrid grid = load_grid(cfg);
    fs::create_directories(stage_dir(cfg, kStageTrain));

    // pretraining sees the train split only
    std::vector<BrepGraph> graphs;
    std::vector<sdf::SdfSampleSet> sets;
    graphs.reserve(grid.train_indices.size());
    sets.reserve(grid.train_indices.size());
    for (uint32_t idx : grid.train_indices) {
        graphs.push_back(load_graph(cfg, idx));
        sets.push_back(load_samples(cfg, idx));
    }
    pretrain::PretrainDataset data;
    for (size_t i = 0; i < graphs.size(); ++i) {
        data.graphs.push_back(&graphs[i]);
        data.sample_sets.push_back(&sets[i]);
    }

    net::PretrainModel model = net::PretrainModel::init(cfg.encoder, cfg.decoder, cfg.init_seed);
    pretrain::PretrainResult result =
        pretrain::run_pretrain(data, model, cfg.training, stage_dir(cfg, kStageTrain),
                               resume_from);
    model.save(model_path(cfg));
    pretrain::write_loss_csv(result.curve, stage_dir(cfg, kStageTrain) + "/loss.csv");
    pretrain::write_training_config_json(cfg.training,
                                         stage_dir(cfg, kStageTrain) + "/training.json");
    write_manifest(cfg, kStageTrain);
}

net::PretrainModel load_trained_model(const PipelineConfig& cfg) {
    std::string path = model_path(cfg);
    if (!fs::exists(path)) throw MissingArtifact("missing trained model: " + path);
    return net::PretrainModel::load(path);
}

std::vector<double> normalized_params(const DesignGrid& grid) {
    std::vector<double> out;
    out.reserve(grid.entries.size() * 4);
    for (const auto& p : grid.entries)
        for (size_t k = 0; k < 4; ++k) {
            double lo = grid.ranges[k][0], hi = grid.ranges[k][1];
            out.push_back(hi > lo ? (p.values[k] - lo) / (hi - lo) : 0.5);
        }
    return out;
}

std::vector<std::vector<double>> load_all_latents(const PipelineConfig& cfg,
                                                  net::PretrainModel& model,
                                                  const DesignGrid& grid) {
    std::vector<std::vector<double>> latents(grid.entries.size());
    parallel_for(grid.entries.size(), cfg.threads, [&](size_t i) {
        BrepGraph graph = load_graph(cfg, uint32_t(i));
        latents[i] = model.encode_latent(graph);
    });
    return latents;
}

void cmd_probe(const PipelineConfig& cfg) {
    require_stage(cfg, kStageGen);
    require_stage(cfg, kStageTrain);
    DesignGrid grid = load_grid(cfg);
    net::PretrainModel model = load_trained_model(cfg);
    fs::create_directories(stage_dir(cfg, kStageProbe));

    std::vector<std::vector<double>> latents = load_all_latents(cfg, model, grid);
    std::vector<double> flat;
    for (const auto& z : latents) flat.insert(flat.end(), z.begin(), z.end());
    std::vector<double> params = normalized_params(grid);

    eval::ProbeReport rep =
        eval::linear_probe(flat, grid.entries.size(), net::kLatentDim, params, 4,
                           grid.train_indices, grid.test_indices);
    std::vector<std::string> names = family_param_names(grid.family);
    eval::write_probe_json(rep, names, stage_dir(cfg, kStageProbe) + "/probe.json");
    eval::write_scatter_csv(rep, names, stage_dir(cfg, kStageProbe) + "/scatter.csv");

    if (fs::exists(stage_dir(cfg, kStageSdf) + "/manifest.json")) {
        sdf::SdfSampleSet set = load_samples(cfg, 0);
        auto rows = eval::sampling_density_report(set, cfg.density_thresholds);
        std::string label =
            cfg.sampling_mode == sdf::SamplingMode::NearZero ? "near_zero" : "uniform_grid";
        eval::write_density_csv(rows, label, stage_dir(cfg, kStageProbe) + "/density.csv");
    }
    write_manifest(cfg, kStageProbe);
}

void cmd_recon(const PipelineConfig& cfg) {
    require_stage(cfg, kStageGen);
    require_stage(cfg, kStageTrain);
    DesignGrid grid = load_grid(cfg);
    if (cfg.recon_geometry >= grid.entries.size())
        throw InvalidParams("recon geometry index out of range");
    net::PretrainModel model = load_trained_model(cfg);
    fs::create_directories(stage_dir(cfg, kStageRecon));

    BrepGraph graph = load_graph(cfg, cfg.recon_geometry);
    TriMesh truth =
        read_obj(stage_dir(cfg, kStageGen) + "/" + geometry_stem(cfg.recon_geometry) + ".obj");

    auto t0 = std::chrono::steady_clock::now();
    TriMesh recon = eval::marching_cubes(model, graph, cfg.recon_resolution);
    double chamfer = eval::chamfer_distance(recon, truth, 30000, 1234);
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    std::string stem = stage_dir(cfg, kStageRecon) + "/" + geometry_stem(cfg.recon_geometry) +
                       "_res" + std::to_string(cfg.recon_resolution);
    write_obj(recon, stem + ".obj");
    json j = {{"resolution", cfg.recon_resolution},
              {"geometry", cfg.recon_geometry},
              {"triangles", recon.triangles.size()},
              {"chamfer", chamfer},
              {"seconds", secs}};
    std::ofstream out(stem + ".json");
    out << j.dump(1);
    write_manifest(cfg, kStageRecon);
}

void cmd_downstream(const PipelineConfig& cfg) {
    require_stage(cfg, kStageGen);
    DesignGrid grid = load_grid(cfg);
    fs::create_directories(stage_dir(cfg, kStageDownstream));

    bool needs_model = false, needs_graphs = false;
    for (auto s : cfg.strategies) {
        if (s == down::Strategy::LatentDirect || s == down::Strategy::Finetune)
            needs_model = true;
        if (s == down::Strategy::Finetune || s == down::Strategy::Scratch) needs_graphs = true;
    }

    down::DownstreamDataset data;
    data.family = grid.family;
    data.params = grid.entries;
    data.train_ids = grid.train_indices;
    data.test_ids = grid.test_indices;

    net::PretrainModel model;
    if (needs_model) {
        require_stage(cfg, kStageTrain);
        model = load_trained_model(cfg);
        data.latents = load_all_latents(cfg, model, grid);
    }
    std::vector<BrepGraph> graphs;
    if (needs_graphs) {
        graphs.resize(grid.entries.size());
        for (size_t i = 0; i < graphs.size(); ++i) graphs[i] = load_graph(cfg, uint32_t(i));
        for (const auto& g : graphs) data.graphs.push_back(&g);
    }
    if (cfg.task == down::TaskKind::DeformationField) {
        data.nodes.resize(grid.entries.size());
        double zmin = 1e300;
        for (size_t i = 0; i < grid.entries.size(); ++i) {
            TriMesh mesh =
                read_obj(stage_dir(cfg, kStageGen) + "/" + geometry_stem(uint32_t(i)) + ".obj");
            Rng rng(cfg.sampling_seed ^ (0x9e37 + i));
            data.nodes[i] = sdf::sample_surface(mesh, 2000, rng);
            for (const auto& p : data.nodes[i]) zmin = std::min(zmin, p.z);
        }
        data.z_min = zmin;
    }

    std::vector<down::FewshotRun> runs;
    for (auto strategy : cfg.strategies)
        for (size_t shots : cfg.shot_grid)
            for (uint64_t seed : cfg.downstream_seeds) {
                down::FewshotConfig fc = cfg.downstream;
                fc.strategy = strategy;
                fc.task = cfg.task;
                fc.shots = shots;
                fc.seed = seed;
                runs.push_back(down::fewshot_run(data, fc, needs_model ? &model : nullptr));
            }

    down::write_results_csv(runs, stage_dir(cfg, kStageDownstream) + "/results.csv");
    down::write_sweep_svg(runs, stage_dir(cfg, kStageDownstream) + "/sweep.svg");
    write_manifest(cfg, kStageDownstream);
}

void cmd_report(const PipelineConfig& cfg) {
    require_stage(cfg, kStageGen);
    std::string report = "# Run report\n\nconfig hash: " + config_hash(cfg) + "\n";
    std::vector<std::string> names = family_param_names(cfg.family);

    std::string probe_path = stage_dir(cfg, kStageProbe) + "/probe.json";
    if (fs::exists(probe_path)) {
        require_stage(cfg, kStageProbe);
        std::ifstream in(probe_path);
        json j;
        in >> j;
        report += "\n## Linear probing (R^2, normalized parameters)\n\n";
        report += "| parameter | train | test |\n|---|---|---|\n";
        for (size_t k = 0; k < names.size(); ++k) {
            auto fmt = [&](const json& v) {
                return v.is_null() ? std::string("n/a")
                                   : std::to_string(v.get<double>()).substr(0, 7);
            };
            report += "| " + names[k] + " | " + fmt(j["r2_train"][k]) + " | " +
                      fmt(j["r2_test"][k]) + " |\n";
        }
    }

    std::string density_path = stage_dir(cfg, kStageProbe) + "/density.csv";
    if (fs::exists(density_path)) {
        report += "\n## Near-surface sampling density\n\n```\n";
        std::ifstream in(density_path);
        std::string line;
        while (std::getline(in, line)) report += line + "\n";
        report += "```\n";
    }

    std::string ds_path = stage_dir(cfg, kStageDownstream) + "/results.csv";
    if (fs::exists(ds_path)) {
        require_stage(cfg, kStageDownstream);
        report += "\n## Few-shot downstream sweep\n\n```\n";
        std::ifstream in(ds_path);
        std::string line;
        while (std::getline(in, line)) report += line + "\n";
        report += "```\n";
    }

    std::ofstream out(cfg.out_dir + "/report.md");
    out << report;
}

}  // namespace pipe
}  // namespace finesdf
