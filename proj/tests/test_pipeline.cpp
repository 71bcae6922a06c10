#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "finesdf/pipeline.hpp"

using namespace finesdf;
using namespace finesdf::pipe;
namespace fs = std::filesystem;

namespace {

PipelineConfig mini_config(const std::string& out_dir) {
    PipelineConfig cfg;
    cfg.family = Family::CrashBox;
    cfg.levels = 2;
    cfg.test_fraction = 0.25;
    cfg.samples_per_geometry = 1500;
    cfg.encoder = net::EncoderConfig{4, 8, 4, 8, 16, 2};
    cfg.decoder = net::DecoderConfig{32, 3, net::LocalityMode::RawXYZ};
    cfg.training.batch_geometries = 4;
    cfg.training.coords_per_iter = 128;
    cfg.training.random_coords = 12;
    cfg.training.iterations = 5;
    cfg.recon_resolution = 24;
    cfg.strategies = {down::Strategy::Parametric};
    cfg.shot_grid = {4};
    cfg.downstream_seeds = {0};
    cfg.downstream.steps = 5;
    cfg.downstream.head_width = 16;
    cfg.downstream.head_depth = 2;
    cfg.out_dir = out_dir;
    cfg.resolve_defaults();
    return cfg;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), {});
}

}  // namespace

TEST_CASE("pipeline config json round trip preserves the hash") {
    PipelineConfig cfg = mini_config("roundtrip_out");
    cfg.training.use_batch_attention = true;
    cfg.decoder.mode = net::LocalityMode::Fourier;
    cfg.shot_grid = {4, 8};
    auto path = fs::temp_directory_path() / "finesdf_pipe_cfg.json";
    write_pipeline_config(cfg, path.string());
    PipelineConfig back = read_pipeline_config(path.string());
    CHECK(config_hash(back) == config_hash(cfg));
    CHECK(back.levels == cfg.levels);
    CHECK(back.training.use_batch_attention);
    CHECK(back.decoder.mode == net::LocalityMode::Fourier);
    CHECK(back.shot_grid == cfg.shot_grid);
    fs::remove(path);
}

TEST_CASE("config hash is stable and sensitive") {
    PipelineConfig a = mini_config("x");
    std::string h = config_hash(a);
    CHECK(h.size() == 16);
    CHECK(config_hash(a) == h);
    PipelineConfig b = a;
    b.training.iterations += 1;
    CHECK(config_hash(b) != h);
    PipelineConfig c = a;
    c.sampling_seed += 1;
    CHECK(config_hash(c) != h);
    // out_dir is where artifacts land, not what they contain
    PipelineConfig d = a;
    d.out_dir = "elsewhere";
    CHECK(config_hash(d) == h);
}

TEST_CASE("geometry stem formatting") {
    CHECK(geometry_stem(0) == "geom_0000");
    CHECK(geometry_stem(37) == "geom_0037");
    CHECK(geometry_stem(1295) == "geom_1295");
}

TEST_CASE("full mini pipeline produces every artifact") {
    auto dir = fs::temp_directory_path() / "finesdf_pipe_mini";
    fs::remove_all(dir);
    PipelineConfig cfg = mini_config(dir.string());

    cmd_gen(cfg);
    CHECK(fs::exists(dir / "gen" / "manifest.json"));
    CHECK(fs::exists(dir / "gen" / "grid.json"));
    size_t objs = 0;
    for (auto& e : fs::directory_iterator(dir / "gen"))
        if (e.path().extension() == ".obj") ++objs;
    CHECK(objs == 16);  // levels=2 -> 2^4 geometries
    CHECK(fs::exists(dir / "gen" / "geom_0000.brep.json"));

    cmd_sdf(cfg);
    size_t sets = 0;
    for (auto& e : fs::directory_iterator(dir / "sdf"))
        if (e.path().extension() == ".nzs") ++sets;
    CHECK(sets == 16);

    cmd_pretrain(cfg);
    CHECK(fs::exists(dir / "train" / "model.tkpt"));
    CHECK(fs::exists(dir / "train" / "loss.csv"));
    std::string loss_csv = slurp(dir / "train" / "loss.csv");
    CHECK(loss_csv.rfind("step,raw_loss,ema_loss,mean_weight,max_weight", 0) == 0);

    cmd_probe(cfg);
    CHECK(fs::exists(dir / "probe" / "probe.json"));
    CHECK(fs::exists(dir / "probe" / "scatter.csv"));
    CHECK(fs::exists(dir / "probe" / "density.csv"));

    cmd_downstream(cfg);
    CHECK(fs::exists(dir / "downstream" / "results.csv"));
    CHECK(fs::exists(dir / "downstream" / "sweep.svg"));

    cmd_report(cfg);
    CHECK(fs::exists(dir / "report.md"));
    std::string report = slurp(dir / "report.md");
    CHECK(report.find("R^2") != std::string::npos);

    fs::remove_all(dir);
}

TEST_CASE("gen rerun is byte-identical") {
    auto dir = fs::temp_directory_path() / "finesdf_pipe_repro";
    fs::remove_all(dir);
    PipelineConfig cfg = mini_config(dir.string());
    cmd_gen(cfg);
    std::string grid1 = slurp(dir / "gen" / "grid.json");
    std::string obj1 = slurp(dir / "gen" / "geom_0003.obj");
    cmd_gen(cfg);
    CHECK(slurp(dir / "gen" / "grid.json") == grid1);
    CHECK(slurp(dir / "gen" / "geom_0003.obj") == obj1);

    cmd_sdf(cfg);
    std::string nzs1 = slurp(dir / "sdf" / "geom_0003.nzs");
    cmd_sdf(cfg);
    CHECK(slurp(dir / "sdf" / "geom_0003.nzs") == nzs1);
    fs::remove_all(dir);
}

TEST_CASE("stages refuse missing or mismatched upstream artifacts") {
    auto dir = fs::temp_directory_path() / "finesdf_pipe_guard";
    fs::remove_all(dir);
    PipelineConfig cfg = mini_config(dir.string());
    CHECK_THROWS_AS(cmd_sdf(cfg), MissingArtifact);

    cmd_gen(cfg);
    cmd_sdf(cfg);

    // tamper with the stage hash: downstream stages must refuse it
    PipelineConfig altered = cfg;
    altered.samples_per_geometry += 1;
    CHECK_THROWS_AS(cmd_pretrain(altered), FormatError);
    fs::remove_all(dir);
}
