#include <cstdio>
#include <cstdlib>
#include <string>

#include <CLI11.hpp>

#include "finesdf/pipeline.hpp"

using namespace finesdf;

int main(int argc, char** argv) {
    CLI::App app{"fine-scale geometric pretraining pipeline"};
    app.require_subcommand(1);

    std::string config_path, out_override, resume_from;
    int64_t seed_override = -1;
    int threads = 0;

    auto add_common = [&](CLI::App* sub, bool needs_config = true) {
        auto* opt = sub->add_option("--config", config_path, "pipeline config JSON");
        if (needs_config) opt->required();
        sub->add_option("--seed", seed_override, "override the training seed");
        sub->add_option("--out", out_override, "override the output directory");
        sub->add_option("--threads", threads, "worker threads for per-geometry stages");
    };

    auto* gen = app.add_subcommand("gen", "generate the design grid geometries");
    auto* sdfc = app.add_subcommand("sdf", "precompute SDF sample sets");
    auto* pre = app.add_subcommand("pretrain", "run self-supervised pretraining");
    pre->add_option("--resume", resume_from, "train-state checkpoint to resume from");
    auto* probe = app.add_subcommand("probe", "linear-probe the latent space");
    auto* recon = app.add_subcommand("recon", "marching-cubes reconstruction");
    auto* downs = app.add_subcommand("downstream", "few-shot downstream sweep");
    auto* report = app.add_subcommand("report", "consolidated run report");
    for (auto* sub : {gen, sdfc, pre, probe, recon, downs, report}) add_common(sub);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        pipe::PipelineConfig cfg = pipe::read_pipeline_config(config_path);
        if (seed_override >= 0) cfg.training.seed = uint64_t(seed_override);
        if (!out_override.empty()) cfg.out_dir = out_override;
        if (threads <= 0) {
            const char* env = std::getenv("FINESDF_THREADS");
            threads = env ? std::atoi(env) : 1;
        }
        cfg.threads = threads > 0 ? threads : 1;

        if (gen->parsed()) pipe::cmd_gen(cfg);
        if (sdfc->parsed()) pipe::cmd_sdf(cfg);
        if (pre->parsed()) pipe::cmd_pretrain(cfg, resume_from);
        if (probe->parsed()) pipe::cmd_probe(cfg);
        if (recon->parsed()) pipe::cmd_recon(cfg);
        if (downs->parsed()) pipe::cmd_downstream(cfg);
        if (report->parsed()) pipe::cmd_report(cfg);
    } catch (const NonFiniteLoss& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 3;
    } catch (const InvalidParams& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    }
    return 0;
}
