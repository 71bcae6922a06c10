#pragma once

#include <string>
#include <vector>

#include "finesdf/downstream.hpp"
#include "finesdf/evalkit.hpp"
#include "finesdf/geomgen.hpp"
#include "finesdf/pretrain.hpp"

namespace finesdf {
namespace pipe {

struct PipelineConfig {
    // design grid
    Family family = Family::CrashBox;
    int levels = 3;
    std::array<std::array<double, 2>, 4> ranges{};  // zeroed = family defaults
    double test_fraction = 1.0 / 9.0;
    uint64_t grid_seed = 7;

    // sdf sampling
    sdf::SamplingMode sampling_mode = sdf::SamplingMode::NearZero;
    size_t samples_per_geometry = 50000;
    int grid_resolution = 64;  // UniformGrid mode only
    uint64_t sampling_seed = 11;

    // model
    net::EncoderConfig encoder = net::EncoderConfig::desk();
    net::DecoderConfig decoder = net::DecoderConfig::desk_crashbox();
    uint64_t init_seed = 3;

    pretrain::TrainingConfig training;

    // evaluation
    int recon_resolution = 64;
    uint32_t recon_geometry = 0;
    std::vector<double> density_thresholds = {0.01, 0.02, 0.05, 0.1};

    // downstream sweep
    down::TaskKind task = down::TaskKind::ReactionForce;
    std::vector<down::Strategy> strategies = {
        down::Strategy::Parametric, down::Strategy::LatentDirect, down::Strategy::Scratch};
    std::vector<size_t> shot_grid = {10, 20};
    std::vector<uint64_t> downstream_seeds = {0, 1, 2};
    down::FewshotConfig downstream;  // strategy/shots/seed fields overridden per run

    std::string out_dir = "run";
    int threads = 1;

    void resolve_defaults();  // fills zeroed ranges from the family defaults
};

PipelineConfig read_pipeline_config(const std::string& path);
void write_pipeline_config(const PipelineConfig& cfg, const std::string& path);

// FNV-1a over the canonical serialized form; stage manifests embed this and
// cmd_report refuses mismatched stages.
std::string config_hash(const PipelineConfig& cfg);

// Stage commands. All throw: InvalidParams/FormatError on bad input,
// MissingArtifact when an upstream product is absent, NonFiniteLoss from
// training. Artifacts land under cfg.out_dir/<stage>/.
void cmd_gen(const PipelineConfig& cfg);
void cmd_sdf(const PipelineConfig& cfg);
void cmd_pretrain(const PipelineConfig& cfg, const std::string& resume_from = "");
void cmd_probe(const PipelineConfig& cfg);
void cmd_recon(const PipelineConfig& cfg);
void cmd_downstream(const PipelineConfig& cfg);
void cmd_report(const PipelineConfig& cfg);

// Helpers shared with tests.
std::string geometry_stem(uint32_t index);
std::vector<double> normalized_params(const DesignGrid& grid);  // n x 4 min-max in [0,1]
net::PretrainModel load_trained_model(const PipelineConfig& cfg);
std::vector<std::vector<double>> load_all_latents(const PipelineConfig& cfg,
                                                  net::PretrainModel& model,
                                                  const DesignGrid& grid);

}  // namespace pipe
}  // namespace finesdf
