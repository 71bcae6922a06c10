#pragma once

#include <string>
#include <vector>

#include "finesdf/brepnet.hpp"
#include "finesdf/geometry.hpp"

namespace finesdf {
namespace down {

enum class TaskKind : int { ReactionForce = 0, DeformationField = 1 };
enum class Strategy : int { Parametric = 0, LatentDirect = 1, Finetune = 2, Scratch = 3 };

std::string strategy_name(Strategy s);
std::string task_name(TaskKind t);
Strategy strategy_from_name(const std::string& s);

constexpr size_t kDefaultFrames = 50;

// Force amplitude: crash box thickness*2*(width+height); bottle
// rib_thickness*top_radius*(1 + 1/rib_pitch).
double force_amplitude(const ParamVector& p);

// F(tau) = A * (1 - e^{-6 tau}) * (1 + 0.25 sin(14 tau + phi)), tau on a
// uniform [0,1] grid of `frames` points; phi = pi*length (crash box) or
// pi*rib_spacing (bottle). Deterministic in p.
std::vector<double> proxy_reaction_force(const ParamVector& p, size_t frames = kDefaultFrames);

// u(x, tau) = tau * c(p) * (x_z - z_min) * dhat(x, p) with c(p) =
// 0.25*force_amplitude and dhat the normalized compressive direction
// (kx*x_x, kx*x_y, -1), kx = 0.4*(1 + 0.5*sin(phi)). Returns frames*n*3
// values, frame-major then node-major.
std::vector<double> proxy_displacement(const ParamVector& p, const std::vector<Vec3>& nodes,
                                       double z_min, size_t frames = kDefaultFrames);

struct LatentStats {
    std::vector<double> mean, stddev;  // stddev 0 marks a pass-through dim
};

LatentStats latent_stats(const std::vector<std::vector<double>>& latents,
                         const std::vector<uint32_t>& idx);
// Per-dimension z-score; zero-variance dims pass through unscaled.
std::vector<double> normalize_latents(const std::vector<double>& z, const LatentStats& stats);

// Dataset accessed only through the recording getters so tests can assert
// that no test geometry is touched while `training_phase` is set.
struct DownstreamDataset {
    Family family = Family::CrashBox;
    std::vector<ParamVector> params;
    std::vector<std::vector<double>> latents;   // needed for LatentDirect/Finetune
    std::vector<const BrepGraph*> graphs;       // needed for Finetune/Scratch
    std::vector<std::vector<Vec3>> nodes;       // DeformationField only
    double z_min = 0.0;                         // fixed-end plane for displacement
    std::vector<uint32_t> train_ids, test_ids;

    bool training_phase = false;
    struct Access {
        uint32_t geometry;
        bool during_training;
    };
    mutable std::vector<Access> access_log;

    const ParamVector& param(uint32_t i) const;
    const std::vector<double>& latent(uint32_t i) const;
    const BrepGraph& graph(uint32_t i) const;
    const std::vector<Vec3>& node_set(uint32_t i) const;
    bool test_touched_in_training() const;
};

struct FewshotConfig {
    Strategy strategy = Strategy::Parametric;
    TaskKind task = TaskKind::ReactionForce;
    size_t shots = 10;
    uint64_t seed = 0;
    size_t steps = 400;
    double learning_rate = 1e-3;
    double finetune_lr_factor = 0.01;
    size_t head_width = 256;
    size_t head_depth = 4;
    size_t frames = kDefaultFrames;
    size_t batch_geometries = 8;     // minibatch of geometries per step
    size_t rows_per_geometry = 128;  // sampled (frame, node) rows, deformation only
};

struct FewshotRun {
    Strategy strategy;
    TaskKind task;
    size_t shots = 0;
    uint64_t seed = 0;
    double test_mse = 0.0;
    double seconds = 0.0;
};

// Trains the shared downstream head (plus encoder for Finetune/Scratch) on
// the first `shots` train geometries and reports MSE on the full test
// split. `pretrained` is required for LatentDirect and Finetune; a copy is
// made before any update. Throws InsufficientShots if shots < 2.
FewshotRun fewshot_run(DownstreamDataset& data, const FewshotConfig& cfg,
                       const net::PretrainModel* pretrained);

void write_results_csv(const std::vector<FewshotRun>& runs, const std::string& path);
void write_sweep_svg(const std::vector<FewshotRun>& runs, const std::string& path);

}  // namespace down
}  // namespace finesdf
