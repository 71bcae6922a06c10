#pragma once

#include <string>
#include <vector>

#include "finesdf/brepnet.hpp"
#include "finesdf/sdf.hpp"

namespace finesdf {
namespace pretrain {

struct TrainingConfig {
    size_t batch_geometries = 4;   // B
    int knn = 8;                   // K
    size_t coords_per_iter = 1024; // N_c
    size_t random_coords = 102;    // N_r, ~10% of N_c
    size_t iterations = 5000;
    double learning_rate = 1e-4;
    // Cosine decay from learning_rate to learning_rate * final_lr_fraction
    // over the full run; 1.0 keeps the rate constant.
    double final_lr_fraction = 1.0;
    uint64_t seed = 0;
    bool use_batch_attention = false;
    bool interpolation_enabled = true;
    size_t checkpoint_every = 0;   // 0 = final checkpoint only
    double box_margin = 1.1;

    void validate() const;
};

// Per-coordinate origin in a batch plan.
enum class CoordOrigin : uint8_t { PrecomputedOwn = 0, KnnCross = 1, KnnRandom = 2 };

struct BatchPlan {
    std::vector<uint32_t> geometry_ids;  // B entries

    // Interpolation mode: shared coordinates, B target values each.
    // owner[n] = index into geometry_ids whose precomputed set supplied
    // coordinate n, or -1 for a uniform-random coordinate.
    std::vector<Vec3> coords;
    std::vector<int32_t> owner;
    std::vector<std::vector<double>> targets;  // B rows of |coords| values

    // Crash-box mode (interpolation disabled): per-geometry independent
    // coordinates with owner-exact targets only.
    bool shared = true;
    std::vector<std::vector<Vec3>> own_coords;
    std::vector<std::vector<double>> own_targets;

    CoordOrigin origin(size_t b, size_t n) const {
        if (owner[n] < 0) return CoordOrigin::KnnRandom;
        return size_t(owner[n]) == b ? CoordOrigin::PrecomputedOwn : CoordOrigin::KnnCross;
    }
};

// Batch-adaptive attention weights: w = 1 + ln((bd + mu_bd) / mu_bd) with
// mu(x) the batch-mean value, bd = |V - mu|, mu_bd = mean(bd) floored at eps.
struct WeightField {
    size_t batch = 0, count = 0;
    std::vector<double> mu;      // count
    std::vector<double> bd;      // batch * count
    std::vector<double> mu_bd;   // count
    std::vector<double> w;       // batch * count
};

WeightField batch_weights(const std::vector<double>& values, size_t batch, size_t count,
                          double eps = 1e-8);

struct PretrainDataset {
    std::vector<const BrepGraph*> graphs;
    std::vector<sdf::SdfSampleSet*> sample_sets;  // spatial indices built on demand
};

BatchPlan assemble_batch(PretrainDataset& data, const std::vector<uint32_t>& geometry_ids,
                         const TrainingConfig& cfg, Rng& rng);

struct StepStats {
    double loss = 0.0;
    double mean_weight = 1.0;
    double max_weight = 1.0;
};

// One optimization step; returns the pre-step loss.
StepStats train_step(net::PretrainModel& model, const PretrainDataset& data,
                     const BatchPlan& plan, const TrainingConfig& cfg, tk::AdamState& opt);

struct CurveRow {
    size_t step = 0;
    double raw_loss = 0.0;
    double ema_loss = 0.0;
    double mean_weight = 1.0;
    double max_weight = 1.0;
};

struct PretrainResult {
    std::vector<CurveRow> curve;
};

// Full training state for bit-identical resume: model weights, optimizer
// moments, RNG state, and the in-flight epoch order.
void save_train_state(const std::string& path, net::PretrainModel& model,
                      const tk::AdamState& opt, const Rng& rng, size_t step,
                      const std::vector<uint32_t>& epoch_order, size_t epoch_pos);

// Runs cfg.iterations steps with per-epoch shuffling without replacement.
// checkpoint_dir may be empty (no checkpoints written). resume_from, when
// nonempty, restores a saved train state and continues from its step.
PretrainResult run_pretrain(PretrainDataset& data, net::PretrainModel& model,
                            const TrainingConfig& cfg, const std::string& checkpoint_dir,
                            const std::string& resume_from = "");

void write_loss_csv(const std::vector<CurveRow>& curve, const std::string& path);

void write_training_config_json(const TrainingConfig& cfg, const std::string& path);
TrainingConfig read_training_config_json(const std::string& path);

}  // namespace pretrain
}  // namespace finesdf
