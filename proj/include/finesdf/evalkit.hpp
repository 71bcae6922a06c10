#pragma once

#include <functional>
#include <string>
#include <vector>

#include "finesdf/brepnet.hpp"
#include "finesdf/sdf.hpp"

namespace finesdf {
namespace eval {

struct ProbeReport {
    size_t latent_dim = 0, n_params = 0;
    std::vector<double> weights;  // latent_dim x n_params, row-major
    std::vector<double> bias;     // n_params
    std::vector<double> r2_train, r2_test;  // per parameter, NaN when degenerate

    struct ScatterRow {
        size_t param;
        double truth, predicted;
        bool test;
    };
    std::vector<ScatterRow> scatter;
};

// 1 - SS_res / SS_tot. Throws DegenerateTargets if truth is constant
// or fewer than two points are given.
double r_squared(const std::vector<double>& pred, const std::vector<double>& truth);

// Closed-form least squares from latents (n x d, row-major) to normalized
// parameters (n x p), fit on the train rows only. Ridge lambda = 1e-6 is
// applied whenever n_train < d + 1. A parameter constant across a split
// gets NaN for that split's R^2.
ProbeReport linear_probe(const std::vector<double>& latents, size_t n, size_t d,
                         const std::vector<double>& params, size_t p,
                         const std::vector<uint32_t>& train_idx,
                         const std::vector<uint32_t>& test_idx);

void write_probe_json(const ProbeReport& report, const std::vector<std::string>& param_names,
                      const std::string& path);
void write_scatter_csv(const ProbeReport& report, const std::vector<std::string>& param_names,
                       const std::string& path);

// Lattice coordinates for a resolution^3 grid over [-margin, margin]^3,
// x fastest, z slowest.
std::vector<Vec3> lattice_points(int resolution, double box_margin = 1.1);

// Standard 256-case marching cubes with linear edge interpolation over a
// precomputed lattice of field values (order as lattice_points). Throws
// EmptySurface when the zero level is never crossed.
TriMesh marching_cubes_grid(const std::vector<double>& values, int resolution,
                            double box_margin = 1.1);

// Convenience: decode the model on the lattice, then triangulate.
TriMesh marching_cubes(net::PretrainModel& model, const BrepGraph& graph, int resolution,
                       double box_margin = 1.1);

// Symmetric mean point-to-surface distance over n_samples area-uniform
// draws per mesh; accepts open meshes.
double chamfer_distance(const TriMesh& a, const TriMesh& b, size_t n_samples, uint64_t seed);

struct ReconReport {
    int resolution = 0;
    TriMesh mesh;
    double chamfer = -1.0;  // negative when no ground truth supplied
    double seconds = 0.0;
};

struct DensityRow {
    double threshold;
    double fraction;
};

// For each threshold tau, the fraction of stored samples with |V| < tau.
std::vector<DensityRow> sampling_density_report(const sdf::SdfSampleSet& set,
                                                const std::vector<double>& thresholds);

void write_density_csv(const std::vector<DensityRow>& rows, const std::string& mode_label,
                       const std::string& path);

// Marching-cubes case tables (256 entries; tri table rows -1 terminated).
extern const int kMcEdgeTable[256];
extern const int8_t kMcTriTable[256][16];

}  // namespace eval
}  // namespace finesdf
