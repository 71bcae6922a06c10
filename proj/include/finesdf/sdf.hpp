#pragma once

#include <memory>
#include <vector>

#include "finesdf/geometry.hpp"

namespace finesdf {
namespace sdf {

// Exact signed-distance queries against a watertight, consistently
// oriented triangle mesh. Sign comes from the angle-weighted
// pseudo-normal of the closest surface feature (face / edge / vertex).
class DistanceIndex {
public:
    // throws NonWatertight if the edge-sharing check fails; pass
    // require_sign = false for unsigned-only queries on open meshes
    // (e.g. marching-cubes output) — signed_distance then throws.
    explicit DistanceIndex(const TriMesh& mesh, bool require_sign = true);

    double signed_distance(const Vec3& p) const;
    double unsigned_distance(const Vec3& p) const;
    Vec3 closest_point(const Vec3& p) const;

    // Brute-force all-triangle scan, the test oracle for the BVH path.
    double unsigned_distance_brute(const Vec3& p) const;

    // Parity of ray-surface crossings from p in a fixed set of directions;
    // true = inside. Test cross-check for the pseudo-normal sign.
    bool inside_by_ray_parity(const Vec3& p) const;

    const TriMesh& mesh() const { return mesh_; }

private:
    struct BvhNode {
        Aabb box;
        int32_t left = -1, right = -1;   // children, or -1 for leaf
        uint32_t first = 0, count = 0;   // triangle range for leaves
    };

    void build(uint32_t node, uint32_t first, uint32_t count);
    void query(uint32_t node, const Vec3& p, double& best_d2, uint32_t& best_tri,
               Vec3& best_point) const;

    TriMesh mesh_;
    bool sign_ok_ = true;
    std::vector<BvhNode> nodes_;
    std::vector<uint32_t> tri_order_;
    std::vector<Vec3> face_normals_;                  // unnormalized (area-weighted)
    std::vector<Vec3> vertex_pseudonormals_;          // angle-weighted
    std::vector<std::pair<uint64_t, Vec3>> edge_pseudonormals_;  // sorted by packed edge key
};

// Closest point on triangle (a, b, c) to p.
Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c);

enum class SamplingMode : uint16_t { NearZero = 0, UniformGrid = 1 };

struct NearZeroConfig {
    double frac_sigma1 = 0.475;   // tight band around the surface
    double frac_sigma2 = 0.475;   // wide band
    double sigma1_frac = 0.005;   // of bounding box diagonal
    double sigma2_frac = 0.05;
    double box_margin = 1.1;      // uniform tail drawn in [-margin, margin]^3
};

struct SdfSampleSet {
    std::string geometry_id;
    SamplingMode mode = SamplingMode::NearZero;
    uint64_t seed = 0;
    std::vector<float> coords;  // 3 per sample
    std::vector<float> values;

    size_t size() const { return values.size(); }
    Vec3 coord(size_t i) const { return {coords[3 * i], coords[3 * i + 1], coords[3 * i + 2]}; }

    // Inverse-distance-squared weighted mean of the k nearest stored values;
    // exact stored value when the query coincides with a stored coordinate.
    double knn_interpolate(const Vec3& query, int k) const;

    void build_spatial_index();  // k-d tree over coords; required for knn
    bool has_spatial_index() const { return !kd_nodes_.empty(); }

    // k-d tree internals, rebuilt on demand and not serialized
    struct KdNode { uint32_t point = 0; int32_t left = -1, right = -1; };
    std::vector<KdNode> kd_nodes_;

private:
    void knn_search(int32_t node, int axis, const Vec3& q, int k,
                    std::vector<std::pair<double, uint32_t>>& heap) const;
    int32_t kd_build(uint32_t* idx, size_t n, int axis);
};

// 47.5% / 47.5% / 5% mix of tight-band, wide-band, and uniform samples,
// surface points drawn area-uniformly; deterministic given seed.
SdfSampleSet precompute_near_zero(const DistanceIndex& index, size_t n_samples, uint64_t seed,
                                  const NearZeroConfig& cfg = {});

// Regular resolution^3 lattice over [-1.1, 1.1]^3 with exact SDF values.
SdfSampleSet precompute_uniform_grid(const DistanceIndex& index, int resolution,
                                     double box_margin = 1.1);

// Binary format: magic "NZS1", version u16, mode u16, count u64, then
// count little-endian f32 quadruples (x, y, z, d). JSON sidecar at
// path + ".json" carries geometry_id and seed.
void write_sample_set(const SdfSampleSet& set, const std::string& path);
SdfSampleSet read_sample_set(const std::string& path);

// Area-uniform surface samples (used by the near-zero sampler and Chamfer).
std::vector<Vec3> sample_surface(const TriMesh& mesh, size_t n, Rng& rng);

}  // namespace sdf
}  // namespace finesdf
