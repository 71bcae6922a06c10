#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "finesdf/core.hpp"

namespace finesdf {

enum class Family : int { CrashBox = 0, Bottle = 1 };

std::string family_name(Family f);
Family family_from_name(const std::string& s);

// The four hidden design parameters of one geometry.
//   CrashBox: (height, width, length, thickness)
//   Bottle:   (rib_thickness, top_radius, rib_pitch, rib_spacing)
struct ParamVector {
    Family family = Family::CrashBox;
    std::array<double, 4> values{};

    void validate() const;  // throws InvalidParams
};

struct TriMesh {
    std::vector<Vec3> vertices;
    std::vector<std::array<uint32_t, 3>> triangles;

    Aabb bounds() const;
    double signed_volume() const;   // divergence theorem
    double surface_area() const;
    // Watertight + consistently oriented: every undirected edge appears in
    // exactly two triangles, once in each direction.
    bool is_watertight() const;
    bool has_degenerate_triangles(double rel_area_eps = 1e-12) const;
};

// One face of the parameterized B-Rep graph: a fixed 10x10 grid of samples,
// each carrying position (3) and unit normal (3).
struct FacePatch {
    static constexpr int kGrid = 10;
    // grid[i][j] = {px, py, pz, nx, ny, nz}, row-major over (u, v).
    std::array<std::array<std::array<double, 6>, kGrid>, kGrid> grid{};
};

// One edge curve: 10 samples of position (3) and unit tangent (3).
struct EdgeCurve {
    static constexpr int kSamples = 10;
    std::array<std::array<double, 6>, kSamples> samples{};
};

struct BrepGraph {
    std::vector<FacePatch> faces;
    std::vector<EdgeCurve> edges;
    // (face_i, face_j, edge_k): edge k borders faces i and j.
    std::vector<std::array<uint32_t, 3>> adjacency;

    void validate() const;  // throws GraphError on inconsistency
};

// Uniform scale + translation: p' = p * scale + offset.
struct Transform {
    double scale = 1.0;
    Vec3 offset{0, 0, 0};

    Vec3 apply(const Vec3& p) const { return p * scale + offset; }
    Transform inverse() const { return {1.0 / scale, offset * (-1.0 / scale)}; }
};

struct DesignGrid {
    Family family = Family::CrashBox;
    int levels_per_param = 0;
    std::array<std::array<double, 2>, 4> ranges{};
    std::vector<ParamVector> entries;
    std::vector<uint32_t> train_indices;
    std::vector<uint32_t> test_indices;
};

// OBJ export/import (ASCII v/f records, CCW front faces).
void write_obj(const TriMesh& mesh, const std::string& path);
TriMesh read_obj(const std::string& path);

}  // namespace finesdf
