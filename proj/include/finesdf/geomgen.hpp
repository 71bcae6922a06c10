#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "finesdf/geometry.hpp"

namespace finesdf {
namespace geomgen {

// Default design-parameter ranges (model units).
std::array<std::array<double, 2>, 4> default_ranges(Family family);

// Analytic union bounding box over the whole design grid of a family,
// used for family-wide registration before normalization.
Aabb family_bounds(Family family, const std::array<std::array<double, 2>, 4>& ranges);

// Solid rectangular tube: outer box (width x height x length) minus a
// coaxial through-hole, centered at the origin, length along z.
std::pair<TriMesh, BrepGraph> gen_crashbox(const ParamVector& p);

// Analytic profile of the bottle solid of revolution about z.
struct BottleProfile {
    double height = 0.0;
    std::function<double(double)> radius;  // r(z)
    std::function<double(double)> slope;   // dr/dz
    std::vector<double> breakpoints;       // piece boundaries, ascending, includes 0 and height
    std::vector<int> min_rings;            // axial rings per piece
};

BottleProfile make_bottle_profile(const ParamVector& p);

// Watertight solid of revolution: fixed ribbed base, shoulder blend, and a
// parameter-controlled ribbed top section. rib_thickness == 0 is accepted
// as the degenerate smooth limit.
std::pair<TriMesh, BrepGraph> gen_bottle(const ParamVector& p);

std::pair<TriMesh, BrepGraph> gen_geometry(const ParamVector& p);

DesignGrid sample_design_grid(Family family, int levels,
                              const std::array<std::array<double, 2>, 4>& ranges,
                              double test_fraction, uint64_t seed);

// Uniform scale + translation mapping family_box into [-1,1]^3; applied
// in place to mesh and graph (normals/tangents re-normalized).
Transform normalize_geometry(TriMesh& mesh, BrepGraph& graph, const Aabb& family_box);

void apply_transform(TriMesh& mesh, const Transform& t);
void apply_transform(BrepGraph& graph, const Transform& t);

// JSON (de)serialization; schemas: faces[][10][10][6], edges[][10][6],
// adjacency[][3].
void write_brep_json(const BrepGraph& graph, const std::string& path);
BrepGraph read_brep_json(const std::string& path);
void write_grid_json(const DesignGrid& grid, const std::string& path);
DesignGrid read_grid_json(const std::string& path);

}  // namespace geomgen
}  // namespace finesdf
