#include "finesdf/geomgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include <json.hpp>

namespace finesdf {
namespace geomgen {

using json = nlohmann::json;

namespace {

// Fixed bottle construction constants (model units). The lower half and
// shoulder placement are identical across all bottle geometries; design
// parameters only affect the upper ribbed section.
constexpr double kBottleHeight = 1.0;
constexpr double kBaseRadius = 0.30;
constexpr double kLowerTop = 0.48;     // top of fixed ribbed base
constexpr double kShoulderTop = 0.60;  // top of the shoulder blend
constexpr double kLowerGrooveZ0 = 0.06;
constexpr double kLowerGroovePitch = 0.06;
constexpr double kLowerGrooveWidth = 0.03;
constexpr double kLowerGrooveDepth = 0.012;
constexpr int kLowerGrooveCount = 6;
constexpr double kUpperGrooveZ0 = 0.62;
constexpr double kUpperGrooveZmax = 0.98;
constexpr int kAngularSegments = 64;
constexpr double kMinSegmentLength = 0.004;

// Circular-arc groove: depth profile y(s) over s in [0, w] with
// y(0)=y(w)=0 and max depth d at s=w/2.
struct ArcGroove {
    double w = 0.0, d = 0.0, rc = 0.0;  // chord width, depth, arc radius
    ArcGroove(double width, double depth) : w(width), d(depth) {
        rc = d > 0.0 ? (w * w / 4.0 + d * d) / (2.0 * d) : 0.0;
    }
    double depth_at(double s) const {
        if (d <= 0.0 || s <= 0.0 || s >= w) return 0.0;
        double u = s - w / 2.0;
        return std::sqrt(rc * rc - u * u) - (rc - d);
    }
    double slope_at(double s) const {
        if (d <= 0.0 || s <= 0.0 || s >= w) return 0.0;
        double u = s - w / 2.0;
        return -u / std::sqrt(rc * rc - u * u);
    }
};

struct ProfilePiece {
    double z0 = 0.0, z1 = 0.0;
    int min_rings = 1;
    // radius and slope relative to the piece-local coordinate
    std::function<double(double)> r;
    std::function<double(double)> drdz;
};

// ---------------------------------------------------------------------
// Quad-face machinery shared by both generators. A QuadFace is a bilinear
// patch given by 4 corners (counter-clockwise seen from outside); edge
// matching between faces is done on quantized corner-pair keys.
// ---------------------------------------------------------------------

struct QuadFace {
    std::array<Vec3, 4> corners;
};

int64_t quantize(double v) { return int64_t(std::llround(v * 1e9)); }

std::array<int64_t, 3> qkey(const Vec3& p) {
    return {quantize(p.x), quantize(p.y), quantize(p.z)};
}

BrepGraph graph_from_quads(const std::vector<QuadFace>& quads) {
    BrepGraph g;
    constexpr int N = FacePatch::kGrid;
    for (const auto& q : quads) {
        FacePatch f;
        Vec3 n = (q.corners[1] - q.corners[0]).cross(q.corners[3] - q.corners[0]).normalized();
        for (int i = 0; i < N; ++i) {
            double u = double(i) / (N - 1);
            for (int j = 0; j < N; ++j) {
                double v = double(j) / (N - 1);
                Vec3 p = q.corners[0] * ((1 - u) * (1 - v)) + q.corners[1] * (u * (1 - v)) +
                         q.corners[2] * (u * v) + q.corners[3] * ((1 - u) * v);
                f.grid[i][j] = {p.x, p.y, p.z, n.x, n.y, n.z};
            }
        }
        g.faces.push_back(f);
    }
    // shared boundary edges
    using Key = std::pair<std::array<int64_t, 3>, std::array<int64_t, 3>>;
    std::map<Key, std::vector<std::pair<uint32_t, std::pair<Vec3, Vec3>>>> shared;
    for (uint32_t fi = 0; fi < quads.size(); ++fi) {
        const auto& c = quads[fi].corners;
        for (int k = 0; k < 4; ++k) {
            Vec3 a = c[k], b = c[(k + 1) % 4];
            auto ka = qkey(a), kb = qkey(b);
            Key key = ka < kb ? Key{ka, kb} : Key{kb, ka};
            shared[key].push_back({fi, {a, b}});
        }
    }
    for (const auto& [key, users] : shared) {
        if (users.size() != 2)
            throw GraphError("quad boundary edge not shared by exactly 2 faces");
        EdgeCurve e;
        Vec3 a = users[0].second.first, b = users[0].second.second;
        Vec3 t = (b - a).normalized();
        for (int s = 0; s < EdgeCurve::kSamples; ++s) {
            double u = double(s) / (EdgeCurve::kSamples - 1);
            Vec3 p = a * (1 - u) + b * u;
            e.samples[s] = {p.x, p.y, p.z, t.x, t.y, t.z};
        }
        uint32_t ei = uint32_t(g.edges.size());
        g.edges.push_back(e);
        g.adjacency.push_back({users[0].first, users[1].first, ei});
    }
    return g;
}

void add_quad(TriMesh& mesh, std::map<std::array<int64_t, 3>, uint32_t>& vmap,
              const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
    auto idx = [&](const Vec3& p) {
        auto k = qkey(p);
        auto it = vmap.find(k);
        if (it != vmap.end()) return it->second;
        uint32_t i = uint32_t(mesh.vertices.size());
        mesh.vertices.push_back(p);
        vmap[k] = i;
        return i;
    };
    uint32_t ia = idx(a), ib = idx(b), ic = idx(c), id = idx(d);
    mesh.triangles.push_back({ia, ib, ic});
    mesh.triangles.push_back({ia, ic, id});
}

}  // namespace

std::array<std::array<double, 2>, 4> default_ranges(Family family) {
    if (family == Family::CrashBox)
        return {{{0.6, 1.2}, {0.6, 1.2}, {1.5, 3.0}, {0.02, 0.12}}};
    return {{{0.01, 0.05}, {0.15, 0.35}, {0.08, 0.16}, {0.02, 0.06}}};
}

Aabb family_bounds(Family family, const std::array<std::array<double, 2>, 4>& ranges) {
    Aabb b;
    if (family == Family::CrashBox) {
        double h = ranges[0][1], w = ranges[1][1], l = ranges[2][1];
        b.expand({-w / 2, -h / 2, -l / 2});
        b.expand({w / 2, h / 2, l / 2});
    } else {
        double rmax = std::max(kBaseRadius, ranges[1][1]);
        b.expand({-rmax, -rmax, 0.0});
        b.expand({rmax, rmax, kBottleHeight});
    }
    return b;
}

std::pair<TriMesh, BrepGraph> gen_crashbox(const ParamVector& p) {
    if (p.family != Family::CrashBox) throw InvalidParams("expected CrashBox params");
    p.validate();
    double h = p.values[0], w = p.values[1], l = p.values[2], t = p.values[3];

    double wo = w / 2, ho = h / 2, wi = w / 2 - t, hi = h / 2 - t, zl = l / 2;
    // corner rings, counter-clockwise seen from +z
    std::array<Vec3, 4> O0 = {{{-wo, -ho, -zl}, {wo, -ho, -zl}, {wo, ho, -zl}, {-wo, ho, -zl}}};
    std::array<Vec3, 4> I0 = {{{-wi, -hi, -zl}, {wi, -hi, -zl}, {wi, hi, -zl}, {-wi, hi, -zl}}};
    std::array<Vec3, 4> O1 = O0, I1 = I0;
    for (auto& v : O1) v.z = zl;
    for (auto& v : I1) v.z = zl;

    std::vector<QuadFace> quads;
    for (int k = 0; k < 4; ++k) {
        int k2 = (k + 1) % 4;
        quads.push_back({{O0[k], O0[k2], O1[k2], O1[k]}});  // outer wall, outward
        quads.push_back({{I0[k], I1[k], I1[k2], I0[k2]}});  // inner wall, toward hole
        quads.push_back({{O1[k], O1[k2], I1[k2], I1[k]}});  // +z annulus quadrant
        quads.push_back({{O0[k], I0[k], I0[k2], O0[k2]}});  // -z annulus quadrant
    }

    TriMesh mesh;
    std::map<std::array<int64_t, 3>, uint32_t> vmap;
    for (const auto& q : quads)
        add_quad(mesh, vmap, q.corners[0], q.corners[1], q.corners[2], q.corners[3]);

    BrepGraph graph = graph_from_quads(quads);
    return {std::move(mesh), std::move(graph)};
}

BottleProfile make_bottle_profile(const ParamVector& p) {
    if (p.family != Family::Bottle) throw InvalidParams("expected Bottle params");
    double depth = p.values[0], rt = p.values[1], pitch = p.values[2], spacing = p.values[3];
    if (depth < 0.0 || rt <= 0.0 || pitch <= 0.0 || spacing <= 0.0)
        throw InvalidParams("bottle parameters must be positive (rib_thickness may be 0)");
    if (!(spacing < pitch)) throw InvalidParams("bottle rib_spacing must be < rib_pitch");
    if (!(depth < rt)) throw InvalidParams("bottle rib_thickness must be < top_radius");
    double wg = pitch - spacing;

    auto pieces = std::make_shared<std::vector<ProfilePiece>>();
    auto add_land = [&](double z0, double z1, double r0) {
        if (z1 - z0 < 1e-12) return;
        ProfilePiece pc;
        pc.z0 = z0; pc.z1 = z1;
        pc.min_rings = std::max(1, int(std::ceil((z1 - z0) / 0.02)));
        pc.r = [r0](double) { return r0; };
        pc.drdz = [](double) { return 0.0; };
        pieces->push_back(pc);
    };
    auto add_groove = [&](double z0, double width, double d, double r0) {
        ProfilePiece pc;
        pc.z0 = z0; pc.z1 = z0 + width;
        pc.min_rings = std::max(4, int(std::ceil(width / 0.01)));
        ArcGroove g(width, d);
        pc.r = [g, r0, z0](double z) { return r0 - g.depth_at(z - z0); };
        pc.drdz = [g, z0](double z) { return -g.slope_at(z - z0); };
        pieces->push_back(pc);
    };

    // fixed ribbed base
    double z = 0.0;
    for (int k = 0; k < kLowerGrooveCount; ++k) {
        double g0 = kLowerGrooveZ0 + k * kLowerGroovePitch;
        add_land(z, g0, kBaseRadius);
        add_groove(g0, kLowerGrooveWidth, kLowerGrooveDepth, kBaseRadius);
        z = g0 + kLowerGrooveWidth;
    }
    add_land(z, kLowerTop, kBaseRadius);

    // shoulder blend (smoothstep) from base radius to top radius
    {
        ProfilePiece pc;
        pc.z0 = kLowerTop; pc.z1 = kShoulderTop;
        pc.min_rings = 8;
        double span = kShoulderTop - kLowerTop;
        pc.r = [rt, span](double zz) {
            double u = (zz - kLowerTop) / span;
            return kBaseRadius + (rt - kBaseRadius) * (3 * u * u - 2 * u * u * u);
        };
        pc.drdz = [rt, span](double zz) {
            double u = (zz - kLowerTop) / span;
            return (rt - kBaseRadius) * (6 * u - 6 * u * u) / span;
        };
        pieces->push_back(pc);
    }

    // parameter-controlled ribbed top section
    if (depth > 0.0 && wg < 2.0 * kMinSegmentLength)
        throw TessellationError("rib width below 2x minimum segment length");
    z = kShoulderTop;
    if (depth > 0.0) {
        for (double g0 = kUpperGrooveZ0; g0 + wg <= kUpperGrooveZmax; g0 += pitch) {
            add_land(z, g0, rt);
            add_groove(g0, wg, depth, rt);
            z = g0 + wg;
        }
    }
    add_land(z, kBottleHeight, rt);

    BottleProfile prof;
    prof.height = kBottleHeight;
    prof.radius = [pieces](double zz) {
        for (const auto& pc : *pieces)
            if (zz <= pc.z1 + 1e-15) return pc.r(std::max(zz, pc.z0));
        return pieces->back().r(pieces->back().z1);
    };
    prof.slope = [pieces](double zz) {
        for (const auto& pc : *pieces)
            if (zz <= pc.z1 + 1e-15) return pc.drdz(std::clamp(zz, pc.z0, pc.z1));
        return 0.0;
    };
    for (const auto& pc : *pieces) prof.breakpoints.push_back(pc.z0);
    prof.breakpoints.push_back(pieces->back().z1);
    for (const auto& pc : *pieces) prof.min_rings.push_back(pc.min_rings);
    return prof;
}

std::pair<TriMesh, BrepGraph> gen_bottle(const ParamVector& p) {
    BottleProfile prof = make_bottle_profile(p);
    const int M = kAngularSegments;
    const size_t npieces = prof.min_rings.size();

    // axial stations: piece boundaries plus per-piece subdivisions
    std::vector<double> stations;
    for (size_t i = 0; i < npieces; ++i) {
        double z0 = prof.breakpoints[i], z1 = prof.breakpoints[i + 1];
        int n = prof.min_rings[i];
        for (int k = 0; k < n; ++k) stations.push_back(z0 + (z1 - z0) * k / n);
    }
    stations.push_back(prof.height);

    TriMesh mesh;
    const size_t nrings = stations.size();
    for (size_t j = 0; j < nrings; ++j) {
        double r = prof.radius(stations[j]);
        for (int m = 0; m < M; ++m) {
            double th = 2.0 * M_PI * m / M;
            mesh.vertices.push_back({r * std::cos(th), r * std::sin(th), stations[j]});
        }
    }
    auto vid = [&](size_t j, int m) { return uint32_t(j * M + (m % M)); };
    for (size_t j = 0; j + 1 < nrings; ++j) {
        for (int m = 0; m < M; ++m) {
            uint32_t a = vid(j, m), b = vid(j, m + 1), c = vid(j + 1, m + 1), d = vid(j + 1, m);
            mesh.triangles.push_back({a, b, c});
            mesh.triangles.push_back({a, c, d});
        }
    }
    uint32_t c0 = uint32_t(mesh.vertices.size());
    mesh.vertices.push_back({0, 0, 0});
    uint32_t c1 = uint32_t(mesh.vertices.size());
    mesh.vertices.push_back({0, 0, prof.height});
    for (int m = 0; m < M; ++m) {
        mesh.triangles.push_back({c0, vid(0, m + 1), vid(0, m)});                  // bottom, -z
        mesh.triangles.push_back({c1, vid(nrings - 1, m), vid(nrings - 1, m + 1)});  // top, +z
    }

    // B-Rep graph: 4 angular sectors per revolved piece band + 4 cap sectors
    // per end. Edges: boundary arcs between axial neighbors, profile lines
    // between angular neighbors, cap radials between cap sectors.
    BrepGraph g;
    constexpr int N = FacePatch::kGrid;
    const int S = 4;
    auto surf_point = [&](double th, double zz, std::array<double, 6>& out) {
        double r = prof.radius(zz), dr = prof.slope(zz);
        double nn = std::sqrt(1.0 + dr * dr);
        out = {r * std::cos(th), r * std::sin(th), zz,
               std::cos(th) / nn, std::sin(th) / nn, -dr / nn};
    };
    // face ids: band faces piece-major then sector, caps appended
    auto band_face = [&](size_t piece, int sector) { return uint32_t(piece * S + sector); };
    for (size_t i = 0; i < npieces; ++i) {
        double z0 = prof.breakpoints[i], z1 = prof.breakpoints[i + 1];
        for (int s = 0; s < S; ++s) {
            FacePatch f;
            for (int a = 0; a < N; ++a) {
                double th = 2.0 * M_PI * (s + double(a) / (N - 1)) / S;
                for (int b = 0; b < N; ++b) {
                    double zz = z0 + (z1 - z0) * b / (N - 1);
                    surf_point(th, zz, f.grid[a][b]);
                }
            }
            g.faces.push_back(f);
        }
    }
    uint32_t cap_lo = uint32_t(g.faces.size());
    uint32_t cap_hi = cap_lo + S;
    for (int which = 0; which < 2; ++which) {
        double zz = which == 0 ? 0.0 : prof.height;
        double nz = which == 0 ? -1.0 : 1.0;
        double r = prof.radius(zz);
        for (int s = 0; s < S; ++s) {
            FacePatch f;
            for (int a = 0; a < N; ++a) {
                double th = 2.0 * M_PI * (s + double(a) / (N - 1)) / S;
                for (int b = 0; b < N; ++b) {
                    double rho = r * b / (N - 1);
                    f.grid[a][b] = {rho * std::cos(th), rho * std::sin(th), zz, 0.0, 0.0, nz};
                }
            }
            g.faces.push_back(f);
        }
    }
    auto add_edge = [&](const EdgeCurve& e, uint32_t fa, uint32_t fb) {
        uint32_t ei = uint32_t(g.edges.size());
        g.edges.push_back(e);
        g.adjacency.push_back({fa, fb, ei});
    };
    constexpr int E = EdgeCurve::kSamples;
    // boundary arcs (piece i | piece i+1), rim arcs (cap | end pieces)
    for (size_t bp = 0; bp < npieces + 1; ++bp) {
        double zz = prof.breakpoints[bp];
        double r = prof.radius(zz);
        for (int s = 0; s < S; ++s) {
            EdgeCurve e;
            for (int k = 0; k < E; ++k) {
                double th = 2.0 * M_PI * (s + double(k) / (E - 1)) / S;
                e.samples[k] = {r * std::cos(th), r * std::sin(th), zz,
                                -std::sin(th), std::cos(th), 0.0};
            }
            uint32_t fa = bp == 0 ? cap_lo + s : band_face(bp - 1, s);
            uint32_t fb = bp == npieces ? cap_hi + s : band_face(bp, s);
            add_edge(e, fa, fb);
        }
    }
    // profile lines at sector boundaries
    for (size_t i = 0; i < npieces; ++i) {
        double z0 = prof.breakpoints[i], z1 = prof.breakpoints[i + 1];
        for (int s = 0; s < S; ++s) {
            double th = 2.0 * M_PI * s / S;
            EdgeCurve e;
            for (int k = 0; k < E; ++k) {
                double zz = z0 + (z1 - z0) * k / (E - 1);
                double r = prof.radius(zz), dr = prof.slope(zz);
                double nn = std::sqrt(1.0 + dr * dr);
                e.samples[k] = {r * std::cos(th), r * std::sin(th), zz,
                                dr * std::cos(th) / nn, dr * std::sin(th) / nn, 1.0 / nn};
            }
            add_edge(e, band_face(i, (s + S - 1) % S), band_face(i, s));
        }
    }
    // cap radial edges
    for (int which = 0; which < 2; ++which) {
        double zz = which == 0 ? 0.0 : prof.height;
        double r = prof.radius(zz);
        uint32_t base = which == 0 ? cap_lo : cap_hi;
        for (int s = 0; s < S; ++s) {
            double th = 2.0 * M_PI * s / S;
            EdgeCurve e;
            for (int k = 0; k < E; ++k) {
                double rho = r * k / (E - 1);
                e.samples[k] = {rho * std::cos(th), rho * std::sin(th), zz,
                                std::cos(th), std::sin(th), 0.0};
            }
            add_edge(e, base + (s + S - 1) % S, base + s);
        }
    }
    return {std::move(mesh), std::move(g)};
}

std::pair<TriMesh, BrepGraph> gen_geometry(const ParamVector& p) {
    return p.family == Family::CrashBox ? gen_crashbox(p) : gen_bottle(p);
}

DesignGrid sample_design_grid(Family family, int levels,
                              const std::array<std::array<double, 2>, 4>& ranges,
                              double test_fraction, uint64_t seed) {
    if (levels < 2) throw InvalidParams("levels must be >= 2");
    DesignGrid grid;
    grid.family = family;
    grid.levels_per_param = levels;
    grid.ranges = ranges;
    std::array<std::vector<double>, 4> axis;
    for (int k = 0; k < 4; ++k)
        for (int i = 0; i < levels; ++i)
            axis[k].push_back(ranges[k][0] + (ranges[k][1] - ranges[k][0]) * i / (levels - 1));
    for (double v0 : axis[0])
        for (double v1 : axis[1])
            for (double v2 : axis[2])
                for (double v3 : axis[3]) {
                    ParamVector p;
                    p.family = family;
                    p.values = {v0, v1, v2, v3};
                    p.validate();
                    grid.entries.push_back(p);
                }
    size_t n = grid.entries.size();
    std::vector<uint32_t> order(n);
    std::iota(order.begin(), order.end(), 0u);
    Rng rng(seed);
    for (size_t i = n - 1; i > 0; --i)
        std::swap(order[i], order[rng.index(i + 1)]);
    size_t ntest = size_t(std::llround(test_fraction * double(n)));
    grid.test_indices.assign(order.begin(), order.begin() + ntest);
    grid.train_indices.assign(order.begin() + ntest, order.end());
    std::sort(grid.test_indices.begin(), grid.test_indices.end());
    std::sort(grid.train_indices.begin(), grid.train_indices.end());
    return grid;
}

Transform normalize_geometry(TriMesh& mesh, BrepGraph& graph, const Aabb& family_box) {
    if (mesh.vertices.empty()) throw DegenerateBounds("empty mesh");
    Vec3 ext = family_box.extent();
    double maxext = std::max({ext.x, ext.y, ext.z});
    if (!(maxext > 0.0)) throw DegenerateBounds("family bounding box has zero extent");
    Transform t;
    t.scale = 2.0 / maxext;
    t.offset = family_box.center() * (-t.scale);
    apply_transform(mesh, t);
    apply_transform(graph, t);
    return t;
}

void apply_transform(TriMesh& mesh, const Transform& t) {
    for (auto& v : mesh.vertices) v = t.apply(v);
}

void apply_transform(BrepGraph& graph, const Transform& t) {
    for (auto& f : graph.faces)
        for (auto& row : f.grid)
            for (auto& s : row) {
                Vec3 p = t.apply({s[0], s[1], s[2]});
                Vec3 n = Vec3{s[3], s[4], s[5]}.normalized();  // uniform scale keeps direction
                s = {p.x, p.y, p.z, n.x, n.y, n.z};
            }
    for (auto& e : graph.edges)
        for (auto& s : e.samples) {
            Vec3 p = t.apply({s[0], s[1], s[2]});
            Vec3 d = Vec3{s[3], s[4], s[5]}.normalized();
            s = {p.x, p.y, p.z, d.x, d.y, d.z};
        }
}

void write_brep_json(const BrepGraph& graph, const std::string& path) {
    json j;
    j["faces"] = json::array();
    for (const auto& f : graph.faces) j["faces"].push_back(f.grid);
    j["edges"] = json::array();
    for (const auto& e : graph.edges) j["edges"].push_back(e.samples);
    j["adjacency"] = graph.adjacency;
    std::ofstream out(path);
    out << j.dump();
}

BrepGraph read_brep_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifact("missing brep json: " + path);
    json j;
    in >> j;
    BrepGraph g;
    for (const auto& jf : j["faces"]) {
        FacePatch f;
        f.grid = jf.get<decltype(f.grid)>();
        g.faces.push_back(f);
    }
    for (const auto& je : j["edges"]) {
        EdgeCurve e;
        e.samples = je.get<decltype(e.samples)>();
        g.edges.push_back(e);
    }
    g.adjacency = j["adjacency"].get<std::vector<std::array<uint32_t, 3>>>();
    return g;
}

void write_grid_json(const DesignGrid& grid, const std::string& path) {
    json j;
    j["family"] = family_name(grid.family);
    j["levels_per_param"] = grid.levels_per_param;
    j["ranges"] = grid.ranges;
    j["entries"] = json::array();
    for (const auto& p : grid.entries) j["entries"].push_back(p.values);
    j["train_indices"] = grid.train_indices;
    j["test_indices"] = grid.test_indices;
    std::ofstream out(path);
    out << j.dump(1);
}

DesignGrid read_grid_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifact("missing grid json: " + path);
    json j;
    in >> j;
    DesignGrid g;
    g.family = family_from_name(j["family"].get<std::string>());
    g.levels_per_param = j["levels_per_param"].get<int>();
    g.ranges = j["ranges"].get<decltype(g.ranges)>();
    for (const auto& je : j["entries"]) {
        ParamVector p;
        p.family = g.family;
        p.values = je.get<std::array<double, 4>>();
        g.entries.push_back(p);
    }
    g.train_indices = j["train_indices"].get<std::vector<uint32_t>>();
    g.test_indices = j["test_indices"].get<std::vector<uint32_t>>();
    return g;
}

}  // namespace geomgen
}  // namespace finesdf
