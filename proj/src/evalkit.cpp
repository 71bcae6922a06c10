#include "finesdf/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>

#include <json.hpp>

namespace finesdf {
namespace eval {

double r_squared(const std::vector<double>& pred, const std::vector<double>& truth) {
    if (truth.size() < 2 || pred.size() != truth.size())
        throw DegenerateTargets("r_squared needs >= 2 matched points");
    double mean = 0.0;
    for (double t : truth) mean += t;
    mean /= double(truth.size());
    double ss_tot = 0.0, ss_res = 0.0;
    for (size_t i = 0; i < truth.size(); ++i) {
        ss_tot += (truth[i] - mean) * (truth[i] - mean);
        ss_res += (truth[i] - pred[i]) * (truth[i] - pred[i]);
    }
    if (ss_tot == 0.0) throw DegenerateTargets("constant targets: R^2 undefined");
    return 1.0 - ss_res / ss_tot;
}

namespace {

// Solves the SPD system A x = b in place via Cholesky; A is n x n row-major.
void cholesky_solve(std::vector<double>& A, std::vector<double>& b, size_t n, size_t nrhs) {
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j <= i; ++j) {
            double s = A[i * n + j];
            for (size_t k = 0; k < j; ++k) s -= A[i * n + k] * A[j * n + k];
            if (i == j) {
                if (s <= 0.0) throw DegenerateTargets("normal equations not positive definite");
                A[i * n + i] = std::sqrt(s);
            } else {
                A[i * n + j] = s / A[j * n + j];
            }
        }
    }
    for (size_t r = 0; r < nrhs; ++r) {
        for (size_t i = 0; i < n; ++i) {
            double s = b[i * nrhs + r];
            for (size_t k = 0; k < i; ++k) s -= A[i * n + k] * b[k * nrhs + r];
            b[i * nrhs + r] = s / A[i * n + i];
        }
        for (size_t i = n; i-- > 0;) {
            double s = b[i * nrhs + r];
            for (size_t k = i + 1; k < n; ++k) s -= A[k * n + i] * b[k * nrhs + r];
            b[i * nrhs + r] = s / A[i * n + i];
        }
    }
}

}  // namespace

ProbeReport linear_probe(const std::vector<double>& latents, size_t n, size_t d,
                         const std::vector<double>& params, size_t p,
                         const std::vector<uint32_t>& train_idx,
                         const std::vector<uint32_t>& test_idx) {
    if (latents.size() != n * d || params.size() != n * p)
        throw ShapeMismatch("linear_probe input sizes");
    if (train_idx.size() < 2) throw DegenerateTargets("linear_probe needs >= 2 train rows");

    const size_t m = d + 1;  // homogeneous column for the bias
    std::vector<double> ata(m * m, 0.0), atb(m * p, 0.0);
    auto row_feature = [&](uint32_t i, size_t k) { return k < d ? latents[i * d + k] : 1.0; };
    for (uint32_t i : train_idx) {
        for (size_t a = 0; a < m; ++a) {
            double fa = row_feature(i, a);
            for (size_t b = 0; b <= a; ++b) ata[a * m + b] += fa * row_feature(i, b);
            for (size_t t = 0; t < p; ++t) atb[a * p + t] += fa * params[i * p + t];
        }
    }
    for (size_t a = 0; a < m; ++a)
        for (size_t b = a + 1; b < m; ++b) ata[a * m + b] = ata[b * m + a];
    double lambda = train_idx.size() < d + 1 ? 1e-6 : 0.0;
    // a hair of ridge also guards rank deficiency from duplicate latents
    for (size_t a = 0; a < m; ++a) ata[a * m + a] += std::max(lambda, 1e-12);
    cholesky_solve(ata, atb, m, p);

    ProbeReport rep;
    rep.latent_dim = d;
    rep.n_params = p;
    rep.weights.assign(atb.begin(), atb.begin() + d * p);
    rep.bias.assign(atb.begin() + d * p, atb.end());

    auto predict = [&](uint32_t i, size_t t) {
        double s = rep.bias[t];
        for (size_t k = 0; k < d; ++k) s += latents[i * d + k] * rep.weights[k * p + t];
        return s;
    };
    auto split_r2 = [&](const std::vector<uint32_t>& idx, bool is_test, std::vector<double>& out) {
        out.assign(p, std::numeric_limits<double>::quiet_NaN());
        for (size_t t = 0; t < p; ++t) {
            std::vector<double> pr, tr;
            for (uint32_t i : idx) {
                double pv = predict(i, t);
                pr.push_back(pv);
                tr.push_back(params[i * p + t]);
                rep.scatter.push_back({t, params[i * p + t], pv, is_test});
            }
            try {
                out[t] = r_squared(pr, tr);
            } catch (const DegenerateTargets&) {
                std::fprintf(stderr, "warning: parameter %zu constant on %s split; R^2 = NaN\n",
                             t, is_test ? "test" : "train");
            }
        }
    };
    split_r2(train_idx, false, rep.r2_train);
    split_r2(test_idx, true, rep.r2_test);
    return rep;
}

void write_probe_json(const ProbeReport& report, const std::vector<std::string>& param_names,
                      const std::string& path) {
    nlohmann::json j;
    j["latent_dim"] = report.latent_dim;
    auto sanitize = [](const std::vector<double>& v) {
        nlohmann::json a = nlohmann::json::array();
        for (double x : v) {
            if (std::isnan(x))
                a.push_back(nullptr);
            else
                a.push_back(x);
        }
        return a;
    };
    j["param_names"] = param_names;
    j["r2_train"] = sanitize(report.r2_train);
    j["r2_test"] = sanitize(report.r2_test);
    j["bias"] = report.bias;
    j["weights"] = report.weights;
    std::ofstream out(path);
    out << j.dump(1);
}

void write_scatter_csv(const ProbeReport& report, const std::vector<std::string>& param_names,
                       const std::string& path) {
    std::ofstream out(path);
    out << "param,true,predicted,split\n";
    char buf[256];
    for (const auto& row : report.scatter) {
        std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g,%s\n",
                      param_names[row.param].c_str(), row.truth, row.predicted,
                      row.test ? "test" : "train");
        out << buf;
    }
}

std::vector<Vec3> lattice_points(int resolution, double box_margin) {
    std::vector<Vec3> pts;
    pts.reserve(size_t(resolution) * resolution * resolution);
    for (int k = 0; k < resolution; ++k)
        for (int j = 0; j < resolution; ++j)
            for (int i = 0; i < resolution; ++i)
                pts.push_back({-box_margin + 2.0 * box_margin * i / (resolution - 1.0),
                               -box_margin + 2.0 * box_margin * j / (resolution - 1.0),
                               -box_margin + 2.0 * box_margin * k / (resolution - 1.0)});
    return pts;
}

namespace {

// cube corner offsets in (i, j, k); corner v has coordinate pattern of the
// classic numbering: 0..3 bottom ring, 4..7 top ring
const int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                           {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
const int kEdgeCorners[12][2] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6},
                                 {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};

}  // namespace

TriMesh marching_cubes_grid(const std::vector<double>& values, int resolution,
                            double box_margin) {
    if (resolution < 8) throw InvalidParams("marching cubes resolution must be >= 8");
    const size_t r = size_t(resolution);
    if (values.size() != r * r * r) throw ShapeMismatch("grid value count");

    auto at = [&](int i, int j, int k) { return values[(size_t(k) * r + j) * r + i]; };
    auto coord = [&](int i) { return -box_margin + 2.0 * box_margin * i / (resolution - 1.0); };

    TriMesh mesh;
    std::map<std::pair<uint64_t, uint64_t>, uint32_t> vert_ids;  // (edge endpoints) -> vertex
    auto point_key = [&](int i, int j, int k) {
        return (uint64_t(k) * r + j) * r + i;
    };
    auto edge_vertex = [&](int ci, int cj, int ck, int edge) -> uint32_t {
        const int* a = kCorner[kEdgeCorners[edge][0]];
        const int* b = kCorner[kEdgeCorners[edge][1]];
        int ai = ci + a[0], aj = cj + a[1], ak = ck + a[2];
        int bi = ci + b[0], bj = cj + b[1], bk = ck + b[2];
        uint64_t ka = point_key(ai, aj, ak), kb = point_key(bi, bj, bk);
        auto key = std::minmax(ka, kb);
        auto it = vert_ids.find({key.first, key.second});
        if (it != vert_ids.end()) return it->second;
        double va = at(ai, aj, ak), vb = at(bi, bj, bk);
        double t = va == vb ? 0.5 : va / (va - vb);
        t = std::clamp(t, 0.0, 1.0);
        Vec3 pa{coord(ai), coord(aj), coord(ak)}, pb{coord(bi), coord(bj), coord(bk)};
        mesh.vertices.push_back(pa + (pb - pa) * t);
        uint32_t id = uint32_t(mesh.vertices.size() - 1);
        vert_ids[{key.first, key.second}] = id;
        return id;
    };

    for (int k = 0; k + 1 < resolution; ++k)
        for (int j = 0; j + 1 < resolution; ++j)
            for (int i = 0; i + 1 < resolution; ++i) {
                int cube = 0;
                for (int v = 0; v < 8; ++v)
                    if (at(i + kCorner[v][0], j + kCorner[v][1], k + kCorner[v][2]) < 0.0)
                        cube |= 1 << v;
                if (kMcEdgeTable[cube] == 0) continue;
                const int8_t* tri = kMcTriTable[cube];
                for (int t = 0; tri[t] != -1; t += 3) {
                    // table rows wind inward under this corner layout; swap
                    // two vertices so normals point out of the negative region
                    uint32_t v0 = edge_vertex(i, j, k, tri[t]);
                    uint32_t v1 = edge_vertex(i, j, k, tri[t + 2]);
                    uint32_t v2 = edge_vertex(i, j, k, tri[t + 1]);
                    if (v0 == v1 || v1 == v2 || v0 == v2) continue;  // collapsed sliver
                    mesh.triangles.push_back({v0, v1, v2});
                }
            }
    if (mesh.triangles.empty()) throw EmptySurface("no zero crossing found on the lattice");
    return mesh;
}

TriMesh marching_cubes(net::PretrainModel& model, const BrepGraph& graph, int resolution,
                       double box_margin) {
    std::vector<double> latent = model.encode_latent(graph);
    std::vector<Vec3> pts = lattice_points(resolution, box_margin);
    std::vector<double> values;
    values.reserve(pts.size());
    // decode in slabs to bound the tape size
    const size_t chunk = 4096;
    for (size_t off = 0; off < pts.size(); off += chunk) {
        std::vector<Vec3> slab(pts.begin() + off,
                               pts.begin() + std::min(off + chunk, pts.size()));
        std::vector<double> v = model.decode_values(latent, slab);
        values.insert(values.end(), v.begin(), v.end());
    }
    return marching_cubes_grid(values, resolution, box_margin);
}

double chamfer_distance(const TriMesh& a, const TriMesh& b, size_t n_samples, uint64_t seed) {
    sdf::DistanceIndex ia(a, false), ib(b, false);
    Rng rng(seed);
    auto one_way = [&](const TriMesh& src, const sdf::DistanceIndex& dst) {
        std::vector<Vec3> pts = sdf::sample_surface(src, n_samples, rng);
        double sum = 0.0;
        for (const Vec3& p : pts) sum += dst.unsigned_distance(p);
        return sum / double(pts.size());
    };
    return 0.5 * (one_way(a, ib) + one_way(b, ia));
}

std::vector<DensityRow> sampling_density_report(const sdf::SdfSampleSet& set,
                                                const std::vector<double>& thresholds) {
    if (set.size() == 0) throw EmptySampleSet("density report on empty sample set");
    std::vector<DensityRow> rows;
    for (double tau : thresholds) {
        size_t c = 0;
        for (float v : set.values)
            if (std::abs(double(v)) < tau) ++c;
        rows.push_back({tau, double(c) / double(set.size())});
    }
    return rows;
}

void write_density_csv(const std::vector<DensityRow>& rows, const std::string& mode_label,
                       const std::string& path) {
    std::ofstream out(path);
    out << "threshold,fraction,mode\n";
    char buf[128];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%s\n", r.threshold, r.fraction,
                      mode_label.c_str());
        out << buf;
    }
}

}  // namespace eval
}  // namespace finesdf
