#include "finesdf/sdf.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace finesdf {
namespace sdf {

Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
    // Ericson, Real-Time Collision Detection, 5.1.5
    Vec3 ab = b - a, ac = c - a, ap = p - a;
    double d1 = ab.dot(ap), d2 = ac.dot(ap);
    if (d1 <= 0.0 && d2 <= 0.0) return a;
    Vec3 bp = p - b;
    double d3 = ab.dot(bp), d4 = ac.dot(bp);
    if (d3 >= 0.0 && d4 <= d3) return b;
    double vc = d1 * d4 - d3 * d2;
    if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) return a + ab * (d1 / (d1 - d3));
    Vec3 cp = p - c;
    double d5 = ab.dot(cp), d6 = ac.dot(cp);
    if (d6 >= 0.0 && d5 <= d6) return c;
    double vb = d5 * d2 - d1 * d6;
    if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) return a + ac * (d2 / (d2 - d6));
    double va = d3 * d6 - d5 * d4;
    if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0)
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    double denom = 1.0 / (va + vb + vc);
    return a + ab * (vb * denom) + ac * (vc * denom);
}

namespace {

uint64_t edge_key(uint32_t a, uint32_t b) {
    if (a > b) std::swap(a, b);
    return (uint64_t(a) << 32) | b;
}

double angle_at(const Vec3& at, const Vec3& u, const Vec3& v) {
    Vec3 e1 = (u - at).normalized(), e2 = (v - at).normalized();
    return std::acos(std::clamp(e1.dot(e2), -1.0, 1.0));
}

}  // namespace

DistanceIndex::DistanceIndex(const TriMesh& mesh, bool require_sign)
    : mesh_(mesh), sign_ok_(require_sign) {
    if (require_sign && !mesh_.is_watertight())
        throw NonWatertight("mesh is not watertight/consistently oriented; sign undefined");

    const size_t nt = mesh_.triangles.size();
    face_normals_.resize(nt);
    for (size_t t = 0; t < nt; ++t) {
        const auto& tri = mesh_.triangles[t];
        face_normals_[t] = (mesh_.vertices[tri[1]] - mesh_.vertices[tri[0]])
                               .cross(mesh_.vertices[tri[2]] - mesh_.vertices[tri[0]]);
    }
    if (sign_ok_) {
        vertex_pseudonormals_.assign(mesh_.vertices.size(), {0, 0, 0});
        std::vector<std::pair<uint64_t, Vec3>> edges;
        edges.reserve(nt * 3);
        for (size_t t = 0; t < nt; ++t) {
            const auto& tri = mesh_.triangles[t];
            const Vec3& a = mesh_.vertices[tri[0]];
            const Vec3& b = mesh_.vertices[tri[1]];
            const Vec3& c = mesh_.vertices[tri[2]];
            Vec3 nu = face_normals_[t].normalized();
            vertex_pseudonormals_[tri[0]] += nu * angle_at(a, b, c);
            vertex_pseudonormals_[tri[1]] += nu * angle_at(b, c, a);
            vertex_pseudonormals_[tri[2]] += nu * angle_at(c, a, b);
            for (int k = 0; k < 3; ++k)
                edges.push_back({edge_key(tri[k], tri[(k + 1) % 3]), nu});
        }
        std::sort(edges.begin(), edges.end(),
                  [](const auto& x, const auto& y) { return x.first < y.first; });
        for (size_t i = 0; i < edges.size(); i += 2)
            edge_pseudonormals_.push_back(
                {edges[i].first, edges[i].second + edges[i + 1].second});
    }

    tri_order_.resize(nt);
    std::iota(tri_order_.begin(), tri_order_.end(), 0u);
    nodes_.reserve(2 * nt);
    nodes_.emplace_back();
    build(0, 0, uint32_t(nt));
}

void DistanceIndex::build(uint32_t node, uint32_t first, uint32_t count) {
    Aabb box;
    std::vector<Vec3> centroids(count);
    for (uint32_t i = 0; i < count; ++i) {
        const auto& tri = mesh_.triangles[tri_order_[first + i]];
        Vec3 cen{0, 0, 0};
        for (int k = 0; k < 3; ++k) {
            box.expand(mesh_.vertices[tri[k]]);
            cen += mesh_.vertices[tri[k]];
        }
        centroids[i] = cen / 3.0;
    }
    nodes_[node].box = box;
    if (count <= 4) {
        nodes_[node].first = first;
        nodes_[node].count = count;
        return;
    }
    Aabb cbox;
    for (const auto& c : centroids) cbox.expand(c);
    Vec3 ext = cbox.extent();
    int axis = ext.x >= ext.y && ext.x >= ext.z ? 0 : (ext.y >= ext.z ? 1 : 2);
    uint32_t mid = count / 2;
    std::vector<uint32_t> local(count);
    std::iota(local.begin(), local.end(), 0u);
    std::nth_element(local.begin(), local.begin() + mid, local.end(),
                     [&](uint32_t x, uint32_t y) { return centroids[x][axis] < centroids[y][axis]; });
    std::vector<uint32_t> reordered(count);
    for (uint32_t i = 0; i < count; ++i) reordered[i] = tri_order_[first + local[i]];
    std::copy(reordered.begin(), reordered.end(), tri_order_.begin() + first);

    int32_t left = int32_t(nodes_.size());
    nodes_.emplace_back();
    nodes_.emplace_back();
    nodes_[node].left = left;
    nodes_[node].right = left + 1;
    build(left, first, mid);
    build(left + 1, first + mid, count - mid);
}

void DistanceIndex::query(uint32_t node, const Vec3& p, double& best_d2, uint32_t& best_tri,
                          Vec3& best_point) const {
    const BvhNode& n = nodes_[node];
    if (n.box.dist2(p) >= best_d2) return;
    if (n.left < 0) {
        for (uint32_t i = 0; i < n.count; ++i) {
            uint32_t t = tri_order_[n.first + i];
            const auto& tri = mesh_.triangles[t];
            Vec3 c = closest_point_on_triangle(p, mesh_.vertices[tri[0]], mesh_.vertices[tri[1]],
                                               mesh_.vertices[tri[2]]);
            double d2 = (p - c).norm2();
            if (d2 < best_d2) {
                best_d2 = d2;
                best_tri = t;
                best_point = c;
            }
        }
        return;
    }
    double dl = nodes_[n.left].box.dist2(p), dr = nodes_[n.right].box.dist2(p);
    if (dl <= dr) {
        query(uint32_t(n.left), p, best_d2, best_tri, best_point);
        query(uint32_t(n.right), p, best_d2, best_tri, best_point);
    } else {
        query(uint32_t(n.right), p, best_d2, best_tri, best_point);
        query(uint32_t(n.left), p, best_d2, best_tri, best_point);
    }
}

double DistanceIndex::unsigned_distance(const Vec3& p) const {
    double best_d2 = 1e300;
    uint32_t best_tri = 0;
    Vec3 best_point;
    query(0, p, best_d2, best_tri, best_point);
    return std::sqrt(best_d2);
}

Vec3 DistanceIndex::closest_point(const Vec3& p) const {
    double best_d2 = 1e300;
    uint32_t best_tri = 0;
    Vec3 best_point;
    query(0, p, best_d2, best_tri, best_point);
    return best_point;
}

double DistanceIndex::unsigned_distance_brute(const Vec3& p) const {
    double best = 1e300;
    for (const auto& tri : mesh_.triangles) {
        Vec3 c = closest_point_on_triangle(p, mesh_.vertices[tri[0]], mesh_.vertices[tri[1]],
                                           mesh_.vertices[tri[2]]);
        best = std::min(best, (p - c).norm2());
    }
    return std::sqrt(best);
}

double DistanceIndex::signed_distance(const Vec3& p) const {
    if (!sign_ok_) throw NonWatertight("index built unsigned; signed_distance unavailable");
    double best_d2 = 1e300;
    uint32_t best_tri = 0;
    Vec3 best_point;
    query(0, p, best_d2, best_tri, best_point);

    // classify the closest feature via barycentric coordinates
    const auto& tri = mesh_.triangles[best_tri];
    const Vec3& a = mesh_.vertices[tri[0]];
    const Vec3& b = mesh_.vertices[tri[1]];
    const Vec3& c = mesh_.vertices[tri[2]];
    Vec3 v0 = b - a, v1 = c - a, v2 = best_point - a;
    double d00 = v0.dot(v0), d01 = v0.dot(v1), d11 = v1.dot(v1);
    double d20 = v2.dot(v0), d21 = v2.dot(v1);
    double denom = d00 * d11 - d01 * d01;
    double v = (d11 * d20 - d01 * d21) / denom;
    double w = (d00 * d21 - d01 * d20) / denom;
    double u = 1.0 - v - w;

    constexpr double eps = 1e-9;
    Vec3 normal;
    auto edge_normal = [&](uint32_t i, uint32_t j) {
        uint64_t key = edge_key(i, j);
        auto it = std::lower_bound(edge_pseudonormals_.begin(), edge_pseudonormals_.end(), key,
                                   [](const auto& e, uint64_t k) { return e.first < k; });
        return it->second;
    };
    if (u > eps && v > eps && w > eps) {
        normal = face_normals_[best_tri];
    } else if (u <= eps && v <= eps) {
        normal = vertex_pseudonormals_[tri[2]];
    } else if (u <= eps && w <= eps) {
        normal = vertex_pseudonormals_[tri[1]];
    } else if (v <= eps && w <= eps) {
        normal = vertex_pseudonormals_[tri[0]];
    } else if (u <= eps) {
        normal = edge_normal(tri[1], tri[2]);
    } else if (v <= eps) {
        normal = edge_normal(tri[0], tri[2]);
    } else {
        normal = edge_normal(tri[0], tri[1]);
    }
    double d = std::sqrt(best_d2);
    return normal.dot(p - best_point) >= 0.0 ? d : -d;
}

bool DistanceIndex::inside_by_ray_parity(const Vec3& p) const {
    static const Vec3 dirs[] = {
        Vec3{0.5714298756, 0.3413597141, 0.7462114672}.normalized(),
        Vec3{-0.7131246655, 0.1937561312, 0.6737965143}.normalized(),
        Vec3{0.1234567891, -0.8765432109, 0.4654321098}.normalized(),
        Vec3{0.9123456789, 0.0987654321, -0.3974186235}.normalized(),
    };
    for (const Vec3& d : dirs) {
        int crossings = 0;
        bool ambiguous = false;
        for (const auto& tri : mesh_.triangles) {
            // Moller-Trumbore
            const Vec3& a = mesh_.vertices[tri[0]];
            Vec3 e1 = mesh_.vertices[tri[1]] - a, e2 = mesh_.vertices[tri[2]] - a;
            Vec3 pv = d.cross(e2);
            double det = e1.dot(pv);
            if (std::abs(det) < 1e-14) continue;
            double inv = 1.0 / det;
            Vec3 tv = p - a;
            double u = tv.dot(pv) * inv;
            if (u < -1e-12 || u > 1.0 + 1e-12) continue;
            Vec3 qv = tv.cross(e1);
            double v = d.dot(qv) * inv;
            if (v < -1e-12 || u + v > 1.0 + 1e-12) continue;
            double t = e2.dot(qv) * inv;
            if (t <= 1e-12) continue;
            if (u < 1e-9 || v < 1e-9 || u + v > 1.0 - 1e-9) {
                ambiguous = true;  // grazing an edge; try another direction
                break;
            }
            ++crossings;
        }
        if (!ambiguous) return (crossings % 2) == 1;
    }
    // all directions grazing; fall back to the pseudo-normal sign
    return signed_distance(p) < 0.0;
}

// ---------------------------------------------------------------------
// Sample sets
// ---------------------------------------------------------------------

std::vector<Vec3> sample_surface(const TriMesh& mesh, size_t n, Rng& rng) {
    std::vector<double> cum(mesh.triangles.size());
    double total = 0.0;
    for (size_t t = 0; t < mesh.triangles.size(); ++t) {
        const auto& tri = mesh.triangles[t];
        const Vec3& a = mesh.vertices[tri[0]];
        const Vec3& b = mesh.vertices[tri[1]];
        const Vec3& c = mesh.vertices[tri[2]];
        total += 0.5 * (b - a).cross(c - a).norm();
        cum[t] = total;
    }
    std::vector<Vec3> out;
    out.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        double r = rng.uniform() * total;
        size_t t = std::lower_bound(cum.begin(), cum.end(), r) - cum.begin();
        if (t >= cum.size()) t = cum.size() - 1;
        const auto& tri = mesh.triangles[t];
        double u = rng.uniform(), v = rng.uniform();
        if (u + v > 1.0) { u = 1.0 - u; v = 1.0 - v; }
        const Vec3& a = mesh.vertices[tri[0]];
        const Vec3& b = mesh.vertices[tri[1]];
        const Vec3& c = mesh.vertices[tri[2]];
        out.push_back(a + (b - a) * u + (c - a) * v);
    }
    return out;
}

SdfSampleSet precompute_near_zero(const DistanceIndex& index, size_t n_samples, uint64_t seed,
                                  const NearZeroConfig& cfg) {
    SdfSampleSet set;
    set.mode = SamplingMode::NearZero;
    set.seed = seed;
    Rng rng(seed);
    double diag = index.mesh().bounds().diagonal();
    size_t n1 = size_t(std::llround(cfg.frac_sigma1 * double(n_samples)));
    size_t n2 = size_t(std::llround(cfg.frac_sigma2 * double(n_samples)));
    size_t n3 = n_samples - std::min(n_samples, n1 + n2);
    std::vector<Vec3> surf = sample_surface(index.mesh(), n1 + n2, rng);
    set.coords.reserve(3 * n_samples);
    set.values.reserve(n_samples);
    auto push = [&](const Vec3& p) {
        set.coords.push_back(float(p.x));
        set.coords.push_back(float(p.y));
        set.coords.push_back(float(p.z));
        set.values.push_back(float(index.signed_distance(p)));
    };
    for (size_t i = 0; i < n1 + n2; ++i) {
        double sigma = (i < n1 ? cfg.sigma1_frac : cfg.sigma2_frac) * diag;
        Vec3 d{rng.gaussian(), rng.gaussian(), rng.gaussian()};
        push(surf[i] + d * sigma);
    }
    for (size_t i = 0; i < n3; ++i) {
        double m = cfg.box_margin;
        push({rng.uniform(-m, m), rng.uniform(-m, m), rng.uniform(-m, m)});
    }
    return set;
}

SdfSampleSet precompute_uniform_grid(const DistanceIndex& index, int resolution,
                                     double box_margin) {
    if (resolution < 2) throw InvalidParams("grid resolution must be >= 2");
    SdfSampleSet set;
    set.mode = SamplingMode::UniformGrid;
    size_t n = size_t(resolution);
    set.coords.reserve(3 * n * n * n);
    set.values.reserve(n * n * n);
    for (int i = 0; i < resolution; ++i)
        for (int j = 0; j < resolution; ++j)
            for (int k = 0; k < resolution; ++k) {
                Vec3 p{-box_margin + 2 * box_margin * i / (resolution - 1),
                       -box_margin + 2 * box_margin * j / (resolution - 1),
                       -box_margin + 2 * box_margin * k / (resolution - 1)};
                set.coords.push_back(float(p.x));
                set.coords.push_back(float(p.y));
                set.coords.push_back(float(p.z));
                set.values.push_back(float(index.signed_distance(p)));
            }
    return set;
}

int32_t SdfSampleSet::kd_build(uint32_t* idx, size_t n, int axis) {
    if (n == 0) return -1;
    size_t mid = n / 2;
    std::nth_element(idx, idx + mid, idx + n, [&](uint32_t a, uint32_t b) {
        return coords[3 * a + axis] < coords[3 * b + axis];
    });
    int32_t node = int32_t(kd_nodes_.size());
    kd_nodes_.push_back({idx[mid], -1, -1});
    int next = (axis + 1) % 3;
    int32_t l = kd_build(idx, mid, next);
    int32_t r = kd_build(idx + mid + 1, n - mid - 1, next);
    kd_nodes_[node].left = l;
    kd_nodes_[node].right = r;
    return node;
}

void SdfSampleSet::build_spatial_index() {
    kd_nodes_.clear();
    kd_nodes_.reserve(size());
    std::vector<uint32_t> idx(size());
    std::iota(idx.begin(), idx.end(), 0u);
    if (!idx.empty()) kd_build(idx.data(), idx.size(), 0);
}

void SdfSampleSet::knn_search(int32_t node, int axis, const Vec3& q, int k,
                              std::vector<std::pair<double, uint32_t>>& heap) const {
    if (node < 0) return;
    const KdNode& n = kd_nodes_[node];
    Vec3 p = coord(n.point);
    double d2 = (q - p).norm2();
    if (int(heap.size()) < k) {
        heap.push_back({d2, n.point});
        std::push_heap(heap.begin(), heap.end());
    } else if (d2 < heap.front().first) {
        std::pop_heap(heap.begin(), heap.end());
        heap.back() = {d2, n.point};
        std::push_heap(heap.begin(), heap.end());
    }
    double diff = q[axis] - p[axis];
    int next = (axis + 1) % 3;
    int32_t near = diff <= 0 ? n.left : n.right;
    int32_t far = diff <= 0 ? n.right : n.left;
    knn_search(near, next, q, k, heap);
    if (int(heap.size()) < k || diff * diff < heap.front().first)
        knn_search(far, next, q, k, heap);
}

double SdfSampleSet::knn_interpolate(const Vec3& query, int k) const {
    if (values.empty()) throw EmptySampleSet("knn_interpolate on empty sample set");
    if (kd_nodes_.empty()) throw EmptySampleSet("spatial index not built");
    k = std::min<int>(k, int(size()));
    std::vector<std::pair<double, uint32_t>> heap;
    heap.reserve(k);
    knn_search(0, 0, query, k, heap);
    // exact-match shortcut
    for (const auto& [d2, i] : heap)
        if (d2 < 1e-24) return values[i];
    double wsum = 0.0, vsum = 0.0;
    for (const auto& [d2, i] : heap) {
        double w = 1.0 / d2;
        wsum += w;
        vsum += w * values[i];
    }
    return vsum / wsum;
}

namespace {

template <typename T>
void write_le(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::ifstream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw FormatError("truncated sample-set file");
    return v;
}

}  // namespace

void write_sample_set(const SdfSampleSet& set, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for write: " + path);
    out.write("NZS1", 4);
    write_le<uint16_t>(out, 1);
    write_le<uint16_t>(out, uint16_t(set.mode));
    write_le<uint64_t>(out, set.size());
    for (size_t i = 0; i < set.size(); ++i) {
        write_le<float>(out, set.coords[3 * i]);
        write_le<float>(out, set.coords[3 * i + 1]);
        write_le<float>(out, set.coords[3 * i + 2]);
        write_le<float>(out, set.values[i]);
    }
    nlohmann::json j;
    j["geometry_id"] = set.geometry_id;
    j["seed"] = set.seed;
    std::ofstream side(path + ".json");
    side << j.dump(1);
}

SdfSampleSet read_sample_set(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("missing sample set: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "NZS1", 4) != 0) throw FormatError("bad magic");
    uint16_t version = read_le<uint16_t>(in);
    if (version != 1) throw FormatError("unsupported version");
    uint16_t mode = read_le<uint16_t>(in);
    if (mode > 1) throw FormatError("bad sampling mode");
    uint64_t count = read_le<uint64_t>(in);
    SdfSampleSet set;
    set.mode = SamplingMode(mode);
    set.coords.resize(3 * count);
    set.values.resize(count);
    for (uint64_t i = 0; i < count; ++i) {
        set.coords[3 * i] = read_le<float>(in);
        set.coords[3 * i + 1] = read_le<float>(in);
        set.coords[3 * i + 2] = read_le<float>(in);
        set.values[i] = read_le<float>(in);
    }
    std::ifstream side(path + ".json");
    if (side) {
        nlohmann::json j;
        side >> j;
        set.geometry_id = j.value("geometry_id", "");
        set.seed = j.value("seed", uint64_t(0));
    }
    return set;
}

}  // namespace sdf
}  // namespace finesdf
