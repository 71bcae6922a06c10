#include "finesdf/geometry.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace finesdf {

std::string family_name(Family f) {
    return f == Family::CrashBox ? "crashbox" : "bottle";
}

Family family_from_name(const std::string& s) {
    if (s == "crashbox") return Family::CrashBox;
    if (s == "bottle") return Family::Bottle;
    throw InvalidParams("unknown family: " + s);
}

void ParamVector::validate() const {
    for (double v : values) {
        if (!(v > 0.0)) throw InvalidParams("all design parameters must be strictly positive");
    }
    if (family == Family::CrashBox) {
        double h = values[0], w = values[1], t = values[3];
        if (!(t < std::min(h, w) / 2.0))
            throw InvalidParams("crash box wall self-intersects: thickness >= min(height,width)/2");
    } else {
        double rt = values[0], r = values[1], pitch = values[2], spacing = values[3];
        if (!(spacing < pitch))
            throw InvalidParams("bottle rib_spacing must be < rib_pitch");
        if (!(rt < r))
            throw InvalidParams("bottle rib_thickness must be < top_radius");
    }
}

Aabb TriMesh::bounds() const {
    Aabb b;
    for (const auto& v : vertices) b.expand(v);
    return b;
}

double TriMesh::signed_volume() const {
    double vol = 0.0;
    for (const auto& t : triangles) {
        const Vec3& a = vertices[t[0]];
        const Vec3& b = vertices[t[1]];
        const Vec3& c = vertices[t[2]];
        vol += a.dot(b.cross(c));
    }
    return vol / 6.0;
}

double TriMesh::surface_area() const {
    double area = 0.0;
    for (const auto& t : triangles) {
        const Vec3& a = vertices[t[0]];
        const Vec3& b = vertices[t[1]];
        const Vec3& c = vertices[t[2]];
        area += 0.5 * (b - a).cross(c - a).norm();
    }
    return area;
}

bool TriMesh::is_watertight() const {
    if (triangles.empty()) return false;
    // directed edge -> count; undirected edge must appear exactly once in
    // each direction.
    std::map<std::pair<uint32_t, uint32_t>, int> directed;
    for (const auto& t : triangles) {
        for (int k = 0; k < 3; ++k) {
            uint32_t a = t[k], b = t[(k + 1) % 3];
            if (a == b) return false;
            if (++directed[{a, b}] > 1) return false;  // duplicate directed edge
        }
    }
    for (const auto& [e, c] : directed) {
        auto it = directed.find({e.second, e.first});
        if (it == directed.end() || it->second != 1) return false;
    }
    return true;
}

bool TriMesh::has_degenerate_triangles(double rel_area_eps) const {
    Aabb b = bounds();
    double scale2 = b.extent().norm2();
    for (const auto& t : triangles) {
        const Vec3& a = vertices[t[0]];
        const Vec3& p = vertices[t[1]];
        const Vec3& c = vertices[t[2]];
        double area = 0.5 * (p - a).cross(c - a).norm();
        if (area <= rel_area_eps * scale2) return true;
    }
    return false;
}

void BrepGraph::validate() const {
    for (const auto& adj : adjacency) {
        if (adj[0] >= faces.size() || adj[1] >= faces.size())
            throw GraphError("adjacency references missing face");
        if (adj[2] >= edges.size())
            throw GraphError("adjacency references missing edge");
        if (adj[0] == adj[1])
            throw GraphError("adjacency edge borders a face twice");
    }
    // every edge must appear in exactly one adjacency record
    std::vector<int> edge_use(edges.size(), 0);
    for (const auto& adj : adjacency) edge_use[adj[2]]++;
    for (size_t i = 0; i < edge_use.size(); ++i)
        if (edge_use[i] != 1)
            throw GraphError("edge " + std::to_string(i) + " borders " +
                             std::to_string(edge_use[i]) + " face pairs, expected 1");
    auto check_unit = [](double nx, double ny, double nz) {
        double n = std::sqrt(nx * nx + ny * ny + nz * nz);
        return std::abs(n - 1.0) < 1e-6;
    };
    for (const auto& f : faces)
        for (const auto& row : f.grid)
            for (const auto& s : row)
                if (!check_unit(s[3], s[4], s[5])) throw GraphError("non-unit face normal");
    for (const auto& e : edges)
        for (const auto& s : e.samples)
            if (!check_unit(s[3], s[4], s[5])) throw GraphError("non-unit edge tangent");
}

void write_obj(const TriMesh& mesh, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for write: " + path);
    char buf[128];
    for (const auto& v : mesh.vertices) {
        std::snprintf(buf, sizeof(buf), "v %.17g %.17g %.17g\n", v.x, v.y, v.z);
        out << buf;
    }
    for (const auto& t : mesh.triangles) {
        out << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << '\n';
    }
}

TriMesh read_obj(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open: " + path);
    TriMesh mesh;
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream ss(line);
        std::string tag;
        ss >> tag;
        if (tag == "v") {
            Vec3 v;
            ss >> v.x >> v.y >> v.z;
            mesh.vertices.push_back(v);
        } else if (tag == "f") {
            std::array<uint32_t, 3> t;
            for (int k = 0; k < 3; ++k) {
                std::string tok;
                ss >> tok;
                t[k] = uint32_t(std::stoul(tok.substr(0, tok.find('/')))) - 1;
            }
            mesh.triangles.push_back(t);
        }
    }
    return mesh;
}

}  // namespace finesdf
