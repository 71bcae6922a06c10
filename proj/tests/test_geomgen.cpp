#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

#include "finesdf/geomgen.hpp"

using namespace finesdf;

namespace {

ParamVector crashbox_params(double h, double w, double l, double t) {
    ParamVector p;
    p.family = Family::CrashBox;
    p.values = {h, w, l, t};
    return p;
}

ParamVector bottle_params(double depth, double rt, double pitch, double spacing) {
    ParamVector p;
    p.family = Family::Bottle;
    p.values = {depth, rt, pitch, spacing};
    return p;
}

// quadrature of pi * r(z)^2 over the profile, dense trapezoid per piece
double bottle_quadrature_volume(const geomgen::BottleProfile& prof) {
    double vol = 0.0;
    for (size_t b = 0; b + 1 < prof.breakpoints.size(); ++b) {
        double z0 = prof.breakpoints[b], z1 = prof.breakpoints[b + 1];
        const int n = 4000;
        double sum = 0.0;
        for (int i = 0; i <= n; ++i) {
            double z = z0 + (z1 - z0) * i / n;
            double r = prof.radius(z);
            sum += (i == 0 || i == n ? 0.5 : 1.0) * r * r;
        }
        vol += M_PI * sum * (z1 - z0) / n;
    }
    return vol;
}

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("crash box volume matches the tube formula") {
    auto [mesh, graph] = geomgen::gen_crashbox(crashbox_params(1.0, 1.0, 2.0, 0.1));
    // outer 1x1x2 minus inner 0.8x0.8x2
    CHECK(mesh.signed_volume() == doctest::Approx(0.72).epsilon(1e-9));
    CHECK(mesh.is_watertight());
    CHECK(!mesh.has_degenerate_triangles());
    CHECK_NOTHROW(graph.validate());
}

TEST_CASE("crash box volume oracle across a grid") {
    for (double h : {0.6, 1.2})
        for (double w : {0.6, 1.2})
            for (double l : {1.5, 3.0})
                for (double t : {0.02, 0.12}) {
                    auto [mesh, graph] = geomgen::gen_crashbox(crashbox_params(h, w, l, t));
                    double expected = l * (h * w - (h - 2 * t) * (w - 2 * t));
                    CHECK(mesh.signed_volume() ==
                          doctest::Approx(expected).epsilon(0.01));
                    CHECK(mesh.is_watertight());
                }
}

TEST_CASE("crash box volume increases with thickness") {
    double prev = 0.0;
    for (double t : {0.02, 0.05, 0.08, 0.12}) {
        auto [mesh, graph] = geomgen::gen_crashbox(crashbox_params(0.9, 0.9, 2.0, t));
        double v = mesh.signed_volume();
        CHECK(v > prev);
        prev = v;
    }
}

TEST_CASE("crash box rejects self-intersecting walls") {
    CHECK_THROWS_AS(geomgen::gen_crashbox(crashbox_params(0.6, 0.6, 2.0, 0.31)), InvalidParams);
    CHECK_THROWS_AS(geomgen::gen_crashbox(crashbox_params(1.0, 1.0, -1.0, 0.1)), InvalidParams);
}

TEST_CASE("crash box graph is deterministic") {
    auto [m1, g1] = geomgen::gen_crashbox(crashbox_params(0.8, 1.1, 2.2, 0.07));
    auto [m2, g2] = geomgen::gen_crashbox(crashbox_params(0.8, 1.1, 2.2, 0.07));
    REQUIRE(g1.faces.size() == g2.faces.size());
    for (size_t f = 0; f < g1.faces.size(); ++f)
        for (int i = 0; i < FacePatch::kGrid; ++i)
            for (int j = 0; j < FacePatch::kGrid; ++j)
                for (int c = 0; c < 6; ++c)
                    CHECK(g1.faces[f].grid[i][j][c] == g2.faces[f].grid[i][j][c]);
}

TEST_CASE("bottle volume matches profile quadrature within 1%") {
    for (auto p : {bottle_params(0.03, 0.25, 0.12, 0.04), bottle_params(0.01, 0.15, 0.08, 0.02),
                   bottle_params(0.05, 0.35, 0.16, 0.06)}) {
        auto [mesh, graph] = geomgen::gen_bottle(p);
        geomgen::BottleProfile prof = geomgen::make_bottle_profile(p);
        double expected = bottle_quadrature_volume(prof);
        // the 64-gon cross-section carries a known area deficit vs the circle
        double polygon_factor = 64.0 / (2.0 * M_PI) * std::sin(2.0 * M_PI / 64.0);
        CHECK(mesh.signed_volume() ==
              doctest::Approx(expected * polygon_factor).epsilon(0.01));
        CHECK(mesh.is_watertight());
        CHECK_NOTHROW(graph.validate());
    }
}

TEST_CASE("bottle zero rib thickness reduces to the smooth shoulder") {
    ParamVector p = bottle_params(0.03, 0.25, 0.12, 0.04);
    p.values[0] = 0.0;
    geomgen::BottleProfile prof = geomgen::make_bottle_profile(p);
    auto [mesh, graph] = geomgen::gen_bottle(p);
    double polygon_factor = 64.0 / (2.0 * M_PI) * std::sin(2.0 * M_PI / 64.0);
    CHECK(mesh.signed_volume() ==
          doctest::Approx(bottle_quadrature_volume(prof) * polygon_factor).epsilon(0.01));
    CHECK(mesh.is_watertight());
}

TEST_CASE("bottle rib pitch only moves vertices above the shoulder") {
    auto [m1, g1] = geomgen::gen_bottle(bottle_params(0.03, 0.25, 0.10, 0.04));
    auto [m2, g2] = geomgen::gen_bottle(bottle_params(0.03, 0.25, 0.14, 0.04));
    auto collect = [](const TriMesh& m) {
        std::set<std::array<long long, 3>> below;
        for (const auto& v : m.vertices)
            if (v.z < 0.60 - 1e-9)
                below.insert({llround(v.x * 1e9), llround(v.y * 1e9), llround(v.z * 1e9)});
        return below;
    };
    CHECK(collect(m1) == collect(m2));
}

TEST_CASE("bottle rejects too-narrow grooves") {
    // groove width = pitch - spacing = 0.005 < 2x minimum segment length
    CHECK_THROWS_AS(geomgen::gen_bottle(bottle_params(0.03, 0.25, 0.08, 0.075)),
                    TessellationError);
    CHECK_THROWS_AS(geomgen::gen_bottle(bottle_params(0.03, 0.25, 0.08, 0.09)), InvalidParams);
    CHECK_THROWS_AS(geomgen::gen_bottle(bottle_params(0.30, 0.25, 0.12, 0.04)), InvalidParams);
}

TEST_CASE("design grid sizes and split determinism") {
    auto ranges = geomgen::default_ranges(Family::CrashBox);
    DesignGrid g6 = geomgen::sample_design_grid(Family::CrashBox, 6, ranges, 0.1, 1);
    CHECK(g6.entries.size() == 1296);

    DesignGrid g2 = geomgen::sample_design_grid(Family::CrashBox, 2, ranges, 0.25, 1);
    CHECK(g2.entries.size() == 16);
    for (const auto& e : g2.entries)
        for (size_t k = 0; k < 4; ++k)
            CHECK((e.values[k] == ranges[k][0] || e.values[k] == ranges[k][1]));

    DesignGrid a = geomgen::sample_design_grid(Family::CrashBox, 3, ranges, 1.0 / 9.0, 7);
    DesignGrid b = geomgen::sample_design_grid(Family::CrashBox, 3, ranges, 1.0 / 9.0, 7);
    CHECK(a.entries.size() == 81);
    CHECK(a.train_indices.size() == 72);
    CHECK(a.test_indices.size() == 9);
    CHECK(a.train_indices == b.train_indices);
    CHECK(a.test_indices == b.test_indices);

    DesignGrid c = geomgen::sample_design_grid(Family::CrashBox, 3, ranges, 1.0 / 9.0, 8);
    CHECK(a.test_indices != c.test_indices);
}

TEST_CASE("normalization maps the family box into [-1,1]^3 and round-trips") {
    auto ranges = geomgen::default_ranges(Family::CrashBox);
    Aabb box = geomgen::family_bounds(Family::CrashBox, ranges);
    auto [mesh, graph] = geomgen::gen_crashbox(crashbox_params(1.2, 1.2, 3.0, 0.1));
    TriMesh original = mesh;
    Transform t = geomgen::normalize_geometry(mesh, graph, box);
    double maxc = 0.0;
    for (const auto& v : mesh.vertices) {
        CHECK(std::abs(v.x) <= 1.0 + 1e-12);
        CHECK(std::abs(v.y) <= 1.0 + 1e-12);
        CHECK(std::abs(v.z) <= 1.0 + 1e-12);
        maxc = std::max({maxc, std::abs(v.x), std::abs(v.y), std::abs(v.z)});
    }
    // the largest family member attains the box boundary
    CHECK(maxc == doctest::Approx(1.0).epsilon(1e-9));
    Transform inv = t.inverse();
    for (size_t i = 0; i < mesh.vertices.size(); ++i) {
        Vec3 back = inv.apply(mesh.vertices[i]);
        CHECK(back.x == doctest::Approx(original.vertices[i].x).epsilon(1e-9));
        CHECK(back.z == doctest::Approx(original.vertices[i].z).epsilon(1e-9));
    }
}

TEST_CASE("brep graph and grid JSON round trip") {
    auto [mesh, graph] = geomgen::gen_crashbox(crashbox_params(0.9, 1.0, 2.0, 0.06));
    std::string gp = tmp_path("finesdf_test_graph.json");
    geomgen::write_brep_json(graph, gp);
    BrepGraph back = geomgen::read_brep_json(gp);
    REQUIRE(back.faces.size() == graph.faces.size());
    REQUIRE(back.edges.size() == graph.edges.size());
    CHECK(back.adjacency == graph.adjacency);
    for (size_t f = 0; f < graph.faces.size(); ++f)
        CHECK(back.faces[f].grid[3][4][2] ==
              doctest::Approx(graph.faces[f].grid[3][4][2]).epsilon(1e-15));

    auto ranges = geomgen::default_ranges(Family::Bottle);
    DesignGrid grid = geomgen::sample_design_grid(Family::Bottle, 2, ranges, 0.25, 3);
    std::string dp = tmp_path("finesdf_test_grid.json");
    geomgen::write_grid_json(grid, dp);
    DesignGrid gback = geomgen::read_grid_json(dp);
    CHECK(gback.family == grid.family);
    CHECK(gback.train_indices == grid.train_indices);
    CHECK(gback.test_indices == grid.test_indices);
    REQUIRE(gback.entries.size() == grid.entries.size());
    for (size_t i = 0; i < grid.entries.size(); ++i)
        CHECK(gback.entries[i].values == grid.entries[i].values);
    std::filesystem::remove(gp);
    std::filesystem::remove(dp);
}

TEST_CASE("obj round trip") {
    auto [mesh, graph] = geomgen::gen_crashbox(crashbox_params(1.0, 1.0, 2.0, 0.1));
    std::string path = tmp_path("finesdf_test_mesh.obj");
    write_obj(mesh, path);
    TriMesh back = read_obj(path);
    REQUIRE(back.vertices.size() == mesh.vertices.size());
    REQUIRE(back.triangles.size() == mesh.triangles.size());
    CHECK(back.signed_volume() == doctest::Approx(mesh.signed_volume()).epsilon(1e-12));
    std::filesystem::remove(path);
}
