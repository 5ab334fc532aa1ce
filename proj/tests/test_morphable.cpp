#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "gradcheck.hpp"
#include "hmdr/dataio.hpp"
#include "hmdr/error.hpp"
#include "hmdr/morphable.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

using namespace hmdr;
namespace fs = std::filesystem;

namespace {

FaceParams random_params(const MorphableModel& m, nn::Rng& rng, bool rigid)
{
    FaceParams p = FaceParams::neutral(m.id_rank(), m.exp_rank());
    for (double& c : p.id_coeffs) {
        c = rng.uniform(-0.05, 0.05);
    }
    for (double& c : p.exp_coeffs) {
        c = rng.uniform(-0.05, 0.05);
    }
    if (rigid) {
        // Rotation from a random unit quaternion.
        double q[4];
        double n = 0;
        for (double& v : q) {
            v = rng.normal();
            n += v * v;
        }
        n = std::sqrt(n);
        const double w = q[0] / n, x = q[1] / n, y = q[2] / n, z = q[3] / n;
        p.pose = {1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w), rng.uniform(-1, 1),
                  2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w), rng.uniform(-1, 1),
                  2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y), rng.uniform(-1, 1)};
    }
    return p;
}

double dist(const Point3& a, const Point3& b) { return std::hypot(a.x - b.x, a.y - b.y, a.z - b.z); }

} // namespace

TEST_CASE("toy model structure")
{
    const auto& m = MorphableModel::toy();
    CHECK(m.vertex_count() == 1220);
    CHECK(m.id_rank() == 20);
    CHECK(m.exp_rank() == 10);
    CHECK(m.param_count() == 42);
    for (const Tensor* b : {&m.identity_basis, &m.expression_basis}) {
        const int k = b->dim(1);
        for (int c = 0; c < k; ++c) {
            double n = 0;
            for (int r = 0; r < b->dim(0); ++r) {
                n += (*b)[static_cast<std::size_t>(r) * k + c] * (*b)[static_cast<std::size_t>(r) * k + c];
            }
            CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
    CHECK(m.faces.size() > 2000);
    for (const auto& f : m.faces) {
        for (int k : f) {
            CHECK(k >= 0);
            CHECK(k < 1220);
        }
    }
    CHECK_NOTHROW(m.validate());
}

TEST_CASE("zero coefficients under identity pose give the mean shape exactly")
{
    const auto& m = MorphableModel::toy();
    const FaceMesh mesh = reconstruct_mesh(m, FaceParams::neutral(20, 10));
    for (int i = 0; i < m.vertex_count(); ++i) {
        CHECK(mesh.vertices[i].x == m.mean_shape[i * 3]);
        CHECK(mesh.vertices[i].y == m.mean_shape[i * 3 + 1]);
        CHECK(mesh.vertices[i].z == m.mean_shape[i * 3 + 2]);
    }
    CHECK_THROWS_AS(reconstruct_mesh(m, FaceParams::neutral(19, 10)), InvalidInput);
}

TEST_CASE("reconstruction is linear and additive in the coefficients")
{
    const auto& m = MorphableModel::toy();
    nn::Rng rng(1);
    const FaceParams c1 = random_params(m, rng, false), c2 = random_params(m, rng, false);
    FaceParams sum = c1, scaled = c1;
    for (std::size_t k = 0; k < 20; ++k) {
        sum.id_coeffs[k] += c2.id_coeffs[k];
        scaled.id_coeffs[k] *= 2.5;
    }
    for (std::size_t k = 0; k < 10; ++k) {
        sum.exp_coeffs[k] += c2.exp_coeffs[k];
        scaled.exp_coeffs[k] *= 2.5;
    }
    const FaceMesh m0 = reconstruct_mesh(m, FaceParams::neutral(20, 10));
    const FaceMesh m1 = reconstruct_mesh(m, c1), m2 = reconstruct_mesh(m, c2);
    const FaceMesh ms = reconstruct_mesh(m, sum), ma = reconstruct_mesh(m, scaled);
    for (int i = 0; i < m.vertex_count(); ++i) {
        CHECK(std::abs((ms.vertices[i].x - m0.vertices[i].x) - (m1.vertices[i].x - m0.vertices[i].x) -
                       (m2.vertices[i].x - m0.vertices[i].x)) < 1e-12);
        CHECK(std::abs((ma.vertices[i].z - m0.vertices[i].z) - 2.5 * (m1.vertices[i].z - m0.vertices[i].z)) < 1e-12);
    }
}

TEST_CASE("three-vertex hand model")
{
    MorphableModel m;
    m.mean_shape = Tensor({3, 3}, {0, 0, 0, 1, 0, 0, 0, 1, 0});
    m.identity_basis = Tensor({9, 1}, {0.6, 0, 0, 0, 0, 0, 0, 0, 0.8});
    m.expression_basis = Tensor({9, 0});
    FaceParams p = FaceParams::neutral(1, 0);
    p.id_coeffs[0] = 2.0;
    const FaceMesh mesh = reconstruct_mesh(m, p);
    CHECK(std::abs(mesh.vertices[0].x - 1.2) < 1e-12);
    CHECK(mesh.vertices[0].y == 0.0);
    CHECK(mesh.vertices[1] == Point3{1, 0, 0});
    CHECK(std::abs(mesh.vertices[2].z - 1.6) < 1e-12);
    CHECK(mesh.vertices[2].y == 1.0);
}

TEST_CASE("rigid poses preserve pairwise distances")
{
    const auto& m = MorphableModel::toy();
    nn::Rng rng(2);
    for (int trial = 0; trial < 5; ++trial) {
        FaceParams p = random_params(m, rng, true);
        FaceParams ident = p;
        ident.pose = FaceParams{}.pose;
        const FaceMesh a = reconstruct_mesh(m, p), b = reconstruct_mesh(m, ident);
        for (int k = 0; k < 200; ++k) {
            const int i = static_cast<int>(rng.bits() % 1220), j = static_cast<int>(rng.bits() % 1220);
            CHECK(std::abs(dist(a.vertices[i], a.vertices[j]) - dist(b.vertices[i], b.vertices[j])) < 1e-9);
        }
    }
}

TEST_CASE("model parameters reproduce the synthetic face exactly")
{
    const auto& m = MorphableModel::toy();
    const SyntheticClip clip = generate_synthetic_clip(SyntheticFaceSpec{}, 4, 5);
    for (int t = 0; t < 4; ++t) {
        const FaceParams p = params_from_shape(m, clip.shapes[t], clip.poses[t]);
        const FaceMesh mesh = reconstruct_mesh(m, p);
        const auto raw = face::vertices(clip.shapes[t]);
        for (int i = 0; i < m.vertex_count(); ++i) {
            const auto expect = face::apply(clip.poses[t], raw[i]);
            CHECK(dist(mesh.vertices[i], expect) < 1e-12);
        }
        const LandmarkSet lm = mesh_landmarks(m, mesh);
        for (int i = 0; i < 478; ++i) {
            CHECK(dist(lm.points[i], clip.landmarks[t].points[i]) < 1e-12);
        }
    }
}

TEST_CASE("mesh_landmarks selection and equivariance")
{
    MorphableModel m = MorphableModel::toy();
    const FaceMesh mean = reconstruct_mesh(m, FaceParams::neutral(20, 10));
    const LandmarkSet canonical = mesh_landmarks(m, mean);
    for (int i = 0; i < 478; ++i) {
        CHECK(canonical.points[i] == Point3{m.mean_shape[i * 3] + 0.5, m.mean_shape[i * 3 + 1] + 0.5, m.mean_shape[i * 3 + 2]});
    }
    FaceParams shifted = FaceParams::neutral(20, 10);
    shifted.pose[3] = 0.1;
    shifted.pose[7] = -0.05;
    shifted.pose[11] = 0.2;
    const LandmarkSet moved = mesh_landmarks(m, reconstruct_mesh(m, shifted));
    for (int i = 0; i < 478; ++i) {
        CHECK(std::abs(moved.points[i].x - canonical.points[i].x - 0.1) < 1e-12);
        CHECK(std::abs(moved.points[i].y - canonical.points[i].y + 0.05) < 1e-12);
        CHECK(std::abs(moved.points[i].z - canonical.points[i].z - 0.2) < 1e-12);
    }
    m.landmark_indices.assign(478, 0);
    const LandmarkSet zero = mesh_landmarks(m, mean);
    for (const auto& p : zero.points) {
        CHECK(p == zero.points[0]);
    }
}

TEST_CASE("differentiable reconstruction matches and passes finite differences")
{
    const auto& m = MorphableModel::toy();
    nn::Rng rng(3);
    const FaceParams p1 = random_params(m, rng, true), p2 = random_params(m, rng, false);
    std::vector<double> flat = p1.flatten();
    const auto f2 = p2.flatten();
    flat.insert(flat.end(), f2.begin(), f2.end());
    ag::Var params = ag::Var::parameter(Tensor({2, 42}, flat));
    const ag::Var lm = mesh_landmarks(m, reconstruct_vertices(m, params));
    REQUIRE(lm.shape() == Shape{2, 478, 3});
    const LandmarkSet ref = mesh_landmarks(m, reconstruct_mesh(m, p2));
    for (int i = 0; i < 478; ++i) {
        CHECK(std::abs(lm.value()[(478 + i) * 3] - ref.points[i].x) < 1e-12);
        CHECK(std::abs(lm.value()[(478 + i) * 3 + 2] - ref.points[i].z) < 1e-12);
    }
    const Tensor weights = testing::random_tensor({2, 478, 3}, rng);
    auto r = testing::grad_check(
        [&] { return ag::sum(ag::mul(mesh_landmarks(m, reconstruct_vertices(m, params)), ag::Var::constant(weights))); },
        {params}, 1e-6, 84);
    CHECK(r.relative_error < 1e-4);
}

TEST_CASE("mesh files")
{
    const fs::path path = fs::temp_directory_path() / "hmdr_test_mesh.obj";
    nn::Rng rng(4);
    FaceMesh mesh;
    for (int i = 0; i < 50; ++i) {
        mesh.vertices.push_back({rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)});
    }
    for (int i = 0; i < 20; ++i) {
        mesh.faces.push_back({i, i + 1, i + 2});
    }
    save_mesh(mesh, path);
    const FaceMesh back = load_mesh(path);
    REQUIRE(back.vertices.size() == 50);
    CHECK(back.faces == mesh.faces);
    double worst = 0;
    for (int i = 0; i < 50; ++i) {
        worst = std::max({worst, std::abs(back.vertices[i].x - mesh.vertices[i].x),
                          std::abs(back.vertices[i].y - mesh.vertices[i].y), std::abs(back.vertices[i].z - mesh.vertices[i].z)});
    }
    CHECK(worst <= 5e-7);

    CHECK_THROWS_AS(save_mesh(FaceMesh{}, path), InvalidInput);

    const FaceMesh tri{{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}}, {{0, 1, 2}}};
    save_mesh(tri, path);
    std::ifstream in(path);
    int v = 0, f = 0;
    for (std::string line; std::getline(in, line);) {
        v += line.rfind("v ", 0) == 0;
        f += line.rfind("f ", 0) == 0;
    }
    CHECK(v == 3);
    CHECK(f == 1);

    {
        std::ofstream out(path);
        out << "v 0 0\n";
    }
    CHECK_THROWS_AS(load_mesh(path), FormatError);
    {
        std::ofstream out(path);
        out << "v 0 0 0\nf 1 2 3\n";
    }
    CHECK_THROWS_AS(load_mesh(path), FormatError);
    {
        std::ofstream out(path);
    }
    CHECK_THROWS_AS(load_mesh(path), FormatError);
    fs::remove(path);
}

TEST_CASE("model asset round trip")
{
    const fs::path path = fs::temp_directory_path() / "hmdr_test_model.txt";
    const auto& m = MorphableModel::toy();
    save_model(m, path);
    const MorphableModel back = load_model(path);
    CHECK(back.mean_shape == m.mean_shape);
    CHECK(back.identity_basis == m.identity_basis);
    CHECK(back.expression_basis == m.expression_basis);
    CHECK(back.faces == m.faces);
    CHECK(back.landmark_indices == m.landmark_indices);
    CHECK(back.identity_scale == m.identity_scale);
    {
        std::ofstream out(path);
        out << "hmdr-morphable 3 1 0 0\n0 0 0\n";
    }
    CHECK_THROWS_AS(load_model(path), FormatError);
    fs::remove(path);
}

TEST_CASE("delaunay triangulation has empty circumcircles")
{
    CHECK(delaunay({{0, 0}, {1, 0}, {1, 1}, {0, 1.1}}).size() == 2);
    nn::Rng rng(6);
    std::vector<std::array<double, 2>> pts;
    for (int i = 0; i < 150; ++i) {
        pts.push_back({rng.uniform(), rng.uniform()});
    }
    const auto tris = delaunay(pts);
    CHECK(tris.size() > 250);
    int violations = 0;
    for (const auto& t : tris) {
        const auto &A = pts[t[0]], &B = pts[t[1]], &C = pts[t[2]];
        const double d = 2.0 * (A[0] * (B[1] - C[1]) + B[0] * (C[1] - A[1]) + C[0] * (A[1] - B[1]));
        const double a2 = A[0] * A[0] + A[1] * A[1], b2 = B[0] * B[0] + B[1] * B[1], c2 = C[0] * C[0] + C[1] * C[1];
        const double ux = (a2 * (B[1] - C[1]) + b2 * (C[1] - A[1]) + c2 * (A[1] - B[1])) / d;
        const double uy = (a2 * (C[0] - B[0]) + b2 * (A[0] - C[0]) + c2 * (B[0] - A[0])) / d;
        const double r2 = (A[0] - ux) * (A[0] - ux) + (A[1] - uy) * (A[1] - uy);
        for (std::size_t i = 0; i < pts.size(); ++i) {
            if (static_cast<int>(i) == t[0] || static_cast<int>(i) == t[1] || static_cast<int>(i) == t[2]) {
                continue;
            }
            violations += (pts[i][0] - ux) * (pts[i][0] - ux) + (pts[i][1] - uy) * (pts[i][1] - uy) < r2 * (1 - 1e-9);
        }
    }
    CHECK(violations == 0);
}
