#include "hmdr/morphable.hpp"

#include "hmdr/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace hmdr {

namespace fs = std::filesystem;

void MorphableModel::validate() const
{
    const int v = vertex_count();
    if (v == 0 || mean_shape.rank() != 2 || mean_shape.dim(1) != 3) {
        throw InvalidInput("MorphableModel: mean shape must be [V, 3]");
    }
    for (const Tensor* b : {&identity_basis, &expression_basis}) {
        if (b->rank() != 2 || b->dim(0) != v * 3) {
            throw InvalidInput("MorphableModel: basis must be [V*3, K]");
        }
    }
    for (const auto& f : faces) {
        for (int k : f) {
            if (k < 0 || k >= v) {
                throw InvalidInput("MorphableModel: triangle index out of range");
            }
        }
    }
    if (static_cast<int>(landmark_indices.size()) != face::kLandmarkCount) {
        throw InvalidInput("MorphableModel: expected 478 landmark indices");
    }
    for (int k : landmark_indices) {
        if (k < 0 || k >= v) {
            throw InvalidInput("MorphableModel: landmark index out of range");
        }
    }
}

namespace {

Tensor flatten_vertices(const std::vector<face::Vec3>& v)
{
    Tensor t({static_cast<int>(v.size()), 3});
    for (std::size_t i = 0; i < v.size(); ++i) {
        t[i * 3] = v[i].x;
        t[i * 3 + 1] = v[i].y;
        t[i * 3 + 2] = v[i].z;
    }
    return t;
}

// Column k of the basis is the unit-normalized vertex displacement produced
// by a unit change of one shape parameter; vertices are affine in every
// parameter, so this is exact.
template <std::size_t K, typename Bump>
Tensor build_basis(const Tensor& mean, std::vector<double>& scale, Bump bump)
{
    const int rows = static_cast<int>(mean.size());
    Tensor basis({rows, static_cast<int>(K)});
    scale.assign(K, 0.0);
    for (std::size_t k = 0; k < K; ++k) {
        face::FaceShape s = face::FaceShape::base();
        bump(s, k);
        const Tensor moved = flatten_vertices(face::vertices(s));
        double norm = 0.0;
        for (int r = 0; r < rows; ++r) {
            const double d = moved[r] - mean[r];
            norm += d * d;
        }
        norm = std::sqrt(norm);
        scale[k] = norm;
        for (int r = 0; r < rows; ++r) {
            basis[static_cast<std::size_t>(r) * K + k] = (moved[r] - mean[r]) / norm;
        }
    }
    return basis;
}

MorphableModel build_toy()
{
    MorphableModel m;
    const auto base = face::vertices(face::FaceShape::base());
    m.mean_shape = flatten_vertices(base);
    m.identity_basis = build_basis<face::kIdentityCount>(m.mean_shape, m.identity_scale,
                                                         [](face::FaceShape& s, std::size_t k) { s.identity[k] += 1.0; });
    m.expression_basis = build_basis<face::kExpressionCount>(
        m.mean_shape, m.expression_scale, [](face::FaceShape& s, std::size_t k) { s.expression[k] += 1.0; });
    std::vector<std::array<double, 2>> xy;
    for (const auto& p : base) {
        xy.push_back({p.x, p.y});
    }
    m.faces = delaunay(xy);
    for (int i = 0; i < face::kLandmarkCount; ++i) {
        m.landmark_indices.push_back(i);
    }
    m.validate();
    return m;
}

} // namespace

const MorphableModel& MorphableModel::toy()
{
    static const MorphableModel model = build_toy();
    return model;
}

FaceParams FaceParams::neutral(int id_rank, int exp_rank)
{
    FaceParams p;
    p.id_coeffs.assign(static_cast<std::size_t>(id_rank), 0.0);
    p.exp_coeffs.assign(static_cast<std::size_t>(exp_rank), 0.0);
    return p;
}

std::vector<double> FaceParams::flatten() const
{
    std::vector<double> out(pose.begin(), pose.end());
    out.insert(out.end(), id_coeffs.begin(), id_coeffs.end());
    out.insert(out.end(), exp_coeffs.begin(), exp_coeffs.end());
    return out;
}

FaceParams FaceParams::unflatten(const std::vector<double>& flat, int id_rank, int exp_rank)
{
    if (static_cast<int>(flat.size()) != 12 + id_rank + exp_rank) {
        throw InvalidInput("FaceParams::unflatten: expected " + std::to_string(12 + id_rank + exp_rank) +
                           " values, got " + std::to_string(flat.size()));
    }
    FaceParams p;
    std::copy(flat.begin(), flat.begin() + 12, p.pose.begin());
    p.id_coeffs.assign(flat.begin() + 12, flat.begin() + 12 + id_rank);
    p.exp_coeffs.assign(flat.begin() + 12 + id_rank, flat.end());
    return p;
}

bool FaceParams::finite() const
{
    const auto f = flatten();
    return std::all_of(f.begin(), f.end(), [](double v) { return std::isfinite(v); });
}

FaceParams params_from_shape(const MorphableModel& model, const face::FaceShape& shape, const face::Pose2& pose)
{
    if (model.id_rank() != face::kIdentityCount || model.exp_rank() != face::kExpressionCount ||
        model.identity_scale.size() != face::kIdentityCount) {
        throw InvalidInput("params_from_shape: model is not the procedural face model");
    }
    const face::FaceShape base = face::FaceShape::base();
    FaceParams p = FaceParams::neutral(model.id_rank(), model.exp_rank());
    for (int k = 0; k < face::kIdentityCount; ++k) {
        p.id_coeffs[k] = (shape.identity[k] - base.identity[k]) * model.identity_scale[k];
    }
    for (int k = 0; k < face::kExpressionCount; ++k) {
        p.exp_coeffs[k] = (shape.expression[k] - base.expression[k]) * model.expression_scale[k];
    }
    const double c = std::cos(pose.roll), s = std::sin(pose.roll);
    p.pose = {c, -s, 0, pose.tx, s, c, 0, pose.ty, 0, 0, 1, 0};
    return p;
}

FaceMesh reconstruct_mesh(const MorphableModel& model, const FaceParams& params)
{
    if (static_cast<int>(params.id_coeffs.size()) != model.id_rank() ||
        static_cast<int>(params.exp_coeffs.size()) != model.exp_rank()) {
        throw InvalidInput("reconstruct_mesh: coefficient lengths do not match the model ranks");
    }
    const int v = model.vertex_count();
    const int kid = model.id_rank(), kexp = model.exp_rank();
    FaceMesh mesh;
    mesh.faces = model.faces;
    mesh.vertices.resize(static_cast<std::size_t>(v));
    const auto& P = params.pose;
    for (int i = 0; i < v; ++i) {
        double q[3];
        for (int c = 0; c < 3; ++c) {
            const std::size_t r = static_cast<std::size_t>(i) * 3 + c;
            double acc = model.mean_shape[r];
            for (int k = 0; k < kid; ++k) {
                acc += model.identity_basis[r * kid + k] * params.id_coeffs[k];
            }
            for (int k = 0; k < kexp; ++k) {
                acc += model.expression_basis[r * kexp + k] * params.exp_coeffs[k];
            }
            q[c] = acc;
        }
        mesh.vertices[i] = {P[0] * q[0] + P[1] * q[1] + P[2] * q[2] + P[3],
                            P[4] * q[0] + P[5] * q[1] + P[6] * q[2] + P[7],
                            P[8] * q[0] + P[9] * q[1] + P[10] * q[2] + P[11]};
    }
    return mesh;
}

ag::Var reconstruct_vertices(const MorphableModel& model, const ag::Var& params)
{
    const int n = model.param_count();
    if (params.value().rank() != 2 || params.dim(1) != n) {
        throw InvalidInput("reconstruct_vertices: expected params [B, " + std::to_string(n) + "], got " +
                           shape_str(params.shape()));
    }
    const int rows = model.vertex_count() * 3, kid = model.id_rank(), kexp = model.exp_rank();
    Tensor combined({rows, kid + kexp});
    for (int r = 0; r < rows; ++r) {
        const std::size_t o = static_cast<std::size_t>(r) * (kid + kexp);
        for (int k = 0; k < kid; ++k) {
            combined[o + k] = model.identity_basis[static_cast<std::size_t>(r) * kid + k];
        }
        for (int k = 0; k < kexp; ++k) {
            combined[o + kid + k] = model.expression_basis[static_cast<std::size_t>(r) * kexp + k];
        }
    }
    const int b = params.dim(0);
    const ag::Var pose = ag::reshape(ag::slice(params, 1, 0, 12), {b, 3, 4});
    const ag::Var coeffs = ag::slice(params, 1, 12, n);
    const ag::Var local = ag::affine_const(combined, coeffs, model.mean_shape.reshaped({model.vertex_count() * 3}));
    return ag::apply_affine(pose, ag::reshape(local, {b, model.vertex_count(), 3}));
}

LandmarkSet mesh_landmarks(const MorphableModel& model, const FaceMesh& mesh)
{
    LandmarkSet out;
    out.points.reserve(model.landmark_indices.size());
    for (int i : model.landmark_indices) {
        if (i < 0 || i >= static_cast<int>(mesh.vertices.size())) {
            throw InvalidInput("mesh_landmarks: mesh does not belong to this model");
        }
        const auto& v = mesh.vertices[i];
        out.points.push_back({v.x + 0.5, v.y + 0.5, v.z});
    }
    return out;
}

ag::Var mesh_landmarks(const MorphableModel& model, const ag::Var& vertices)
{
    if (vertices.value().rank() != 3 || vertices.dim(1) != model.vertex_count() || vertices.dim(2) != 3) {
        throw InvalidInput("mesh_landmarks: expected vertices [B, V, 3], got " + shape_str(vertices.shape()));
    }
    const int b = vertices.dim(0), v = vertices.dim(1);
    const int n = static_cast<int>(model.landmark_indices.size());
    std::vector<int> rows;
    rows.reserve(static_cast<std::size_t>(b) * n);
    for (int k = 0; k < b; ++k) {
        for (int i : model.landmark_indices) {
            rows.push_back(k * v + i);
        }
    }
    const ag::Var picked = ag::reshape(ag::gather(ag::reshape(vertices, {b * v, 3}), rows), {b, n, 3});
    Tensor shift({b, n, 3});
    for (std::size_t i = 0; i < shift.size(); i += 3) {
        shift[i] = shift[i + 1] = 0.5;
    }
    return ag::add(picked, ag::Var::constant(shift));
}

void save_mesh(const FaceMesh& mesh, const fs::path& path)
{
    if (mesh.vertices.empty()) {
        throw InvalidInput("save_mesh: empty mesh");
    }
    std::ofstream out(path);
    if (!out) {
        throw FormatError(path.string(), "cannot open for writing");
    }
    char buf[128];
    for (const auto& v : mesh.vertices) {
        std::snprintf(buf, sizeof buf, "v %.6f %.6f %.6f\n", v.x, v.y, v.z);
        out << buf;
    }
    for (const auto& f : mesh.faces) {
        out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
    }
}

FaceMesh load_mesh(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw FormatError(path.string(), "cannot open mesh");
    }
    FaceMesh mesh;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') {
            continue;
        }
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "v") {
            Point3 p;
            if (!(ls >> p.x >> p.y >> p.z)) {
                throw FormatError(path.string(), "malformed vertex on line " + std::to_string(lineno));
            }
            mesh.vertices.push_back(p);
        } else if (tag == "f") {
            Triangle t;
            for (int& k : t) {
                std::string tok;
                if (!(ls >> tok)) {
                    throw FormatError(path.string(), "malformed face on line " + std::to_string(lineno));
                }
                k = std::atoi(tok.c_str()) - 1;
            }
            mesh.faces.push_back(t);
        } else {
            throw FormatError(path.string(), "unknown record '" + tag + "' on line " + std::to_string(lineno));
        }
    }
    if (mesh.vertices.empty()) {
        throw FormatError(path.string(), "mesh has no vertices");
    }
    for (const auto& f : mesh.faces) {
        for (int k : f) {
            if (k < 0 || k >= static_cast<int>(mesh.vertices.size())) {
                throw FormatError(path.string(), "face references a missing vertex");
            }
        }
    }
    return mesh;
}

void save_model(const MorphableModel& model, const fs::path& path)
{
    model.validate();
    std::ofstream out(path);
    if (!out) {
        throw FormatError(path.string(), "cannot open for writing");
    }
    out.precision(17);
    out << "hmdr-morphable " << model.vertex_count() << ' ' << model.id_rank() << ' ' << model.exp_rank() << ' '
        << model.faces.size() << '\n';
    auto dump = [&](const auto& v) {
        for (std::size_t i = 0; i < v.size(); ++i) {
            out << v[i] << (i + 1 == v.size() ? '\n' : ' ');
        }
    };
    dump(model.mean_shape.vec());
    dump(model.identity_basis.vec());
    dump(model.expression_basis.vec());
    for (const auto& f : model.faces) {
        out << f[0] << ' ' << f[1] << ' ' << f[2] << '\n';
    }
    for (std::size_t i = 0; i < model.landmark_indices.size(); ++i) {
        out << model.landmark_indices[i] << (i + 1 == model.landmark_indices.size() ? '\n' : ' ');
    }
    dump(model.identity_scale);
    dump(model.expression_scale);
}

MorphableModel load_model(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw FormatError(path.string(), "cannot open model");
    }
    std::string magic;
    int v = 0, kid = 0, kexp = 0;
    std::size_t nf = 0;
    if (!(in >> magic >> v >> kid >> kexp >> nf) || magic != "hmdr-morphable" || v <= 0 || kid < 0 || kexp < 0) {
        throw FormatError(path.string(), "bad model header");
    }
    auto read = [&](std::size_t n) {
        std::vector<double> out(n);
        for (double& x : out) {
            if (!(in >> x)) {
                throw FormatError(path.string(), "truncated model data");
            }
        }
        return out;
    };
    MorphableModel m;
    m.mean_shape = Tensor({v, 3}, read(static_cast<std::size_t>(v) * 3));
    m.identity_basis = Tensor({v * 3, kid}, read(static_cast<std::size_t>(v) * 3 * kid));
    m.expression_basis = Tensor({v * 3, kexp}, read(static_cast<std::size_t>(v) * 3 * kexp));
    m.faces.resize(nf);
    for (auto& f : m.faces) {
        if (!(in >> f[0] >> f[1] >> f[2])) {
            throw FormatError(path.string(), "truncated face list");
        }
    }
    m.landmark_indices.resize(face::kLandmarkCount);
    for (int& k : m.landmark_indices) {
        if (!(in >> k)) {
            throw FormatError(path.string(), "truncated landmark indices");
        }
    }
    m.identity_scale = read(static_cast<std::size_t>(kid));
    m.expression_scale = read(static_cast<std::size_t>(kexp));
    try {
        m.validate();
    } catch (const InvalidInput& e) {
        throw FormatError(path.string(), e.what());
    }
    return m;
}

std::vector<Triangle> delaunay(const std::vector<std::array<double, 2>>& pts)
{
    struct Tri {
        int a, b, c;
        double cx, cy, r2;
    };
    const int n = static_cast<int>(pts.size());
    if (n < 3) {
        return {};
    }
    double minx = pts[0][0], maxx = minx, miny = pts[0][1], maxy = miny;
    for (const auto& p : pts) {
        minx = std::min(minx, p[0]);
        maxx = std::max(maxx, p[0]);
        miny = std::min(miny, p[1]);
        maxy = std::max(maxy, p[1]);
    }
    const double span = std::max(maxx - minx, maxy - miny) * 20.0;
    const double mx = 0.5 * (minx + maxx), my = 0.5 * (miny + maxy);
    std::vector<std::array<double, 2>> all = pts;
    all.push_back({mx - span, my - span});
    all.push_back({mx + span, my - span});
    all.push_back({mx, my + span});

    auto make = [&](int a, int b, int c) {
        const auto &A = all[a], &B = all[b], &C = all[c];
        const double d = 2.0 * (A[0] * (B[1] - C[1]) + B[0] * (C[1] - A[1]) + C[0] * (A[1] - B[1]));
        const double a2 = A[0] * A[0] + A[1] * A[1], b2 = B[0] * B[0] + B[1] * B[1], c2 = C[0] * C[0] + C[1] * C[1];
        const double ux = (a2 * (B[1] - C[1]) + b2 * (C[1] - A[1]) + c2 * (A[1] - B[1])) / d;
        const double uy = (a2 * (C[0] - B[0]) + b2 * (A[0] - C[0]) + c2 * (B[0] - A[0])) / d;
        return Tri{a, b, c, ux, uy, (A[0] - ux) * (A[0] - ux) + (A[1] - uy) * (A[1] - uy)};
    };

    std::vector<Tri> tris = {make(n, n + 1, n + 2)};
    for (int i = 0; i < n; ++i) {
        const auto& p = all[i];
        std::map<std::pair<int, int>, int> edges;
        std::vector<Tri> keep;
        keep.reserve(tris.size() + 2);
        for (const auto& t : tris) {
            const double dx = p[0] - t.cx, dy = p[1] - t.cy;
            if (dx * dx + dy * dy < t.r2) {
                for (auto e : {std::pair{t.a, t.b}, std::pair{t.b, t.c}, std::pair{t.c, t.a}}) {
                    ++edges[{std::min(e.first, e.second), std::max(e.first, e.second)}];
                }
            } else {
                keep.push_back(t);
            }
        }
        for (const auto& [e, count] : edges) {
            if (count == 1) {
                keep.push_back(make(e.first, e.second, i));
            }
        }
        tris = std::move(keep);
    }
    std::vector<Triangle> out;
    for (const auto& t : tris) {
        if (t.a >= n || t.b >= n || t.c >= n) {
            continue;
        }
        // Counter-clockwise on screen (y down means clockwise in math axes).
        const auto &A = all[t.a], &B = all[t.b], &C = all[t.c];
        const double cross = (B[0] - A[0]) * (C[1] - A[1]) - (B[1] - A[1]) * (C[0] - A[0]);
        out.push_back(cross > 0 ? Triangle{t.a, t.b, t.c} : Triangle{t.a, t.c, t.b});
    }
    std::sort(out.begin(), out.end());
    return out;
}

} // namespace hmdr
