#pragma once

#include "hmdr/autograd.hpp"
#include "hmdr/face_geometry.hpp"
#include "hmdr/landmarks.hpp"

#include <array>
#include <filesystem>
#include <vector>

namespace hmdr {

using Triangle = std::array<int, 3>;

/// Linear face model: vertices = pose * (mean + B_id c_id + B_exp c_exp).
/// Bases are stored [V*3, K] with unit-norm columns.
struct MorphableModel {
    Tensor mean_shape;       // [V, 3]
    Tensor identity_basis;   // [V*3, K_id]
    Tensor expression_basis; // [V*3, K_exp]
    std::vector<Triangle> faces;
    std::vector<int> landmark_indices; // 478 vertex indices
    // Coefficient per unit change of the generating shape parameter; only
    // meaningful for the procedural model.
    std::vector<double> identity_scale;
    std::vector<double> expression_scale;

    int vertex_count() const { return mean_shape.empty() ? 0 : mean_shape.dim(0); }
    int id_rank() const { return identity_basis.empty() ? 0 : identity_basis.dim(1); }
    int exp_rank() const { return expression_basis.empty() ? 0 : expression_basis.dim(1); }
    /// 12 + K_id + K_exp
    int param_count() const { return 12 + id_rank() + exp_rank(); }

    /// Throws InvalidInput when shapes or indices are inconsistent.
    void validate() const;

    /// Procedural model over the synthetic face geometry (V = 1220,
    /// K_id = 20, K_exp = 10). Built once and shared.
    static const MorphableModel& toy();
};

struct FaceParams {
    std::array<double, 12> pose{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0}; // row-major 3x4
    std::vector<double> id_coeffs;
    std::vector<double> exp_coeffs;

    static FaceParams neutral(int id_rank, int exp_rank);
    /// Flat layout [pose(12) | id | exp].
    std::vector<double> flatten() const;
    static FaceParams unflatten(const std::vector<double>& flat, int id_rank, int exp_rank);
    bool finite() const;

    bool operator==(const FaceParams&) const = default;
};

struct FaceMesh {
    std::vector<Point3> vertices;
    std::vector<Triangle> faces;

    bool operator==(const FaceMesh&) const = default;
};

/// Exact parameters of a synthetic face under the toy model.
FaceParams params_from_shape(const MorphableModel& model, const face::FaceShape& shape, const face::Pose2& pose);

FaceMesh reconstruct_mesh(const MorphableModel& model, const FaceParams& params);
/// Batched differentiable form: params [B, 12 + K_id + K_exp] -> vertices [B, V, 3].
ag::Var reconstruct_vertices(const MorphableModel& model, const ag::Var& params);

/// Landmark vertices mapped to normalized image coordinates (x + 1/2, y + 1/2, z).
LandmarkSet mesh_landmarks(const MorphableModel& model, const FaceMesh& mesh);
/// Batched differentiable form: vertices [B, V, 3] -> [B, 478, 3].
ag::Var mesh_landmarks(const MorphableModel& model, const ag::Var& vertices);

/// Wavefront-style text: "v x y z" lines with 6 decimals, then "f a b c" (1-based).
void save_mesh(const FaceMesh& mesh, const std::filesystem::path& path);
FaceMesh load_mesh(const std::filesystem::path& path);

/// Text asset: header line "hmdr-morphable V K_id K_exp F", then the arrays.
void save_model(const MorphableModel& model, const std::filesystem::path& path);
MorphableModel load_model(const std::filesystem::path& path);

/// Delaunay triangulation (Bowyer-Watson) of 2D points.
std::vector<Triangle> delaunay(const std::vector<std::array<double, 2>>& points);

} // namespace hmdr
