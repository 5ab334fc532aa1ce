#pragma once

// Parametric cartoon face shared by the synthetic clip renderer and the toy
// morphable model. Every vertex position is an affine function of the shape
// parameters, so finite differences of vertices() give an exact linear basis.
//
// Coordinates are face-local model units: x right, y down, both normalized by
// the frame width, origin at the frame center; z is relative depth, negative
// toward the camera.

#include <array>
#include <vector>

namespace hmdr::face {

inline constexpr int kLandmarkCount = 478;
inline constexpr int kVertexCount = 1220;
inline constexpr int kIdentityCount = 20;
inline constexpr int kExpressionCount = 10;

struct Vec3 {
    double x = 0, y = 0, z = 0;
    bool operator==(const Vec3&) const = default;
};

enum Identity : int {
    FaceHalfWidth,
    FaceHalfHeight,
    Chin,
    Cheek,
    EyeSeparation,
    EyeHeight,
    EyeHalfWidth,
    EyeHalfHeight,
    IrisRadius,
    BrowGap,
    BrowHalfLength,
    BrowArch,
    BrowThickness,
    NoseLength,
    NoseHalfWidth,
    MouthHeight,
    MouthHalfWidth,
    UpperLip,
    LowerLip,
    Depth,
};

enum Expression : int {
    CloseRightEye,
    CloseLeftEye,
    RaiseRightBrow,
    RaiseLeftBrow,
    Furrow,
    MouthOpen,
    Smile,
    MouthWide,
    JawDrop,
    Gaze,
};

struct FaceShape {
    std::array<double, kIdentityCount> identity{};
    std::array<double, kExpressionCount> expression{};

    /// Average identity, neutral expression.
    static FaceShape base();
    /// Per-parameter standard deviation used when sampling identities.
    static const std::array<double, kIdentityCount>& identity_spread();
};

/// In-plane head pose: rotation by `roll` radians then translation.
struct Pose2 {
    double roll = 0, tx = 0, ty = 0;
};

/// Index range into the 478-landmark layout. "Right" is the subject's right
/// (image left, x < 0).
struct Group {
    int begin = 0;
    int count = 0;
    int at(int i) const { return begin + i; }
};

struct Layout {
    Group face_oval;   // 36, angle 0 at +x, clockwise on screen
    Group right_eye;   // 16 contour points, k * 2pi/16; 1..7 lower lid, 9..15 upper lid
    Group left_eye;    // 16
    Group right_iris;  // center, +x, +y, -x, -y
    Group left_iris;   // 5
    Group right_brow;  // 5 upper edge then 5 lower edge, inner to outer order by x
    Group left_brow;   // 10
    Group nose;        // 6 bridge (top to tip) then 6 base (left to right)
    Group outer_lips;  // 20
    Group inner_lips;  // 16
    Group fill;        // remaining landmarks
    // Per-vertex position on the unit face disk; drives the depth profile and
    // places fill vertices.
    std::vector<std::array<double, 2>> anchor;
};

const Layout& layout();

/// All kVertexCount vertices; the first kLandmarkCount are the landmarks.
std::vector<Vec3> vertices(const FaceShape& shape);

Vec3 apply(const Pose2& pose, const Vec3& p);
/// Inverse of apply() restricted to the image plane.
void unapply(const Pose2& pose, double x, double y, double& lx, double& ly);

/// Canonical head-mounted-display silhouette in normalized image coordinates.
bool canonical_hmd_contains(double x_img, double y_img);

/// Signed distance to the canonical HMD outline (negative inside).
double canonical_hmd_distance(double x_img, double y_img);

enum class Region : unsigned char {
    Background,
    Skin,
    Nose,
    Brow,
    Sclera,
    Iris,
    Pupil,
    Lips,
    MouthInterior,
};

/// Point classification against the analytic feature outlines of one shape.
class Outline {
public:
    explicit Outline(const FaceShape& shape);
    Region classify(double x, double y) const;
    /// Skin shading factor in [0.75, 1] from the ellipsoidal depth profile.
    double shading(double x, double y) const;

private:
    FaceShape shape_;
    std::vector<double> radius_; // face boundary radius per polar angle bin
    std::vector<Vec3> outer_lips_;
    std::vector<Vec3> inner_lips_;
};

} // namespace hmdr::face
