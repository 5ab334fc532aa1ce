#include "hmdr/face_geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace hmdr::face {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr int kDense = 216;

// Rounded rectangle in image coordinates.
constexpr double kHmdX0 = 0.14, kHmdX1 = 0.86, kHmdY0 = 0.27, kHmdY1 = 0.49, kHmdCorner = 0.05;

double pos(double v) { return v > 0 ? v : 0.0; }

struct Eye {
    double cx, cy, rx, ry;
};

Eye eye(const FaceShape& s, int side)
{
    const auto& p = s.identity;
    const auto& e = s.expression;
    const double close = side < 0 ? e[CloseRightEye] : e[CloseLeftEye];
    return {side * p[EyeSeparation], p[EyeHeight], p[EyeHalfWidth], p[EyeHalfHeight] - close};
}

struct Brow {
    double bx, by, half, arch, thick;
    int side;
    double x(double q) const { return bx + side * q * half; }
    double mid(double q) const { return by - arch * (1.0 - q * q); }
};

Brow brow(const FaceShape& s, int side)
{
    const auto& p = s.identity;
    const auto& e = s.expression;
    const double raise = side < 0 ? e[RaiseRightBrow] : e[RaiseLeftBrow];
    return {side * (p[EyeSeparation] - 0.5 * e[Furrow]),
            p[EyeHeight] - p[BrowGap] - raise + 0.5 * e[Furrow],
            p[BrowHalfLength],
            p[BrowArch],
            p[BrowThickness],
            side};
}

double mouth_half_width(const FaceShape& s)
{
    return s.identity[MouthHalfWidth] + s.expression[MouthWide] + 0.3 * s.expression[Smile];
}

Vec3 oval_point(const FaceShape& s, double theta)
{
    const auto& p = s.identity;
    const double c = std::cos(theta), sn = std::sin(theta);
    const double below = pos(sn);
    return {c * p[FaceHalfWidth] + c * (1.0 - std::abs(sn)) * p[Cheek],
            sn * p[FaceHalfHeight] + below * below * p[Chin] + below * s.expression[JawDrop], 0.0};
}

Vec3 outer_lip_point(const FaceShape& s, int j)
{
    const auto& p = s.identity;
    const auto& e = s.expression;
    const double phi = 2.0 * kPi * j / 20.0;
    const double c = std::cos(phi), sn = std::sin(phi);
    const double open = sn < 0 ? p[UpperLip] : p[LowerLip] + e[MouthOpen] + 0.5 * e[JawDrop];
    return {mouth_half_width(s) * c, p[MouthHeight] - e[Smile] * c * c + sn * open, 0.0};
}

Vec3 inner_lip_point(const FaceShape& s, int j)
{
    const auto& p = s.identity;
    const auto& e = s.expression;
    const double phi = 2.0 * kPi * j / 16.0;
    const double c = std::cos(phi), sn = std::sin(phi);
    const double open = sn < 0 ? 0.15 * p[UpperLip] : 0.1 * p[LowerLip] + e[MouthOpen] + 0.5 * e[JawDrop];
    return {0.7 * mouth_half_width(s) * c, p[MouthHeight] - e[Smile] * c * c + sn * open, 0.0};
}

// Landmarks with a feature-defined position, in layout order; z holds only
// the feature relief (the depth profile is added in vertices()).
std::vector<Vec3> structured_points(const FaceShape& s)
{
    const auto& p = s.identity;
    const auto& e = s.expression;
    std::vector<Vec3> out;
    out.reserve(146);
    for (int i = 0; i < 36; ++i) {
        out.push_back(oval_point(s, 2.0 * kPi * i / 36.0));
    }
    for (int side : {-1, 1}) {
        const Eye ey = eye(s, side);
        for (int k = 0; k < 16; ++k) {
            const double phi = 2.0 * kPi * k / 16.0;
            out.push_back({ey.cx + side * ey.rx * std::cos(phi), ey.cy + ey.ry * std::sin(phi), 0.0});
        }
    }
    for (int side : {-1, 1}) {
        const Eye ey = eye(s, side);
        const double gx = ey.cx + e[Gaze];
        const double r = p[IrisRadius];
        out.push_back({gx, ey.cy, 0.0});
        out.push_back({gx + r, ey.cy, 0.0});
        out.push_back({gx, ey.cy + r, 0.0});
        out.push_back({gx - r, ey.cy, 0.0});
        out.push_back({gx, ey.cy - r, 0.0});
    }
    for (int side : {-1, 1}) {
        const Brow b = brow(s, side);
        for (int edge : {-1, 1}) {
            for (int k = 0; k < 5; ++k) {
                const double q = -1.0 + 0.5 * k;
                out.push_back({b.x(q), b.mid(q) + edge * 0.5 * b.thick, 0.0});
            }
        }
    }
    for (int k = 0; k < 6; ++k) {
        const double t = k / 5.0;
        out.push_back({0.0, p[EyeHeight] + t * p[NoseLength], -0.35 * t * p[NoseLength]});
    }
    for (double q : {-1.0, -0.6, -0.2, 0.2, 0.6, 1.0}) {
        out.push_back({q * p[NoseHalfWidth], p[EyeHeight] + p[NoseLength], -0.25 * (1.0 - std::abs(q)) * p[NoseLength]});
    }
    for (int j = 0; j < 20; ++j) {
        out.push_back(outer_lip_point(s, j));
    }
    for (int j = 0; j < 16; ++j) {
        out.push_back(inner_lip_point(s, j));
    }
    return out;
}

Vec3 fill_point(const FaceShape& s, double u, double v)
{
    const auto& p = s.identity;
    const double below = pos(v);
    return {u * p[FaceHalfWidth], v * p[FaceHalfHeight] + below * below * p[Chin] + below * s.expression[JawDrop], 0.0};
}

double halton(int index, int base)
{
    double f = 1.0, r = 0.0;
    while (index > 0) {
        f /= base;
        r += f * (index % base);
        index /= base;
    }
    return r;
}

std::array<double, 2> anchor_of(const FaceShape& b, const Vec3& v, double limit)
{
    double u = v.x / b.identity[FaceHalfWidth];
    double w = v.y / b.identity[FaceHalfHeight];
    const double r = std::hypot(u, w);
    if (r > limit) {
        u *= limit / r;
        w *= limit / r;
    }
    return {u, w};
}

Layout build_layout()
{
    Layout L;
    int next = 0;
    auto take = [&](int n) {
        Group g{next, n};
        next += n;
        return g;
    };
    L.face_oval = take(36);
    L.right_eye = take(16);
    L.left_eye = take(16);
    L.right_iris = take(5);
    L.left_iris = take(5);
    L.right_brow = take(10);
    L.left_brow = take(10);
    L.nose = take(12);
    L.outer_lips = take(20);
    L.inner_lips = take(16);
    L.fill = take(kLandmarkCount - next);

    const FaceShape b = FaceShape::base();
    const auto structured = structured_points(b);
    std::vector<std::array<double, 2>> placed;
    int inside = 0;
    for (std::size_t i = 0; i < structured.size(); ++i) {
        const Vec3& v = structured[i];
        L.anchor.push_back(anchor_of(b, v, static_cast<int>(i) < L.face_oval.count ? 0.97 : 0.95));
        placed.push_back({v.x, v.y});
        inside += canonical_hmd_contains(v.x + 0.5, v.y + 0.5) ? 1 : 0;
    }

    auto far_enough = [&](double x, double y, double min_dist) {
        for (const auto& q : placed) {
            if ((q[0] - x) * (q[0] - x) + (q[1] - y) * (q[1] - y) < min_dist * min_dist) {
                return false;
            }
        }
        return true;
    };

    int need_in = kDense - inside;
    int need_out = L.fill.count - need_in;
    int index = 1;
    auto next_candidate = [&](double radius, double& u, double& v) {
        for (;; ++index) {
            if (index > 2000000) {
                throw std::logic_error("face layout: fill placement did not converge");
            }
            u = 2.0 * halton(index, 2) - 1.0;
            v = 2.0 * halton(index, 3) - 1.0;
            if (u * u + v * v <= radius * radius) {
                ++index;
                return;
            }
        }
    };
    while (need_in + need_out > 0) {
        double u, v;
        next_candidate(0.92, u, v);
        const Vec3 p = fill_point(b, u, v);
        if (!far_enough(p.x, p.y, 0.012)) {
            continue;
        }
        const double d = canonical_hmd_distance(p.x + 0.5, p.y + 0.5);
        if (std::abs(d) < 0.015) {
            continue;
        }
        int& need = d < 0 ? need_in : need_out;
        if (need == 0) {
            continue;
        }
        --need;
        placed.push_back({p.x, p.y});
        L.anchor.push_back({u, v});
    }
    while (static_cast<int>(L.anchor.size()) < kVertexCount) {
        double u, v;
        next_candidate(0.95, u, v);
        const Vec3 p = fill_point(b, u, v);
        if (!far_enough(p.x, p.y, 0.008)) {
            continue;
        }
        placed.push_back({p.x, p.y});
        L.anchor.push_back({u, v});
    }
    return L;
}

} // namespace

FaceShape FaceShape::base()
{
    FaceShape s;
    s.identity = {0.30, 0.38, 0.03, 0.02, 0.12, -0.08, 0.055, 0.028, 0.017, 0.06,
                  0.06, 0.015, 0.014, 0.13, 0.035, 0.17, 0.08, 0.018, 0.024, 0.25};
    return s;
}

const std::array<double, kIdentityCount>& FaceShape::identity_spread()
{
    static const std::array<double, kIdentityCount> spread = {
        0.015, 0.015, 0.01, 0.01, 0.006, 0.006, 0.004, 0.003, 0.0015, 0.005,
        0.005, 0.004, 0.002, 0.008, 0.004, 0.008, 0.006, 0.003, 0.003, 0.02};
    return spread;
}

const Layout& layout()
{
    static const Layout L = build_layout();
    return L;
}

std::vector<Vec3> vertices(const FaceShape& shape)
{
    const Layout& L = layout();
    std::vector<Vec3> out = structured_points(shape);
    out.reserve(kVertexCount);
    for (std::size_t i = out.size(); i < L.anchor.size(); ++i) {
        out.push_back(fill_point(shape, L.anchor[i][0], L.anchor[i][1]));
    }
    const double depth = shape.identity[Depth];
    for (std::size_t i = 0; i < out.size(); ++i) {
        const auto& a = L.anchor[i];
        out[i].z += -depth * std::sqrt(std::max(0.0, 1.0 - a[0] * a[0] - a[1] * a[1]));
    }
    return out;
}

Vec3 apply(const Pose2& pose, const Vec3& p)
{
    const double c = std::cos(pose.roll), s = std::sin(pose.roll);
    return {c * p.x - s * p.y + pose.tx, s * p.x + c * p.y + pose.ty, p.z};
}

void unapply(const Pose2& pose, double x, double y, double& lx, double& ly)
{
    const double c = std::cos(pose.roll), s = std::sin(pose.roll);
    const double dx = x - pose.tx, dy = y - pose.ty;
    lx = c * dx + s * dy;
    ly = -s * dx + c * dy;
}

double canonical_hmd_distance(double x_img, double y_img)
{
    const double cx = 0.5 * (kHmdX0 + kHmdX1), cy = 0.5 * (kHmdY0 + kHmdY1);
    const double hx = 0.5 * (kHmdX1 - kHmdX0) - kHmdCorner;
    const double hy = 0.5 * (kHmdY1 - kHmdY0) - kHmdCorner;
    const double qx = std::abs(x_img - cx) - hx, qy = std::abs(y_img - cy) - hy;
    return std::hypot(pos(qx), pos(qy)) + std::min(std::max(qx, qy), 0.0) - kHmdCorner;
}

bool canonical_hmd_contains(double x_img, double y_img) { return canonical_hmd_distance(x_img, y_img) <= 0.0; }

namespace {

constexpr int kAngleBins = 720;

bool inside_polygon(const std::vector<Vec3>& poly, double x, double y)
{
    bool in = false;
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        const Vec3& a = poly[i];
        const Vec3& b = poly[j];
        if ((a.y > y) != (b.y > y) && x < (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x) {
            in = !in;
        }
    }
    return in;
}

} // namespace

Outline::Outline(const FaceShape& shape) : shape_(shape), radius_(kAngleBins, 0.0)
{
    // The oval is star-shaped around the origin; tabulate its polar radius.
    const int samples = 8 * kAngleBins;
    std::vector<double> ang(samples), rad(samples);
    for (int i = 0; i < samples; ++i) {
        const Vec3 p = oval_point(shape, 2.0 * kPi * i / samples);
        ang[i] = std::atan2(p.y, p.x);
        rad[i] = std::hypot(p.x, p.y);
    }
    for (int b = 0; b < kAngleBins; ++b) {
        const double a = -kPi + 2.0 * kPi * (b + 0.5) / kAngleBins;
        double best = 1e9, r = 0.0;
        for (int i = 0; i < samples; ++i) {
            double d = std::abs(ang[i] - a);
            d = std::min(d, 2.0 * kPi - d);
            if (d < best) {
                best = d;
                r = rad[i];
            }
        }
        radius_[b] = r;
    }
    for (int j = 0; j < 20; ++j) {
        outer_lips_.push_back(outer_lip_point(shape, j));
    }
    for (int j = 0; j < 16; ++j) {
        inner_lips_.push_back(inner_lip_point(shape, j));
    }
}

Region Outline::classify(double x, double y) const
{
    const double a = std::atan2(y, x);
    int bin = static_cast<int>((a + kPi) / (2.0 * kPi) * kAngleBins);
    bin = std::clamp(bin, 0, kAngleBins - 1);
    if (std::hypot(x, y) > radius_[bin]) {
        return Region::Background;
    }
    const auto& p = shape_.identity;
    const auto& e = shape_.expression;
    for (int side : {-1, 1}) {
        const Eye ey = eye(shape_, side);
        if (ey.ry <= 1e-4) {
            continue;
        }
        const double dx = (x - ey.cx) / ey.rx, dy = (y - ey.cy) / ey.ry;
        if (dx * dx + dy * dy <= 1.0) {
            const double r = std::hypot(x - ey.cx - e[Gaze], y - ey.cy);
            if (r <= 0.45 * p[IrisRadius]) {
                return Region::Pupil;
            }
            return r <= p[IrisRadius] ? Region::Iris : Region::Sclera;
        }
    }
    for (int side : {-1, 1}) {
        const Brow b = brow(shape_, side);
        const double q = side * (x - b.bx) / b.half;
        if (q >= -1.0 && q <= 1.0 && std::abs(y - b.mid(q)) <= 0.5 * b.thick) {
            return Region::Brow;
        }
    }
    const double mw = mouth_half_width(shape_);
    if (std::abs(x) <= mw && std::abs(y - p[MouthHeight]) <= 0.1 && inside_polygon(outer_lips_, x, y)) {
        return inside_polygon(inner_lips_, x, y) ? Region::MouthInterior : Region::Lips;
    }
    const double top = p[EyeHeight] + 0.3 * p[NoseLength];
    const double bottom = p[EyeHeight] + p[NoseLength];
    if (y >= top && y <= bottom) {
        const double half = p[NoseHalfWidth] * (y - top) / (bottom - top);
        if (std::abs(x) <= half) {
            return Region::Nose;
        }
    }
    return Region::Skin;
}

double Outline::shading(double x, double y) const
{
    const double u = x / shape_.identity[FaceHalfWidth];
    const double v = y / shape_.identity[FaceHalfHeight];
    return 0.75 + 0.25 * std::sqrt(std::max(0.0, 1.0 - u * u - v * v));
}

} // namespace hmdr::face
