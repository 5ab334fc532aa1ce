#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "gradcheck.hpp"
#include "hmdr/dataio.hpp"
#include "hmdr/error.hpp"
#include "hmdr/landmarks.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

using namespace hmdr;
namespace fs = std::filesystem;

namespace {

LandmarkSet random_set(int n, nn::Rng& rng)
{
    LandmarkSet s;
    for (int i = 0; i < n; ++i) {
        s.points.push_back({rng.uniform(), rng.uniform(), rng.uniform(-0.3, 0.3)});
    }
    return s;
}

bool in_group(int index, const face::Group& g) { return index >= g.begin && index < g.begin + g.count; }

// Independent statement of the Huber rule.
double huber_oracle(double r, double delta)
{
    r = std::fabs(r);
    if (r > delta) {
        return delta * (r - delta / 2);
    }
    return r * r / 2;
}

} // namespace

TEST_CASE("configuration cardinalities and composition")
{
    const auto& L = face::layout();
    CHECK(LandmarkConfig::named("dense216").size() == 216);
    CHECK(LandmarkConfig::named("full478").size() == 478);

    const auto s68 = LandmarkConfig::named("standard68");
    REQUIRE(s68.size() == 68);
    int jaw = 0, brows = 0, eyes = 0, nose = 0, mouth = 0;
    for (int i : s68.indices) {
        jaw += in_group(i, L.face_oval);
        brows += in_group(i, L.right_brow) || in_group(i, L.left_brow);
        eyes += in_group(i, L.right_eye) || in_group(i, L.left_eye);
        nose += in_group(i, L.nose);
        mouth += in_group(i, L.outer_lips) || in_group(i, L.inner_lips);
    }
    CHECK(jaw == 17);
    CHECK(brows == 10);
    CHECK(eyes == 12);
    CHECK(nose == 9);
    CHECK(mouth == 20);

    const auto f20 = LandmarkConfig::named("focus20");
    REQUIRE(f20.size() == 20);
    int lids = 0, brow = 0;
    for (int i : f20.indices) {
        lids += in_group(i, L.right_eye) || in_group(i, L.left_eye);
        brow += in_group(i, L.right_brow) || in_group(i, L.left_brow);
    }
    CHECK(lids == 10);
    CHECK(brow == 10);

    const auto m10 = LandmarkConfig::named("minimal10");
    REQUIRE(m10.size() == 10);
    int right = 0;
    for (int i : m10.indices) {
        CHECK((in_group(i, L.right_eye) || in_group(i, L.left_eye)));
        right += in_group(i, L.right_eye);
    }
    CHECK(right == 5);

    for (const auto& name : LandmarkConfig::ablation_names()) {
        const auto c = LandmarkConfig::named(name);
        CHECK(std::set<int>(c.indices.begin(), c.indices.end()).size() == c.indices.size());
    }
    CHECK_THROWS_AS(LandmarkConfig::named("dense999"), InvalidInput);
}

TEST_CASE("frozen dense216 asset matches the geometry")
{
    const auto frozen = LandmarkConfig::named("dense216").indices;
    CHECK(frozen == compute_dense216());
}

TEST_CASE("dense216 is the masked region of the base face")
{
    const auto base = posed_landmarks(face::FaceShape::base(), {});
    for (int res : {64, 128}) {
        const LandmarkSet masked = select_masked_region(base, canonical_hmd_mask(res, res));
        CHECK(masked == subset(base, LandmarkConfig::named("dense216")));
    }
}

TEST_CASE("subset selects in order and composes")
{
    nn::Rng rng(1);
    const LandmarkSet all = random_set(478, rng);
    CHECK(subset(all, LandmarkConfig::full()) == all);
    const auto f20 = LandmarkConfig::named("focus20");
    const auto m10 = LandmarkConfig::named("minimal10");
    const LandmarkSet s = subset(all, f20);
    for (int k = 0; k < 20; ++k) {
        CHECK(s.points[k] == all.points[f20.indices[k]]);
    }
    // minimal10 as positions inside focus20, then composed directly.
    LandmarkConfig inner{"inner", {}};
    for (int i : m10.indices) {
        inner.indices.push_back(static_cast<int>(std::find(f20.indices.begin(), f20.indices.end(), i) - f20.indices.begin()));
    }
    LandmarkSet padded = s;
    padded.points.resize(478);
    CHECK(subset(padded, inner) == subset(all, m10));
    CHECK(subset(all, LandmarkConfig::named("standard68")).size() == 68);
    CHECK_THROWS_AS(subset(random_set(68, rng), m10), InvalidInput);
}

TEST_CASE("config parsing")
{
    CHECK(LandmarkConfig::parse(" standard68\n").size() == 68);
    CHECK(LandmarkConfig::parse(R"({"name": "focus20"})").indices == LandmarkConfig::named("focus20").indices);
    const auto c = LandmarkConfig::parse(R"({"name": "mine", "indices": [3, 1, 4]})");
    CHECK(c.name == "mine");
    CHECK(c.indices == std::vector<int>{3, 1, 4});
    CHECK(c.label() == "3 LM");
    CHECK_THROWS_AS(LandmarkConfig::parse(R"({"indices": [478]})"), InvalidInput);
}

TEST_CASE("select_masked_region")
{
    nn::Rng rng(2);
    const LandmarkSet s = random_set(30, rng);
    CHECK(select_masked_region(s, OcclusionMask(8, 8, 1)) == s);
    CHECK(select_masked_region(s, OcclusionMask(8, 8, 0)).size() == 0);

    LandmarkSet three{{{0.1, 0.1, 0.0}, {0.55, 0.45, 0.2}, {0.9, 0.5, -0.1}}};
    const OcclusionMask rect = rect_mask(10, 10, 3, 4, 6, 7); // rows 3..5, cols 4..6
    const LandmarkSet hit = select_masked_region(three, rect);
    REQUIRE(hit.size() == 1);
    CHECK(hit.points[0] == three.points[1]);
}

TEST_CASE("rasterize")
{
    const Tensor empty = rasterize({}, 4, 4, 1.0);
    for (double v : empty.vec()) {
        CHECK(v == 0.0);
    }
    const LandmarkSet one{{{0.5, 0.5, 0.0}}};
    const Tensor m = rasterize(one, 4, 4, 0.0);
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) {
            CHECK(m[i * 4 + j] == (i == 2 && j == 2 ? 1.0 : 0.0));
        }
    }
    const LandmarkSet two{{{0.5, 0.5, 0.0}, {0.5, 0.5, 0.0}}};
    CHECK(rasterize(two, 4, 4, 0.0) == m);
    const Tensor disc = rasterize(one, 8, 8, 1.0);
    double total = 0;
    for (double v : disc.vec()) {
        total += v;
    }
    CHECK(total == 5.0);
    CHECK(disc[4 * 8 + 5] == 1.0);
    CHECK(disc[5 * 8 + 5] == 0.0);
    CHECK_THROWS_AS(rasterize(one, 0, 4, 0.0), InvalidInput);
}

TEST_CASE("huber hand values, symmetry, and branch continuity")
{
    CHECK(huber(0.3, 0.3) == 0.0);
    CHECK(huber(0.5, 0.0, {1.0}) == doctest::Approx(0.125).epsilon(1e-15));
    CHECK(huber(2.0, 0.0, {1.0}) == doctest::Approx(1.5).epsilon(1e-15));
    CHECK(huber(0.0, 2.0, {1.0}) == huber(2.0, 0.0, {1.0}));
    for (double delta : {0.1, 1.0, 10.0}) {
        const double at = huber(delta, 0.0, {delta});
        CHECK(std::abs(at - 0.5 * delta * delta) < 1e-9);
        const double h = 1e-7 * delta;
        const double below = (huber(delta, 0.0, {delta}) - huber(delta - h, 0.0, {delta})) / h;
        const double above = (huber(delta + h, 0.0, {delta}) - huber(delta, 0.0, {delta})) / h;
        CHECK(std::abs(below - delta) < 1e-6 * std::max(1.0, delta));
        CHECK(std::abs(above - delta) < 1e-6 * std::max(1.0, delta));
    }
    CHECK_THROWS_AS(huber(1, 0, {0.0}), InvalidInput);
}

TEST_CASE("dense_lm_loss hand cases and loop oracle")
{
    LandmarkSet a{{{0.5, 0.0, 0.0}}}, b{{{0.0, 0.0, 0.0}}};
    CHECK(dense_lm_loss(a, b, {1.0}) == doctest::Approx(0.125).epsilon(1e-15));
    CHECK(dense_lm_loss(a, a) == 0.0);

    // Mixed branches: one point inside delta, one beyond.
    LandmarkSet p{{{0.2, 0.1, 0.0}, {3.0, -0.5, 1.5}}}, g{{{0.0, 0.0, 0.0}, {0.0, 0.0, 0.0}}};
    const double expect = ((0.02 + 0.005) + (2.5 + 0.125 + 1.0)) / 2.0;
    CHECK(std::abs(dense_lm_loss(p, g, {1.0}) - expect) < 1e-12);

    nn::Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 1 + static_cast<int>(rng.bits() % 40);
        const double delta = rng.uniform(0.05, 2.0);
        const LandmarkSet x = random_set(n, rng), y = random_set(n, rng);
        double acc = 0.0;
        for (int i = 0; i < n; ++i) {
            acc += huber_oracle(x.points[i].x - y.points[i].x, delta) + huber_oracle(x.points[i].y - y.points[i].y, delta) +
                   huber_oracle(x.points[i].z - y.points[i].z, delta);
        }
        CHECK(std::abs(dense_lm_loss(x, y, {delta}) - acc / n) < 1e-12);
        CHECK(dense_lm_loss(x, y, {delta}) == dense_lm_loss(y, x, {delta}));
        LandmarkSet xs = x, ys = y;
        for (int i = 0; i < n; ++i) {
            xs.points[i].x += 0.25;
            ys.points[i].x += 0.25;
            xs.points[i].z -= 0.5;
            ys.points[i].z -= 0.5;
        }
        CHECK(std::abs(dense_lm_loss(xs, ys, {delta}) - dense_lm_loss(x, y, {delta})) < 1e-12);
    }
    CHECK_THROWS_AS(dense_lm_loss(random_set(2, rng), random_set(3, rng)), InvalidInput);
}

TEST_CASE("z flag drops the depth term")
{
    LandmarkSet a{{{0.1, 0.2, 0.9}}}, b{{{0.1, 0.2, 0.0}}};
    CHECK(dense_lm_loss(a, b, {1.0}, false) == 0.0);
    CHECK(dense_lm_loss(a, b, {1.0}, true) > 0.0);
    const ag::Var v = ag::Var::constant(a.to_tensor());
    CHECK(dense_lm_loss(v, b.to_tensor(), {1.0}, false).item() == 0.0);
}

TEST_CASE("differentiable dense_lm_loss matches the scalar form and finite differences")
{
    nn::Rng rng(4);
    const LandmarkSet x = random_set(12, rng), y = random_set(12, rng);
    ag::Var p = ag::Var::parameter(x.to_tensor());
    const Tensor gt = y.to_tensor();
    for (double delta : {0.05, 0.3, 1.0}) {
        CHECK(std::abs(dense_lm_loss(p, gt, {delta}).item() - dense_lm_loss(x, y, {delta})) < 1e-12);
        auto r = testing::grad_check([&] { return dense_lm_loss(p, gt, {delta}); }, {p}, 1e-7, 36);
        CHECK(r.relative_error < 1e-4);
    }
}

TEST_CASE("synthetic detector returns analytic landmarks")
{
    const SyntheticClip clip = generate_synthetic_clip(SyntheticFaceSpec{}, 3, 9);
    SyntheticDetector det;
    for (int t = 0; t < 3; ++t) {
        det.add(clip.clip.frame(t), clip.landmarks[t]);
    }
    for (int t = 0; t < 3; ++t) {
        const auto first = det.detect(clip.clip.frame(t));
        REQUIRE(first.has_value());
        CHECK(*first == clip.landmarks[t]);
        CHECK(*det.detect(clip.clip.frame(t)) == *first);
    }
    VideoClip quantized = clip.clip;
    for (double& v : quantized.data()) {
        v = from_byte(to_byte(v));
    }
    CHECK(det.detect(quantized.frame(1)) == clip.landmarks[1]);
    const VideoClip blank(1, 64, 64, 0.3);
    CHECK_FALSE(det.detect(blank.frame(0)).has_value());

    nn::Rng rng(5);
    const LandmarkSet fixed = random_set(478, rng);
    ConstantDetector constant(fixed);
    CHECK(*constant.detect(blank.frame(0)) == fixed);
    CHECK(*constant.detect(clip.clip.frame(0)) == fixed);
}

TEST_CASE("landmark files round trip exactly")
{
    nn::Rng rng(6);
    const fs::path path = fs::temp_directory_path() / "hmdr_test_landmarks.json";
    const std::vector<LandmarkSet> frames = {random_set(478, rng), random_set(478, rng)};
    save_landmarks(frames, path);
    CHECK(load_landmarks(path) == frames);
    {
        std::ofstream out(path);
        out << R"({"frames": [{"frame_index": 0, "N": 2, "points": [[0, 0, 0]]}]})";
    }
    CHECK_THROWS_AS(load_landmarks(path), FormatError);
    {
        std::ofstream out(path);
        out << "not json";
    }
    CHECK_THROWS_AS(load_landmarks(path), FormatError);
    fs::remove(path);
}
