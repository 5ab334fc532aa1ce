#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "gradcheck.hpp"
#include "hmdr/dataio.hpp"
#include "hmdr/error.hpp"
#include "hmdr/inpaintnet.hpp"

#include <cmath>

using namespace hmdr;
using hmdr::testing::random_tensor;

namespace {

// out[t, c] = k0 x[t-1, c] + k1 x[t, c] + k2 x[t+1, c] for c < S, zero outside the clip.
Tensor shift_oracle(const Tensor& x, const Tensor& k)
{
    const int t_count = x.dim(0), c_count = x.dim(1), s = k.dim(0);
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    Tensor out(x.shape());
    for (int t = 0; t < t_count; ++t) {
        for (int c = 0; c < c_count; ++c) {
            for (std::size_t p = 0; p < plane; ++p) {
                auto at = [&](int tt) {
                    return (tt < 0 || tt >= t_count) ? 0.0 : x[(static_cast<std::size_t>(tt) * c_count + c) * plane + p];
                };
                double v;
                if (c < s) {
                    v = k[c * 3 + 0] * at(t - 1) + k[c * 3 + 1] * at(t) + k[c * 3 + 2] * at(t + 1);
                } else {
                    v = at(t);
                }
                out[(static_cast<std::size_t>(t) * c_count + c) * plane + p] = v;
            }
        }
    }
    return out;
}

GeneratorInput random_input(int t, int h, int w, nn::Rng& rng, bool empty_mask = false)
{
    GeneratorInput in;
    in.masked_frames = random_tensor({t, 3, h, w}, rng, 0, 1);
    in.mask = Tensor({1, 1, h, w});
    if (!empty_mask) {
        for (std::size_t i = 0; i < in.mask.size(); ++i) {
            in.mask[i] = rng.uniform() < 0.3 ? 1.0 : 0.0;
        }
    }
    in.landmark_maps = Tensor({t, 1, h, w});
    for (std::size_t i = 0; i < in.landmark_maps.size(); ++i) {
        in.landmark_maps[i] = rng.uniform() < 0.05 ? 1.0 : 0.0;
    }
    in.reference = random_tensor({1, 3, h, w}, rng, 0, 1);
    return in;
}

GeneratorConfig small_config(int c = 4)
{
    GeneratorConfig cfg;
    cfg.base_channels = c;
    return cfg;
}

} // namespace

TEST_CASE("temporal shift matches a loop oracle")
{
    nn::Rng rng(11);
    for (int t : {1, 2, 3, 8}) {
        const Tensor x = random_tensor({t, 6, 3, 4}, rng);
        const Tensor k = random_tensor({4, 3}, rng);
        const Tensor y = ag::temporal_shift(ag::Var::constant(x), ag::Var::constant(k)).value();
        const Tensor ref = shift_oracle(x, k);
        double err = 0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            err = std::max(err, std::abs(y[i] - ref[i]));
        }
        CHECK(err < 1e-15);
    }
}

TEST_CASE("hard forward shift on three frames")
{
    Tensor x({3, 2, 1, 1}, std::vector<double>{1, 10, 2, 20, 3, 30});
    Tensor k({1, 3}, std::vector<double>{1, 0, 0});
    const Tensor y = ag::temporal_shift(ag::Var::constant(x), ag::Var::constant(k)).value();
    CHECK(y.to_vector() == std::vector<double>{0, 10, 1, 20, 2, 30});
}

TEST_CASE("identity-initialized shift is a bitwise no-op")
{
    nn::Rng rng(3);
    for (int t : {1, 2, 3, 8}) {
        const auto shift = TemporalShift::make(16, 0.25, true);
        CHECK(shift.shifted() == 8);
        const Tensor x = random_tensor({t, 16, 4, 4}, rng);
        CHECK(shift(ag::Var::constant(x)).value() == x);
    }
}

TEST_CASE("default shift moves a quarter of channels each way")
{
    const auto shift = TemporalShift::make(8, 0.25, false);
    REQUIRE(shift.shifted() == 4);
    const Tensor& k = shift.kernel.value();
    CHECK(k.to_vector() == std::vector<double>{1, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 1});
    CHECK_THROWS_AS(TemporalShift::make(8, 0.6, false), InvalidInput);
    CHECK_THROWS_AS(TemporalShift::make(8, 0.0, false), InvalidInput);
}

TEST_CASE("single frame: shifted channels see zeros, others pass")
{
    nn::Rng rng(5);
    const auto shift = TemporalShift::make(8, 0.25, false);
    const Tensor x = random_tensor({1, 8, 2, 2}, rng);
    const Tensor y = shift(ag::Var::constant(x)).value();
    for (int c = 0; c < 8; ++c) {
        for (int p = 0; p < 4; ++p) {
            CHECK(y[c * 4 + p] == (c < 4 ? 0.0 : x[c * 4 + p]));
        }
    }
}

TEST_CASE("gated conv saturates with the gate bias")
{
    nn::Rng rng(7);
    auto g = GatedConv::make(8, 8, 3, {1, 1, 1}, small_config(), rng);
    const Tensor x = random_tensor({4, 8, 16, 16}, rng);
    Tensor& b = g.conv.bias.mutable_value();
    for (int c = 8; c < 16; ++c) {
        b[c] = -60;
    }
    Tensor y = g(ag::Var::constant(x)).value();
    CHECK(y.shape() == Shape{4, 8, 16, 16});
    double mx = 0;
    for (double v : y.vec()) {
        mx = std::max(mx, std::abs(v));
    }
    CHECK(mx < 1e-20);

    for (int c = 8; c < 16; ++c) {
        b[c] = 60;
    }
    y = g(ag::Var::constant(x)).value();
    // With the gate open the output is the activated feature branch.
    const Tensor pre = ag::conv2d(g.shift(ag::Var::constant(x)), g.conv.weight, g.conv.bias, g.conv.spec).value();
    double err = 0;
    const std::size_t plane = 16 * 16;
    for (int t = 0; t < 4; ++t) {
        for (int c = 0; c < 8; ++c) {
            for (std::size_t p = 0; p < plane; ++p) {
                const double f = pre[(static_cast<std::size_t>(t) * 16 + c) * plane + p];
                const double act = f > 0 ? f : 0.2 * f;
                err = std::max(err, std::abs(y[(static_cast<std::size_t>(t) * 8 + c) * plane + p] - act));
            }
        }
    }
    CHECK(err < 1e-12);
}

TEST_CASE("self-attention: identity at init, normalized rows, uniform input")
{
    nn::Rng rng(9);
    auto a = SelfAttention::make(16, rng);
    const Tensor x = random_tensor({2, 16, 6, 5}, rng);
    CHECK(a(ag::Var::constant(x)).value() == x);

    const Tensor w = a.weights(x);
    REQUIRE(w.shape() == Shape{2, 30, 30});
    double worst = 0;
    for (int r = 0; r < 60; ++r) {
        double s = 0;
        for (int i = 0; i < 30; ++i) {
            const double v = w[static_cast<std::size_t>(r) * 30 + i];
            CHECK(v >= 0);
            s += v;
        }
        worst = std::max(worst, std::abs(s - 1));
    }
    CHECK(worst < 1e-6);

    // Every location sees the same features: uniform weights and a spatially constant output.
    a.gamma.mutable_value()[0] = 0.7;
    Tensor u({1, 16, 4, 4});
    for (int c = 0; c < 16; ++c) {
        for (int p = 0; p < 16; ++p) {
            u[static_cast<std::size_t>(c) * 16 + p] = 0.1 * c - 0.5;
        }
    }
    const Tensor wu = a.weights(u);
    for (double v : wu.vec()) {
        CHECK(v == doctest::Approx(1.0 / 16).epsilon(1e-12));
    }
    const Tensor yu = a(ag::Var::constant(u)).value();
    for (int c = 0; c < 16; ++c) {
        for (int p = 1; p < 16; ++p) {
            CHECK(std::abs(yu[c * 16 + p] - yu[c * 16]) < 1e-12);
        }
    }
}

TEST_CASE("generator layer plan")
{
    Generator g(small_config(4), 1);
    REQUIRE(g.layers().size() == 13);
    CHECK(g.layers()[0].conv.weight.dim(2) == 5);
    CHECK(g.layers()[1].conv.weight.dim(2) == 4);
    CHECK(g.layers()[1].conv.spec.stride == 2);
    CHECK(g.layers()[3].conv.spec.stride == 2);
    std::vector<int> dilations;
    for (const auto& l : g.layers()) {
        if (l.conv.spec.dilation > 1) {
            dilations.push_back(l.conv.spec.dilation);
            CHECK(l.conv.weight.dim(2) == 3);
        }
    }
    CHECK(dilations == std::vector<int>{2, 4, 8, 16});
    for (const auto& a : g.attention()) {
        CHECK(a.f.weight.dim(2) == 1);
        CHECK(a.h.weight.dim(3) == 1);
    }
    CHECK(g.attention().size() == 2);
    GeneratorConfig b = small_config(4);
    b.attention = AttentionPlacement::Bottleneck;
    CHECK(Generator(b, 1).attention().size() == 1);
    CHECK(attention_placement_from_string(to_string(AttentionPlacement::Bottleneck)) == AttentionPlacement::Bottleneck);
    CHECK_THROWS_AS(attention_placement_from_string("decoder"), InvalidInput);
}

TEST_CASE("parameter count is deterministic")
{
    const Generator a(GeneratorConfig{}, 1), b(GeneratorConfig{}, 2);
    CHECK(a.parameter_count() == b.parameter_count());
    CHECK(a.params().size() == b.params().size());
    CHECK(nn::checksum(a.params()) != nn::checksum(b.params()));
    CHECK(nn::checksum(a.params()) == nn::checksum(Generator(GeneratorConfig{}, 1).params()));
    const Discriminator d1(DiscriminatorConfig{}, 1), d2(DiscriminatorConfig{}, 1);
    CHECK(d1.parameter_count() == d2.parameter_count());
    CHECK(nn::checksum(d1.params()) == nn::checksum(d2.params()));
}

TEST_CASE("generator output is bounded and composited")
{
    nn::Rng rng(13);
    Generator g(small_config(4), 3);
    for (int t : {1, 3}) {
        const auto in = random_input(t, 16, 16, rng);
        const Tensor raw = g.forward(ag::Var::constant(in.assemble())).value();
        const Tensor out = g.generate(in).value();
        CHECK(out.shape() == in.masked_frames.shape());
        for (std::size_t i = 0; i < out.size(); ++i) {
            CHECK(std::isfinite(out[i]));
            CHECK(raw[i] >= 0.0);
            CHECK(raw[i] <= 1.0);
            const std::size_t p = i % 256;
            if (in.mask[p] == 0) {
                CHECK(out[i] == in.masked_frames[i]);
            } else {
                CHECK(out[i] == raw[i]);
            }
        }
    }
    const auto empty = random_input(2, 16, 16, rng, true);
    CHECK(g.generate(empty).value() == empty.masked_frames);
}

TEST_CASE("generator input assembly order and validation")
{
    nn::Rng rng(17);
    const auto in = random_input(2, 8, 8, rng);
    const Tensor a = in.assemble();
    REQUIRE(a.shape() == Shape{2, 8, 8, 8});
    for (int t = 0; t < 2; ++t) {
        for (int p = 0; p < 64; ++p) {
            auto at = [&](int c) { return a[(static_cast<std::size_t>(t) * 8 + c) * 64 + p]; };
            for (int c = 0; c < 3; ++c) {
                CHECK(at(c) == in.masked_frames[(static_cast<std::size_t>(t) * 3 + c) * 64 + p]);
                CHECK(at(5 + c) == in.reference[static_cast<std::size_t>(c) * 64 + p]);
            }
            CHECK(at(3) == in.mask[p]);
            CHECK(at(4) == in.landmark_maps[static_cast<std::size_t>(t) * 64 + p]);
        }
    }
    auto bad = in;
    bad.reference = Tensor({1, 3, 8, 4});
    CHECK_THROWS_AS(bad.assemble(), InvalidInput);
    Generator g(small_config(2), 1);
    CHECK_THROWS_AS(g.forward(ag::Var::constant(Tensor({1, 8, 10, 10}))), InvalidInput);
    CHECK_THROWS_AS(g.forward(ag::Var::constant(Tensor({1, 7, 8, 8}))), InvalidInput);
}

TEST_CASE("build from a synthetic clip")
{
    const auto s = generate_synthetic_clip(SyntheticFaceSpec{}, 3, 4);
    const auto mask = canonical_hmd_mask(64, 64);
    std::vector<LandmarkSet> lms;
    for (const auto& l : s.landmarks) {
        lms.push_back(subset(l, LandmarkConfig::named("dense216")));
    }
    const auto in = GeneratorInput::build(s.clip, mask, lms, 1);
    CHECK(in.masked_frames == apply_mask(s.clip, mask).to_tensor());
    CHECK(in.landmark_maps.shape() == Shape{3, 1, 64, 64});
    double marks = 0;
    for (double v : in.landmark_maps.vec()) {
        marks += v;
    }
    CHECK(marks > 100);
    lms.pop_back();
    CHECK_THROWS_AS(GeneratorInput::build(s.clip, mask, lms, 0), InvalidInput);
}

TEST_CASE("non-temporal layers commute with frame permutation")
{
    nn::Rng rng(19);
    GeneratorConfig cfg = small_config(4);
    auto conv = GatedConv::make(6, 4, 3, {1, 1, 1}, cfg, rng);
    conv.shift = {}; // drop temporal mixing
    auto attn = SelfAttention::make(6, rng);
    attn.gamma.mutable_value()[0] = 0.5;
    const Tensor x = random_tensor({4, 6, 5, 5}, rng);
    const std::vector<int> perm{2, 0, 3, 1};
    const auto px = ag::gather(ag::Var::constant(x), perm);
    CHECK(conv(px).value() == ag::gather(conv(ag::Var::constant(x)), perm).value());
    CHECK(attn(px).value() == ag::gather(attn(ag::Var::constant(x)), perm).value());
}

TEST_CASE("discriminator shapes and determinism")
{
    nn::Rng rng(23);
    DiscriminatorConfig cfg;
    cfg.base_channels = 2;
    const Discriminator d(cfg, 5);
    const Tensor clip = random_tensor({2, 3, 32, 48}, rng, 0, 1);
    const Tensor mask = canonical_hmd_mask(32, 48).to_tensor();
    const Tensor a = d.score(ag::Var::constant(clip), mask).value();
    CHECK(a.shape() == Shape{2, 2, 3});
    CHECK(a == d.score(ag::Var::constant(clip), mask).value());
    for (double v : a.vec()) {
        CHECK(std::isfinite(v));
    }
    CHECK_THROWS_AS(d.score(ag::Var::constant(Tensor({1, 3, 24, 24})), Tensor({1, 1, 24, 24})), InvalidInput);
}

TEST_CASE("discriminator tangent is the directional derivative")
{
    nn::Rng rng(29);
    DiscriminatorConfig cfg;
    cfg.base_channels = 2;
    const Discriminator d(cfg, 7);
    const Tensor clip = random_tensor({2, 3, 16, 16}, rng, 0, 1);
    const Tensor dir = random_tensor({2, 3, 16, 16}, rng);
    const Tensor mask = canonical_hmd_mask(16, 16).to_tensor();
    const auto [s, ds] = d.score_with_tangent(ag::Var::constant(clip), mask, ag::Var::constant(dir));
    CHECK(s.value() == d.score(ag::Var::constant(clip), mask).value());
    const double eps = 1e-6;
    Tensor plus = clip, minus = clip;
    for (std::size_t i = 0; i < clip.size(); ++i) {
        plus[i] += eps * dir[i];
        minus[i] -= eps * dir[i];
    }
    const Tensor sp = d.score(ag::Var::constant(plus), mask).value();
    const Tensor sm = d.score(ag::Var::constant(minus), mask).value();
    for (std::size_t i = 0; i < sp.size(); ++i) {
        CHECK(ds.value()[i] == doctest::Approx((sp[i] - sm[i]) / (2 * eps)).epsilon(1e-6));
    }
}

TEST_CASE("generator gradient on a toy configuration")
{
    nn::Rng rng(31);
    Generator g(small_config(2), 11);
    const auto in = random_input(2, 8, 8, rng);
    const Tensor target = random_tensor({2, 3, 8, 8}, rng, 0, 1);
    // Random biases keep pre-activations away from the leaky kink; an open
    // attention residual lets its parameters receive gradient.
    for (auto [name, p] : g.params()) {
        if (name.ends_with("bias")) {
            for (double& v : p.mutable_value().vec()) {
                v = rng.uniform(-0.5, 0.5);
            }
        }
    }
    for (const auto& a : g.attention()) {
        ag::Var gamma = a.gamma;
        gamma.mutable_value()[0] = 0.3;
    }
    auto loss = [&] { return ag::mean(ag::square(ag::sub(g.generate(in), ag::Var::constant(target)))); };
    std::vector<ag::Var> sample;
    for (std::size_t i = 0; i < g.params().size(); i += 3) {
        sample.push_back(g.params()[i].second);
    }
    const auto r = hmdr::testing::grad_check(loss, sample, 1e-6, 4);
    CHECK(r.analytic_norm > 0);
    CHECK(r.relative_error < 1e-3);
}
