#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "gradcheck.hpp"
#include "hmdr/checkpoint.hpp"
#include "hmdr/error.hpp"
#include "hmdr/losses.hpp"

#include <cmath>
#include <filesystem>

using namespace hmdr;
using hmdr::testing::grad_check;
using hmdr::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

// First two channels as a layer, for hand-computed Gram cases.
class TwoChannelExtractor final : public FeatureExtractor {
public:
    std::vector<FeatureMap> extract(const ag::Var& frames) const override { return {{"c2", ag::slice(frames, 1, 0, 2)}}; }
    std::string name() const override { return "two-channel"; }
};

// score = <w, x> with ||w|| = 1: input gradient has unit norm everywhere.
class UnitLinearCritic final : public Critic {
public:
    explicit UnitLinearCritic(const Tensor& w) : w_(ag::Var::parameter(w)) { params_.emplace_back("w", w_); }
    ag::Var score(const ag::Var& x) const override { return apply(x); }
    std::pair<ag::Var, ag::Var> score_with_tangent(const ag::Var& x, const ag::Var& v) const override
    {
        return {apply(x), apply(v)};
    }
    const nn::NamedParams& params() const override { return params_; }

private:
    ag::Var apply(const ag::Var& x) const
    {
        const int n = static_cast<int>(x.size());
        return ag::reshape(ag::bmm(ag::reshape(x, {1, 1, n}), ag::reshape(w_, {1, n, 1})), {1});
    }
    ag::Var w_;
    nn::NamedParams params_;
};

fs::path temp_dir(const std::string& name)
{
    const fs::path d = fs::temp_directory_path() / ("hmdr_losses_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

} // namespace

TEST_CASE("loss weight defaults and total composition")
{
    const LossWeights w;
    CHECK(w.adv == 1.0);
    CHECK(w.fer == 2.0);
    CHECK(w.style == 10.0);
    CHECK(w.vgg == 1.0);
    CHECK(w.recon == 1.0);
    CHECK(w.denselm == 1.0);
    CHECK(total_loss(LossTerms::all(1.0), w).total == 16.0);

    LossWeights zero;
    for (LossTerm t : loss_terms()) {
        zero[t] = 0;
    }
    CHECK(total_loss(LossTerms::all(3.0), zero).total == 0.0);

    nn::Rng rng(1);
    LossTerms terms;
    for (LossTerm t : loss_terms()) {
        terms[t] = rng.uniform(0, 2);
    }
    const double base = total_loss(terms, w).total;
    for (LossTerm t : loss_terms()) {
        LossTerms probe = terms;
        *probe[t] += 0.37;
        CHECK(std::abs(total_loss(probe, w).total - base - 0.37 * w[t]) < 1e-9);
        LossWeights wp = w;
        wp[t] += 0.5;
        CHECK(std::abs(total_loss(terms, wp).total - base - 0.5 * *terms[t]) < 1e-9);
    }

    LossWeights stage1 = w;
    stage1.adv = 0;
    LossTerms a = terms, b = terms;
    a[LossTerm::Adv] = -123.0;
    b[LossTerm::Adv] = 4e5;
    CHECK(total_loss(a, stage1).total == total_loss(b, stage1).total);
    CHECK(total_loss(a, stage1)[LossTerm::Adv] == -123.0);
}

TEST_CASE("missing and non-finite terms are rejected")
{
    LossTerms t = LossTerms::all(1.0);
    t[LossTerm::Style].reset();
    CHECK_THROWS_AS(total_loss(t, LossWeights{}), InvalidInput);
    t[LossTerm::Style] = std::nan("");
    CHECK_THROWS_AS(total_loss(t, LossWeights{}), NumericError);
    LossWeights bad;
    bad.vgg = -1;
    CHECK_THROWS_AS(total_loss(LossTerms::all(1.0), bad), InvalidInput);

    LossVars v;
    for (LossTerm term : loss_terms()) {
        v[term] = ag::Var::constant(Tensor({1}, 1.0));
    }
    v[LossTerm::Fer] = ag::Var();
    CHECK_THROWS_AS(total_loss(v, LossWeights{}), InvalidInput);
    v[LossTerm::Fer] = ag::Var::constant(Tensor({1}, std::numeric_limits<double>::infinity()));
    CHECK_THROWS_AS(total_loss(v, LossWeights{}), NumericError);
}

TEST_CASE("differentiable total matches the scalar report")
{
    nn::Rng rng(2);
    LossVars v;
    LossTerms t;
    std::vector<ag::Var> leaves;
    for (LossTerm term : loss_terms()) {
        const double x = rng.uniform(0, 1);
        v[term] = ag::Var::parameter(Tensor({1}, x));
        t[term] = x;
        leaves.push_back(v[term]);
    }
    LossReport report;
    const ag::Var total = total_loss(v, LossWeights{}, &report);
    CHECK(total.item() == doctest::Approx(total_loss(t, LossWeights{}).total).epsilon(1e-15));
    CHECK(report.total == total_loss(t, LossWeights{}).total);
    ag::backward(total);
    for (std::size_t i = 0; i < leaves.size(); ++i) {
        CHECK(leaves[i].grad()[0] == LossWeights{}[loss_terms()[i]]);
    }
    // A zero weight may leave its term out entirely.
    LossWeights stage1;
    stage1.adv = 0;
    v[LossTerm::Adv] = ag::Var();
    CHECK_NOTHROW(total_loss(v, stage1));
}

TEST_CASE("recon loss")
{
    nn::Rng rng(3);
    const Tensor gt = random_tensor({2, 3, 2, 2}, rng, 0, 0.9);
    CHECK(recon_loss(ag::Var::constant(gt), gt).item() == 0.0);
    Tensor off = gt;
    for (double& x : off.vec()) {
        x += 0.1;
    }
    CHECK(std::abs(recon_loss(ag::Var::constant(off), gt).item() - 0.1) < 1e-12);

    const Tensor pred = random_tensor({2, 3, 2, 2}, rng, 0, 1);
    double s = 0;
    for (int t = 0; t < 2; ++t)
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < 2; ++i)
                for (int j = 0; j < 2; ++j) {
                    const std::size_t k = ((static_cast<std::size_t>(t) * 3 + c) * 2 + i) * 2 + j;
                    s += std::abs(pred[k] - gt[k]);
                }
    CHECK(std::abs(recon_loss(ag::Var::constant(pred), gt).item() - s / 24) < 1e-12);
    CHECK_THROWS_AS(recon_loss(ag::Var::constant(Tensor({1, 3, 2, 2})), gt), InvalidInput);
}

TEST_CASE("vgg loss with stub extractors")
{
    nn::Rng rng(4);
    const Tensor gt = random_tensor({2, 3, 16, 16}, rng, 0, 1);
    const Tensor noise = random_tensor({2, 3, 16, 16}, rng, 0, 1);
    const PooledPixelExtractor pooled;
    const IdentityExtractor identity;
    const auto conv = ConvFeatureExtractor::random(5);
    for (const FeatureExtractor* e : std::vector<const FeatureExtractor*>{&pooled, &identity, &conv}) {
        CHECK(vgg_loss(ag::Var::constant(gt), gt, *e).item() == 0.0);
    }
    CHECK(vgg_loss(ag::Var::constant(noise), gt, identity).item() == recon_loss(ag::Var::constant(noise), gt).item());
    CHECK(pooled.extract(ag::Var::constant(gt)).size() == 4);
    CHECK(conv.extract(ag::Var::constant(gt)).size() == 4);

    double previous = 0;
    for (double a : {0.0, 0.25, 0.5, 1.0}) {
        Tensor blend = gt;
        for (std::size_t i = 0; i < blend.size(); ++i) {
            blend[i] = (1 - a) * gt[i] + a * noise[i];
        }
        const double l = vgg_loss(ag::Var::constant(blend), gt, pooled).item();
        CHECK(l >= previous);
        previous = l;
    }
}

TEST_CASE("style loss hand cases")
{
    const TwoChannelExtractor two;
    // Constant 2-channel map (a, -a): swapping channels leaves the Gram unchanged.
    Tensor x({1, 3, 2, 2}), y({1, 3, 2, 2});
    for (int p = 0; p < 4; ++p) {
        x[p] = 0.5;
        x[4 + p] = -0.5;
        y[p] = -0.5;
        y[4 + p] = 0.5;
    }
    CHECK(style_loss(ag::Var::constant(x), y, two).item() == 0.0);

    // 1x1 spatial: G = [[a^2, ab], [ab, b^2]] / 2.
    const double a = 0.3, b = 0.8, c = 0.6, d = 0.1;
    Tensor p({1, 3, 1, 1}, std::vector<double>{a, b, 0.0});
    Tensor q({1, 3, 1, 1}, std::vector<double>{c, d, 0.0});
    const double expected =
        (std::abs(a * a - c * c) + 2 * std::abs(a * b - c * d) + std::abs(b * b - d * d)) / 2.0 / 4.0;
    CHECK(std::abs(style_loss(ag::Var::constant(p), q, two).item() - expected) < 1e-12);

    nn::Rng rng(6);
    const Tensor gt = random_tensor({2, 3, 16, 16}, rng, 0, 1);
    CHECK(style_loss(ag::Var::constant(gt), gt, PooledPixelExtractor{}).item() == 0.0);
}

TEST_CASE("expression scorers")
{
    CHECK(expression_classes() ==
          std::array<std::string, 8>{"surprise", "angry", "sad", "contempt", "disgust", "fear", "neutral", "happy"});
    nn::Rng rng(7);
    const Tensor frames = random_tensor({3, 3, 16, 16}, rng, 0, 1);
    const auto linear = LinearExpressionScorer::random(8);
    const Tensor s = linear.scores(ag::Var::constant(frames)).value();
    REQUIRE(s.shape() == Shape{3, 8});
    for (int n = 0; n < 3; ++n) {
        double sum = 0;
        for (int k = 0; k < 8; ++k) {
            CHECK(s[n * 8 + k] >= 0);
            sum += s[n * 8 + k];
        }
        CHECK(std::abs(sum - 1) < 1e-6);
    }

    const auto uniform = ConstantScorer::uniform();
    const Tensor other = random_tensor({3, 3, 16, 16}, rng, 0, 1);
    CHECK(std::abs(fer_loss(ag::Var::constant(other), frames, uniform).item() - std::log(8.0)) < 1e-12);

    const ConstantScorer confident({0.01, 0.02, 0.03, 0.04, 0.05, 0.05, 0.1, 0.7});
    CHECK(std::abs(fer_loss(ag::Var::constant(frames), frames, confident).item() + std::log(0.7)) < 1e-12);
    CHECK_THROWS_AS(ConstantScorer({0.5, 0.5, 0.5, 0, 0, 0, 0, 0}), InvalidInput);

    Tensor scaled_pred = other, scaled_gt = frames;
    for (double& v : scaled_pred.vec()) {
        v *= 0.5;
    }
    for (double& v : scaled_gt.vec()) {
        v *= 0.5;
    }
    const double l0 = fer_loss(ag::Var::constant(other), frames, linear).item();
    const double l1 = fer_loss(ag::Var::constant(scaled_pred), scaled_gt, linear).item();
    CHECK(l0 > 0);
    CHECK(std::abs(l0 - l1) < 1e-9);
}

TEST_CASE("scorer weights load from tensor archives")
{
    const fs::path dir = temp_dir("scorers");
    nn::Rng rng(9);
    Checkpoint c;
    c.put("fer.weight", random_tensor({8, 64}, rng));
    c.put("fer.bias", random_tensor({8}, rng));
    save_checkpoint(c, dir / "fer.ckpt");
    const auto s = LinearExpressionScorer::load(dir / "fer.ckpt");
    CHECK(s.name() == "linear:fer.ckpt");
    c.put("fer.bias", Tensor({7}));
    save_checkpoint(c, dir / "bad.ckpt");
    CHECK_THROWS_AS(LinearExpressionScorer::load(dir / "bad.ckpt"), FormatError);

    Checkpoint f;
    int in = 3;
    for (int i = 0; i < 4; ++i) {
        f.put("features.stage" + std::to_string(i) + ".weight", random_tensor({4, in, 3, 3}, rng));
        f.put("features.stage" + std::to_string(i) + ".bias", Tensor({4}));
        in = 4;
    }
    save_checkpoint(f, dir / "vgg.ckpt");
    const auto e = ConvFeatureExtractor::load(dir / "vgg.ckpt");
    CHECK(e.extract(ag::Var::constant(random_tensor({1, 3, 16, 16}, rng))).back().value.dim(1) == 4);
}

TEST_CASE("adversarial losses and penalty")
{
    const ag::Var real = ag::Var::constant(Tensor({2, 2, 2}, 0.3));
    CHECK(critic_adv_loss(real, real).item() == 0.0);
    CHECK(generator_adv_loss(ag::Var::constant(Tensor({1, 2, 2}, -1.0))).item() == 1.0);
    CHECK(critic_adv_loss(real, ag::Var::constant(Tensor({2, 2, 2}, 1.3))).item() == doctest::Approx(1.0));

    nn::Rng rng(10);
    Tensor w = random_tensor({2, 3, 4, 4}, rng);
    double n = 0;
    for (double v : w.vec()) {
        n += v * v;
    }
    for (double& v : w.vec()) {
        v /= std::sqrt(n);
    }
    const UnitLinearCritic unit(w);
    const Tensor a = random_tensor({2, 3, 4, 4}, rng), b = random_tensor({2, 3, 4, 4}, rng);
    const auto gp = gradient_penalty(unit, a, b, 0.3);
    CHECK(std::abs(gp.gradient_norm - 1) < 1e-12);
    CHECK(gp.penalty.item() < 1e-20);
    CHECK(!unit.params()[0].second.has_grad());
    CHECK(unit.params()[0].second.requires_grad());
}

TEST_CASE("penalty equals the squared gradient-norm gap of the critic")
{
    nn::Rng rng(11);
    DiscriminatorConfig cfg;
    cfg.base_channels = 2;
    const Discriminator d(cfg, 3);
    const Tensor mask = Tensor({1, 1, 16, 16}, 1.0);
    const MaskedCritic critic(d, mask);
    const Tensor real = random_tensor({2, 3, 16, 16}, rng, 0, 1);
    const Tensor fake = random_tensor({2, 3, 16, 16}, rng, 0, 1);
    const auto gp = gradient_penalty(critic, real, fake, 0.6, 10.0);

    // Independent norm: central differences of the clip-mean score.
    Tensor mixed(real.shape());
    for (std::size_t i = 0; i < mixed.size(); ++i) {
        mixed[i] = 0.6 * real[i] + 0.4 * fake[i];
    }
    auto mean_score = [&](const Tensor& x) {
        ag::NoGradGuard guard;
        return ag::mean(d.score(ag::Var::constant(x), mask)).item();
    };
    double n2 = 0;
    const double eps = 1e-6;
    for (std::size_t i = 0; i < mixed.size(); ++i) {
        Tensor p = mixed, m = mixed;
        p[i] += eps;
        m[i] -= eps;
        const double g = (mean_score(p) - mean_score(m)) / (2 * eps);
        n2 += g * g;
    }
    CHECK(gp.gradient_norm == doctest::Approx(std::sqrt(n2)).epsilon(1e-6));
    CHECK(gp.penalty.item() == doctest::Approx(10 * std::pow(std::sqrt(n2) - 1, 2)).epsilon(1e-6));
}

TEST_CASE("weight clipping")
{
    nn::NamedParams p{{"a", ag::Var::parameter(Tensor({3}, std::vector<double>{-1, 0.005, 2}))}};
    clip_weights(p, 0.01);
    CHECK(p[0].second.value().to_vector() == std::vector<double>{-0.01, 0.005, 0.01});
    CHECK_THROWS_AS(clip_weights(p, 0), InvalidInput);
}

TEST_CASE("loss gradients match finite differences")
{
    nn::Rng rng(12);
    const Tensor gt = random_tensor({2, 3, 16, 16}, rng, 0, 1);
    ag::Var pred = ag::Var::parameter(random_tensor({2, 3, 16, 16}, rng, 0, 1));
    const PooledPixelExtractor pooled;
    const auto conv = ConvFeatureExtractor::random(13, 4);
    const auto scorer = LinearExpressionScorer::random(14);

    CHECK(grad_check([&] { return recon_loss(pred, gt); }, {pred}).relative_error < 1e-4);
    CHECK(grad_check([&] { return vgg_loss(pred, gt, pooled); }, {pred}).relative_error < 1e-4);
    CHECK(grad_check([&] { return vgg_loss(pred, gt, conv); }, {pred}).relative_error < 1e-4);
    CHECK(grad_check([&] { return style_loss(pred, gt, pooled); }, {pred}).relative_error < 1e-4);
    CHECK(grad_check([&] { return style_loss(pred, gt, conv); }, {pred}).relative_error < 1e-4);
    CHECK(grad_check([&] { return fer_loss(pred, gt, scorer); }, {pred}).relative_error < 1e-4);

    DiscriminatorConfig cfg;
    cfg.base_channels = 2;
    const Discriminator d(cfg, 15);
    const MaskedCritic critic(d, Tensor({1, 1, 16, 16}, 1.0));
    CHECK(grad_check([&] { return generator_adv_loss(critic.score(pred)); }, {pred}).relative_error < 1e-4);
    const Tensor fake = random_tensor({2, 3, 16, 16}, rng, 0, 1);
    auto critic_objective = [&] {
        const auto real_s = critic.score(ag::Var::constant(gt));
        const auto fake_s = critic.score(ag::Var::constant(fake));
        return ag::add(critic_adv_loss(real_s, fake_s), gradient_penalty(critic, gt, fake, 0.4).penalty);
    };
    std::vector<ag::Var> params;
    for (const auto& [name, p] : d.params()) {
        params.push_back(p);
    }
    const auto r = grad_check(critic_objective, params, 1e-6, 4);
    CHECK(r.analytic_norm > 0);
    CHECK(r.relative_error < 1e-4);
}
