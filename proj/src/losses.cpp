#include "hmdr/losses.hpp"

#include "hmdr/checkpoint.hpp"
#include "hmdr/error.hpp"

#include <cmath>

namespace hmdr {

using ag::Var;

// ---- weights and report ------------------------------------------------------

const std::array<LossTerm, kLossTermCount>& loss_terms()
{
    static const std::array<LossTerm, kLossTermCount> terms{LossTerm::Adv,   LossTerm::Fer,   LossTerm::Style,
                                                            LossTerm::Vgg,   LossTerm::Recon, LossTerm::DenseLm};
    return terms;
}

std::string to_string(LossTerm term)
{
    switch (term) {
    case LossTerm::Adv: return "adv";
    case LossTerm::Fer: return "fer";
    case LossTerm::Style: return "style";
    case LossTerm::Vgg: return "vgg";
    case LossTerm::Recon: return "recon";
    case LossTerm::DenseLm: return "denselm";
    }
    return "?";
}

double& LossWeights::operator[](LossTerm term)
{
    switch (term) {
    case LossTerm::Adv: return adv;
    case LossTerm::Fer: return fer;
    case LossTerm::Style: return style;
    case LossTerm::Vgg: return vgg;
    case LossTerm::Recon: return recon;
    case LossTerm::DenseLm: return denselm;
    }
    throw InvalidInput("unknown loss term");
}

double LossWeights::operator[](LossTerm term) const { return const_cast<LossWeights&>(*this)[term]; }

void LossWeights::validate() const
{
    for (LossTerm t : loss_terms()) {
        const double w = (*this)[t];
        if (!std::isfinite(w) || w < 0) {
            throw InvalidInput("loss weight for " + to_string(t) + " must be finite and nonnegative");
        }
    }
}

LossTerms LossTerms::all(double value)
{
    LossTerms t;
    t.values.fill(value);
    return t;
}

LossReport total_loss(const LossTerms& terms, const LossWeights& weights)
{
    weights.validate();
    LossReport r;
    r.weights = weights;
    for (LossTerm t : loss_terms()) {
        const auto& v = terms[t];
        if (!v) {
            throw InvalidInput("loss term " + to_string(t) + " is missing");
        }
        if (!std::isfinite(*v)) {
            throw NumericError("loss term " + to_string(t) + " is not finite");
        }
        r.terms[static_cast<std::size_t>(t)] = *v;
        if (weights[t] != 0.0) {
            r.total += weights[t] * *v;
        }
    }
    return r;
}

Var total_loss(const LossVars& terms, const LossWeights& weights, LossReport* report)
{
    weights.validate();
    LossReport r;
    r.weights = weights;
    Var total;
    for (LossTerm t : loss_terms()) {
        const Var& v = terms[t];
        if (!v.defined()) {
            if (weights[t] != 0.0) {
                throw InvalidInput("loss term " + to_string(t) + " is missing");
            }
            continue;
        }
        if (v.size() != 1) {
            throw InvalidInput("loss term " + to_string(t) + " is not a scalar");
        }
        const double value = v.item();
        if (!std::isfinite(value)) {
            throw NumericError("loss term " + to_string(t) + " is not finite");
        }
        r.terms[static_cast<std::size_t>(t)] = value;
        if (weights[t] != 0.0) {
            const Var weighted = ag::mul_scalar(v, weights[t]);
            total = total.defined() ? ag::add(total, weighted) : weighted;
            r.total += weights[t] * value;
        }
    }
    if (!total.defined()) {
        total = Var::constant(Tensor({1}));
    }
    if (report) {
        *report = r;
    }
    return total;
}

// ---- pixel and feature losses ---------------------------------------------------

namespace {

void check_pair(const Var& pred, const Tensor& gt, const char* what)
{
    if (pred.shape() != gt.shape()) {
        throw InvalidInput(std::string(what) + ": prediction " + shape_str(pred.shape()) + " vs ground truth " +
                           shape_str(gt.shape()));
    }
}

void check_frames(const Var& frames, const char* what)
{
    const auto& s = frames.shape();
    if (s.size() != 4 || s[1] != 3) {
        throw InvalidInput(std::string(what) + ": expected frames [N, 3, H, W], got " + shape_str(s));
    }
}

std::vector<FeatureMap> extract_constant(const FeatureExtractor& e, const Tensor& frames)
{
    ag::NoGradGuard guard;
    return e.extract(Var::constant(frames));
}

} // namespace

Var recon_loss(const Var& pred, const Tensor& gt)
{
    check_pair(pred, gt, "recon_loss");
    return ag::mean(ag::abs(ag::sub(pred, Var::constant(gt))));
}

std::vector<FeatureMap> IdentityExtractor::extract(const Var& frames) const
{
    check_frames(frames, "identity extractor");
    return {{"pixels", frames}};
}

std::vector<FeatureMap> PooledPixelExtractor::extract(const Var& frames) const
{
    check_frames(frames, "pooled-pixel extractor");
    if (frames.dim(2) < 8 || frames.dim(3) < 8) {
        throw InvalidInput("pooled-pixel extractor: frames must be at least 8x8");
    }
    return {{"pool1", frames},
            {"pool2", ag::avg_pool2d(frames, 2)},
            {"pool4", ag::avg_pool2d(frames, 4)},
            {"pool8", ag::avg_pool2d(frames, 8)}};
}

ConvFeatureExtractor ConvFeatureExtractor::random(std::uint64_t seed, int width)
{
    if (width < 1) {
        throw InvalidInput("conv extractor: width must be >= 1");
    }
    nn::Rng rng(nn::derive_seed(seed, "features"));
    ConvFeatureExtractor e;
    const int widths[kStages + 1] = {3, width, 2 * width, 4 * width, 4 * width};
    for (int i = 0; i < kStages; ++i) {
        e.stages_.push_back(nn::Conv2d::make(widths[i], widths[i + 1], 3, {1, 1, 1}, rng));
        e.stages_.back().weight.set_requires_grad(false);
        e.stages_.back().bias.set_requires_grad(false);
    }
    e.name_ = "conv-random";
    return e;
}

ConvFeatureExtractor ConvFeatureExtractor::load(const std::filesystem::path& path)
{
    const Checkpoint ckpt = load_checkpoint(path);
    ConvFeatureExtractor e;
    int in = 3;
    for (int i = 0; i < kStages; ++i) {
        const std::string prefix = "features.stage" + std::to_string(i);
        const Tensor& w = ckpt.get(prefix + ".weight");
        const Tensor& b = ckpt.get(prefix + ".bias");
        if (w.rank() != 4 || w.dim(1) != in || w.dim(2) != w.dim(3) || w.dim(2) % 2 == 0 || b.shape() != Shape{w.dim(0)}) {
            throw FormatError(path.string(), "bad shapes for " + prefix);
        }
        nn::Conv2d c;
        c.weight = Var::constant(w);
        c.bias = Var::constant(b);
        c.spec = {1, w.dim(2) / 2, 1};
        e.stages_.push_back(std::move(c));
        in = w.dim(0);
    }
    e.name_ = "conv:" + path.filename().string();
    return e;
}

std::vector<FeatureMap> ConvFeatureExtractor::extract(const Var& frames) const
{
    check_frames(frames, "conv extractor");
    if (frames.dim(2) < 8 || frames.dim(3) < 8) {
        throw InvalidInput("conv extractor: frames must be at least 8x8");
    }
    std::vector<FeatureMap> out;
    Var x = frames;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
        const Var f = ag::leaky_relu(stages_[i](x), 0.2);
        out.push_back({"stage" + std::to_string(i), f});
        if (i + 1 < stages_.size()) {
            x = ag::avg_pool2d(f, 2);
        }
    }
    return out;
}

Var vgg_loss(const Var& pred, const Tensor& gt, const FeatureExtractor& extractor)
{
    check_pair(pred, gt, "vgg_loss");
    const auto fp = extractor.extract(pred);
    const auto fg = extract_constant(extractor, gt);
    Var total;
    for (std::size_t i = 0; i < fp.size(); ++i) {
        const Var d = ag::mean(ag::abs(ag::sub(fp[i].value, Var::constant(fg[i].value.value()))));
        total = total.defined() ? ag::add(total, d) : d;
    }
    return ag::mul_scalar(total, 1.0 / static_cast<double>(fp.size()));
}

Var style_loss(const Var& pred, const Tensor& gt, const FeatureExtractor& extractor)
{
    check_pair(pred, gt, "style_loss");
    const auto fp = extractor.extract(pred);
    const auto fg = extract_constant(extractor, gt);
    Var total;
    for (std::size_t i = 0; i < fp.size(); ++i) {
        Tensor g;
        {
            ag::NoGradGuard guard;
            g = ag::gram(fg[i].value).value();
        }
        const Var d = ag::mean(ag::abs(ag::sub(ag::gram(fp[i].value), Var::constant(g))));
        total = total.defined() ? ag::add(total, d) : d;
    }
    return ag::mul_scalar(total, 1.0 / static_cast<double>(fp.size()));
}

// ---- expression --------------------------------------------------------------------

const std::array<std::string, kExpressionClasses>& expression_classes()
{
    static const std::array<std::string, kExpressionClasses> names{"surprise", "angry",   "sad",     "contempt",
                                                                   "disgust",  "fear",    "neutral", "happy"};
    return names;
}

ConstantScorer::ConstantScorer(std::array<double, kExpressionClasses> probabilities) : probabilities_(probabilities)
{
    double s = 0;
    for (double p : probabilities_) {
        if (!(p >= 0)) {
            throw InvalidInput("constant scorer: probabilities must be nonnegative");
        }
        s += p;
    }
    if (std::abs(s - 1.0) > 1e-6) {
        throw InvalidInput("constant scorer: probabilities must sum to 1");
    }
}

ConstantScorer ConstantScorer::uniform()
{
    std::array<double, kExpressionClasses> p;
    p.fill(1.0 / kExpressionClasses);
    return ConstantScorer(p);
}

Var ConstantScorer::scores(const Var& frames) const
{
    check_frames(frames, "constant scorer");
    Tensor out({frames.dim(0), kExpressionClasses});
    for (int n = 0; n < frames.dim(0); ++n) {
        std::copy(probabilities_.begin(), probabilities_.end(), out.data() + static_cast<std::size_t>(n) * kExpressionClasses);
    }
    return Var::constant(std::move(out));
}

LinearExpressionScorer LinearExpressionScorer::random(std::uint64_t seed, double sharpness)
{
    nn::Rng rng(nn::derive_seed(seed, "fer"));
    LinearExpressionScorer s;
    const int d = kGrid * kGrid;
    s.weight_ = Tensor({kExpressionClasses, d});
    for (std::size_t i = 0; i < s.weight_.size(); ++i) {
        s.weight_[i] = sharpness * rng.normal();
    }
    s.bias_ = Tensor({kExpressionClasses});
    s.name_ = "linear-random";
    return s;
}

LinearExpressionScorer LinearExpressionScorer::load(const std::filesystem::path& path)
{
    const Checkpoint ckpt = load_checkpoint(path);
    LinearExpressionScorer s;
    s.weight_ = ckpt.get("fer.weight");
    s.bias_ = ckpt.get("fer.bias");
    if (s.weight_.shape() != Shape{kExpressionClasses, kGrid * kGrid} || s.bias_.shape() != Shape{kExpressionClasses}) {
        throw FormatError(path.string(), "expression scorer expects fer.weight [8, 64] and fer.bias [8]");
    }
    s.name_ = "linear:" + path.filename().string();
    return s;
}

Var LinearExpressionScorer::scores(const Var& frames) const
{
    check_frames(frames, "expression scorer");
    const int n = frames.dim(0), h = frames.dim(2), w = frames.dim(3);
    if (h != w || h % kGrid != 0) {
        throw InvalidInput("expression scorer: frames must be square with size divisible by 8");
    }
    const Var gray = ag::conv2d(frames, Var::constant(Tensor({1, 3, 1, 1}, 1.0 / 3.0)), Var(), {});
    const Var f = ag::reshape(ag::avg_pool2d(gray, h / kGrid), {n, 1, kGrid * kGrid});
    const Var norm2 = ag::bmm(f, f, false, true); // [n, 1, 1]
    const Var inv = ag::exp(ag::mul_scalar(ag::log(ag::add_scalar(norm2, 1e-24)), -0.5));
    const Var unit = ag::reshape(ag::bmm(inv, f), {n, kGrid * kGrid});
    return ag::softmax(ag::linear(unit, Var::constant(weight_), Var::constant(bias_)));
}

Var fer_loss(const Var& pred, const Tensor& gt, const ExpressionScorer& scorer)
{
    check_pair(pred, gt, "fer_loss");
    Tensor gt_scores;
    {
        ag::NoGradGuard guard;
        gt_scores = scorer.scores(Var::constant(gt)).value();
    }
    const int n = gt_scores.dim(0);
    Tensor onehot(gt_scores.shape());
    for (int i = 0; i < n; ++i) {
        const double* row = gt_scores.data() + static_cast<std::size_t>(i) * kExpressionClasses;
        const int label = static_cast<int>(std::max_element(row, row + kExpressionClasses) - row);
        onehot[static_cast<std::size_t>(i) * kExpressionClasses + label] = 1.0;
    }
    const Var p = scorer.scores(pred);
    return ag::mul_scalar(ag::sum(ag::mul(Var::constant(onehot), ag::log(p))), -1.0 / n);
}

// ---- adversarial -----------------------------------------------------------------

namespace {

class FreezeGuard {
public:
    explicit FreezeGuard(const nn::NamedParams& params) : params_(params)
    {
        for (const auto& [name, p] : params_) {
            flags_.push_back(p.requires_grad());
        }
        nn::set_requires_grad(params_, false);
    }
    ~FreezeGuard()
    {
        for (std::size_t i = 0; i < flags_.size(); ++i) {
            ag::Var p = params_[i].second;
            p.set_requires_grad(flags_[i]);
        }
    }
    FreezeGuard(const FreezeGuard&) = delete;
    FreezeGuard& operator=(const FreezeGuard&) = delete;

private:
    const nn::NamedParams& params_;
    std::vector<bool> flags_;
};

} // namespace

Var generator_adv_loss(const Var& fake_scores) { return ag::neg(ag::mean(fake_scores)); }

Var critic_adv_loss(const Var& real_scores, const Var& fake_scores)
{
    return ag::sub(ag::mean(fake_scores), ag::mean(real_scores));
}

GradientPenalty gradient_penalty(const Critic& critic, const Tensor& real, const Tensor& fake, double eps,
                                 double coefficient)
{
    if (real.shape() != fake.shape()) {
        throw InvalidInput("gradient_penalty: real " + shape_str(real.shape()) + " vs fake " + shape_str(fake.shape()));
    }
    if (!(eps >= 0 && eps <= 1)) {
        throw InvalidInput("gradient_penalty: eps must lie in [0, 1]");
    }
    Tensor mixed(real.shape());
    for (std::size_t i = 0; i < mixed.size(); ++i) {
        mixed[i] = eps * real[i] + (1 - eps) * fake[i];
    }

    // Input gradient only: the critic parameters are shielded during the probe.
    Tensor g;
    {
        const FreezeGuard freeze(critic.params());
        const ag::EnableGradGuard enable;
        Var x = Var::parameter(mixed);
        ag::backward(ag::mean(critic.score(x)));
        g = x.grad();
    }

    double norm = 0;
    for (double v : g.vec()) {
        norm += v * v;
    }
    norm = std::sqrt(norm);
    Tensor direction(g.shape());
    if (norm > 0) {
        for (std::size_t i = 0; i < g.size(); ++i) {
            direction[i] = g[i] / norm;
        }
    }
    const auto [score, tangent] = critic.score_with_tangent(Var::constant(mixed), Var::constant(direction));
    const Var slope = ag::mean(tangent);
    GradientPenalty out;
    out.penalty = ag::mul_scalar(ag::square(ag::add_scalar(slope, -1.0)), coefficient);
    out.gradient_norm = norm;
    return out;
}

void clip_weights(const nn::NamedParams& params, double c)
{
    if (!(c > 0)) {
        throw InvalidInput("clip_weights: bound must be positive");
    }
    for (const auto& [name, p] : params) {
        ag::Var v = p;
        for (double& x : v.mutable_value().vec()) {
            x = std::clamp(x, -c, c);
        }
    }
}

} // namespace hmdr
