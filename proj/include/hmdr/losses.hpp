#pragma once

// The six-term training objective and its pluggable scorers.

#include "hmdr/autograd.hpp"
#include "hmdr/inpaintnet.hpp"
#include "hmdr/nn.hpp"

#include <array>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace hmdr {

// ---- weights and report ------------------------------------------------------

enum class LossTerm { Adv, Fer, Style, Vgg, Recon, DenseLm };
inline constexpr int kLossTermCount = 6;
/// Fixed term order: adv, fer, style, vgg, recon, denselm.
const std::array<LossTerm, kLossTermCount>& loss_terms();
std::string to_string(LossTerm term);

struct LossWeights {
    double adv = 1.0;
    double fer = 2.0;
    double style = 10.0;
    double vgg = 1.0;
    double recon = 1.0;
    double denselm = 1.0;

    double& operator[](LossTerm term);
    double operator[](LossTerm term) const;
    /// Throws InvalidInput for negative or non-finite weights.
    void validate() const;

    bool operator==(const LossWeights&) const = default;
};

/// Term values; any term may be absent, which total_loss rejects.
struct LossTerms {
    std::array<std::optional<double>, kLossTermCount> values;

    std::optional<double>& operator[](LossTerm term) { return values[static_cast<std::size_t>(term)]; }
    const std::optional<double>& operator[](LossTerm term) const { return values[static_cast<std::size_t>(term)]; }
    static LossTerms all(double value);
};

struct LossReport {
    std::array<double, kLossTermCount> terms{};
    LossWeights weights;
    double total = 0.0;

    double operator[](LossTerm term) const { return terms[static_cast<std::size_t>(term)]; }
};

/// Weighted sum. Missing terms raise InvalidInput; non-finite terms raise NumericError.
LossReport total_loss(const LossTerms& terms, const LossWeights& weights);

/// Differentiable objective. Undefined Vars are treated as missing unless their
/// weight is zero, in which case they contribute nothing.
struct LossVars {
    std::array<ag::Var, kLossTermCount> values;

    ag::Var& operator[](LossTerm term) { return values[static_cast<std::size_t>(term)]; }
    const ag::Var& operator[](LossTerm term) const { return values[static_cast<std::size_t>(term)]; }
};

ag::Var total_loss(const LossVars& terms, const LossWeights& weights, LossReport* report = nullptr);

// ---- pixel and feature losses -------------------------------------------------------

/// Mean absolute error over all elements.
ag::Var recon_loss(const ag::Var& pred, const Tensor& gt);

struct FeatureMap {
    std::string tag;
    ag::Var value; // [N, C, H, W]
};

/// Fixed (non-trained) feature extractor over frames [N, 3, H, W].
class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    virtual std::vector<FeatureMap> extract(const ag::Var& frames) const = 0;
    virtual std::string name() const = 0;
};

/// Raw pixels as the single layer; vgg_loss reduces to recon_loss.
class IdentityExtractor final : public FeatureExtractor {
public:
    std::vector<FeatureMap> extract(const ag::Var& frames) const override;
    std::string name() const override { return "identity"; }
};

/// Average-pooled raw pixels at 4 scales (1, 2, 4, 8).
class PooledPixelExtractor final : public FeatureExtractor {
public:
    std::vector<FeatureMap> extract(const ag::Var& frames) const override;
    std::string name() const override { return "pooled-pixels"; }
};

/// Four conv stages (3x3 conv, leaky ReLU, 2x2 average pool) with frozen
/// weights: seeded random, or loaded from a tensor archive with entries
/// "features.stage{i}.weight" / ".bias".
class ConvFeatureExtractor final : public FeatureExtractor {
public:
    static constexpr int kStages = 4;

    static ConvFeatureExtractor random(std::uint64_t seed, int width = 8);
    static ConvFeatureExtractor load(const std::filesystem::path& path);

    std::vector<FeatureMap> extract(const ag::Var& frames) const override;
    std::string name() const override { return name_; }

private:
    std::vector<nn::Conv2d> stages_;
    std::string name_;
};

/// Mean absolute feature difference, averaged over layers.
ag::Var vgg_loss(const ag::Var& pred, const Tensor& gt, const FeatureExtractor& extractor);
/// Mean absolute Gram-matrix difference (Gram / (C*H*W)), averaged over layers.
ag::Var style_loss(const ag::Var& pred, const Tensor& gt, const FeatureExtractor& extractor);

// ---- expression ------------------------------------------------------------------

inline constexpr int kExpressionClasses = 8;
/// surprise, angry, sad, contempt, disgust, fear, neutral, happy
const std::array<std::string, kExpressionClasses>& expression_classes();

/// Per-frame probability vectors [N, 8] for frames [N, 3, H, W].
class ExpressionScorer {
public:
    virtual ~ExpressionScorer() = default;
    virtual ag::Var scores(const ag::Var& frames) const = 0;
    virtual std::string name() const = 0;
};

/// The same distribution for every frame.
class ConstantScorer final : public ExpressionScorer {
public:
    explicit ConstantScorer(std::array<double, kExpressionClasses> probabilities);
    static ConstantScorer uniform();
    ag::Var scores(const ag::Var& frames) const override;
    std::string name() const override { return "constant"; }

private:
    std::array<double, kExpressionClasses> probabilities_;
};

/// softmax(W f / ||f|| + b) over 8x8-pooled grayscale features f. Scale
/// invariant: multiplying a frame by c > 0 leaves its scores unchanged.
class LinearExpressionScorer final : public ExpressionScorer {
public:
    static constexpr int kGrid = 8;

    /// Seeded random projection; `sharpness` scales the logits.
    static LinearExpressionScorer random(std::uint64_t seed, double sharpness = 4.0);
    /// Tensor archive with "fer.weight" [8, 64] and "fer.bias" [8].
    static LinearExpressionScorer load(const std::filesystem::path& path);

    ag::Var scores(const ag::Var& frames) const override;
    std::string name() const override { return name_; }

private:
    Tensor weight_; // [8, 64]
    Tensor bias_;   // [8]
    std::string name_;
};

/// Mean cross-entropy of scorer(pred) against the argmax labels of scorer(gt).
ag::Var fer_loss(const ag::Var& pred, const Tensor& gt, const ExpressionScorer& scorer);

// ---- adversarial ------------------------------------------------------------------

/// -mean(fake)
ag::Var generator_adv_loss(const ag::Var& fake_scores);
/// mean(fake) - mean(real)
ag::Var critic_adv_loss(const ag::Var& real_scores, const ag::Var& fake_scores);

/// Scalar-per-clip critic view used by the penalty.
class Critic {
public:
    virtual ~Critic() = default;
    /// Score map for a clip [T, 3, H, W].
    virtual ag::Var score(const ag::Var& clip) const = 0;
    /// Score map and its directional derivative along `tangent`.
    virtual std::pair<ag::Var, ag::Var> score_with_tangent(const ag::Var& clip, const ag::Var& tangent) const = 0;
    virtual const nn::NamedParams& params() const = 0;
};

/// Binds a discriminator to a fixed mask.
class MaskedCritic final : public Critic {
public:
    MaskedCritic(const Discriminator& d, Tensor mask) : d_(d), mask_(std::move(mask)) {}
    ag::Var score(const ag::Var& clip) const override { return d_.score(clip, mask_); }
    std::pair<ag::Var, ag::Var> score_with_tangent(const ag::Var& clip, const ag::Var& tangent) const override
    {
        return d_.score_with_tangent(clip, mask_, tangent);
    }
    const nn::NamedParams& params() const override { return d_.params(); }

private:
    const Discriminator& d_;
    Tensor mask_;
};

struct GradientPenalty {
    ag::Var penalty;          // coefficient * (||grad|| - 1)^2, differentiable in the critic parameters
    double gradient_norm = 0; // ||d mean(score) / d clip|| at the interpolate
};

/// Penalty at x = eps * real + (1 - eps) * fake for the clip-mean critic score.
/// The input gradient g is found with one backward pass; the penalty is then
/// formed from the directional derivative along g/||g||, which equals ||g||
/// and has the same parameter gradient as the norm itself.
GradientPenalty gradient_penalty(const Critic& critic, const Tensor& real, const Tensor& fake, double eps,
                                 double coefficient = 10.0);

/// Weight clipping mode: clamps every critic parameter to [-c, c].
void clip_weights(const nn::NamedParams& params, double c);

} // namespace hmdr
