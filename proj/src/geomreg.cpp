#include "hmdr/geomreg.hpp"

#include "hmdr/error.hpp"

#include <cmath>

namespace hmdr {

using ag::Var;

namespace {

constexpr double kPoseScale = 0.05;
constexpr double kExpressionSpread = 0.02;
constexpr double kHeadGain = 0.1;

Tensor tile_rows(const Tensor& row, int count)
{
    const int p = row.dim(0);
    Tensor out({count, p});
    for (int b = 0; b < count; ++b) {
        std::copy(row.vec().begin(), row.vec().end(), out.vec().begin() + static_cast<std::ptrdiff_t>(b) * p);
    }
    return out;
}

} // namespace

GeomRegressor::GeomRegressor(const MorphableModel& model, const LandmarkConfig& landmarks,
                             const GeomRegConfig& config, std::uint64_t seed)
    : model_(&model), landmarks_(landmarks), config_(config)
{
    model.validate();
    if (config.input_size < 16 || config.base_channels < 1 || config.refine_hidden < 1 || config.feedback_hidden < 1) {
        throw InvalidInput("geomreg: input_size >= 16 and positive widths required");
    }
    for (int i : landmarks.indices) {
        if (i < 0 || i >= static_cast<int>(model.landmark_indices.size())) {
            throw InvalidInput("geomreg: landmark index " + std::to_string(i) + " outside the model's landmark set");
        }
    }
    const int p = model.param_count(), n = landmarks.size();
    if (n < 1) {
        throw InvalidInput("geomreg: empty landmark configuration");
    }

    param_mean_ = Tensor({p});
    const auto neutral = FaceParams::neutral(model.id_rank(), model.exp_rank()).flatten();
    std::copy(neutral.begin(), neutral.end(), param_mean_.vec().begin());
    param_scale_ = Tensor({p}, 1.0);
    for (int k = 0; k < 12; ++k) {
        param_scale_[k] = kPoseScale;
    }
    if (static_cast<int>(model.identity_scale.size()) == model.id_rank() &&
        model.id_rank() == face::kIdentityCount) {
        const auto& spread = face::FaceShape::identity_spread();
        for (int k = 0; k < model.id_rank(); ++k) {
            param_scale_[12 + k] = std::max(1e-3, spread[k] * model.identity_scale[k]);
        }
    }
    if (static_cast<int>(model.expression_scale.size()) == model.exp_rank()) {
        for (int k = 0; k < model.exp_rank(); ++k) {
            param_scale_[12 + model.id_rank() + k] = std::max(1e-3, kExpressionSpread * model.expression_scale[k]);
        }
    }

    nn::Rng rng(nn::derive_seed(seed, "geomreg"));
    const int c = config.base_channels;
    const int widths[5] = {3, c, 2 * c, 4 * c, 8 * c};
    for (int i = 0; i < 4; ++i) {
        backbone_.push_back(nn::Conv2d::make(widths[i], widths[i + 1], 3, {2, 1, 1}, rng));
        backbone_.back().collect("geom.backbone" + std::to_string(i), params_);
    }
    head_ = nn::Linear::make(8 * c, p, rng, kHeadGain);
    head_.collect("geom.head", params_);

    refine_point_ = nn::Linear::make(3, config.refine_hidden, rng);
    refine_code_ = nn::Linear::make(p, config.refine_hidden, rng);
    refine_out_ = nn::Linear::zeros(config.refine_hidden, 3);
    refine_point_.collect("geom.refine.point", params_);
    refine_code_.collect("geom.refine.code", params_);
    refine_out_.collect("geom.refine.out", params_);

    feedback_in_ = nn::Linear::make(3 * n, config.feedback_hidden, rng);
    feedback_out_ = nn::Linear::make(config.feedback_hidden, p, rng, kHeadGain);
    feedback_in_.collect("geom.feedback.in", params_);
    feedback_out_.collect("geom.feedback.out", params_);
}

void GeomRegressor::check_frames(const Var& frames) const
{
    const auto& s = frames.shape();
    if (s.size() != 4 || s[1] != 3 || s[2] != config_.input_size || s[3] != config_.input_size) {
        throw InvalidInput("geomreg: expected frames [B, 3, " + std::to_string(config_.input_size) + ", " +
                           std::to_string(config_.input_size) + "], got " + shape_str(s));
    }
}

Var GeomRegressor::denormalize(const Var& raw) const
{
    const int b = raw.dim(0);
    return ag::add(ag::mul(raw, Var::constant(tile_rows(param_scale_, b))), Var::constant(tile_rows(param_mean_, b)));
}

Var GeomRegressor::regress(const Var& frames) const
{
    check_frames(frames);
    Var x = frames;
    for (const auto& conv : backbone_) {
        x = ag::leaky_relu(conv(x), config_.slope);
    }
    return denormalize(head_(ag::global_avg_pool(x)));
}

Var GeomRegressor::refine(const Var& landmarks, const Var& params) const
{
    const int n = landmarks_.size(), p = model_->param_count();
    if (landmarks.value().rank() != 3 || landmarks.dim(1) != n || landmarks.dim(2) != 3) {
        throw InvalidInput("geomreg refine: expected landmarks [B, " + std::to_string(n) + ", 3], got " +
                           shape_str(landmarks.shape()));
    }
    const int b = landmarks.dim(0);
    if (params.shape() != Shape{b, p}) {
        throw InvalidInput("geomreg refine: expected params [" + std::to_string(b) + ", " + std::to_string(p) +
                           "], got " + shape_str(params.shape()));
    }
    Tensor inv({p});
    for (int k = 0; k < p; ++k) {
        inv[k] = 1.0 / param_scale_[k];
    }
    const Var normalized =
        ag::mul(ag::sub(params, Var::constant(tile_rows(param_mean_, b))), Var::constant(tile_rows(inv, b)));
    std::vector<int> owner;
    owner.reserve(static_cast<std::size_t>(b) * n);
    for (int k = 0; k < b; ++k) {
        owner.insert(owner.end(), static_cast<std::size_t>(n), k);
    }
    const Var code = ag::gather(refine_code_(normalized), owner);
    const Var points = ag::reshape(landmarks, {b * n, 3});
    const Var h = ag::leaky_relu(ag::add(refine_point_(points), code), config_.slope);
    return ag::add(landmarks, ag::reshape(refine_out_(h), {b, n, 3}));
}

Var GeomRegressor::feedback(const Var& landmarks) const
{
    const int n = landmarks_.size();
    if (landmarks.value().rank() != 3 || landmarks.dim(1) != n || landmarks.dim(2) != 3) {
        throw InvalidInput("geomreg feedback: expected landmarks [B, " + std::to_string(n) + ", 3], got " +
                           shape_str(landmarks.shape()));
    }
    const int b = landmarks.dim(0);
    const Var h = ag::leaky_relu(feedback_in_(ag::reshape(landmarks, {b, 3 * n})), config_.slope);
    return denormalize(feedback_out_(h));
}

GeomOutput GeomRegressor::run(const Var& frames) const
{
    GeomOutput out;
    out.params = regress(frames);
    out.vertices = reconstruct_vertices(*model_, out.params);
    const Var all = mesh_landmarks(*model_, out.vertices); // [B, 478, 3]
    const int b = frames.dim(0), total = all.dim(1), n = landmarks_.size();
    std::vector<int> rows;
    rows.reserve(static_cast<std::size_t>(b) * n);
    for (int k = 0; k < b; ++k) {
        for (int i : landmarks_.indices) {
            rows.push_back(k * total + i);
        }
    }
    out.landmarks = ag::reshape(ag::gather(ag::reshape(all, {b * total, 3}), rows), {b, n, 3});
    out.refined = refine(out.landmarks, out.params);
    out.feedback_params = feedback(out.refined);
    return out;
}

// ---- single-frame conveniences ------------------------------------------------

namespace {

Tensor as_batch(const Tensor& frame)
{
    if (frame.rank() != 3) {
        throw InvalidInput("geomreg: expected a frame [3, S, S], got " + shape_str(frame.shape()));
    }
    return frame.reshaped({1, frame.dim(0), frame.dim(1), frame.dim(2)});
}

FaceParams to_params(const GeomRegressor& reg, const Tensor& row)
{
    return FaceParams::unflatten(row.to_vector(), reg.model().id_rank(), reg.model().exp_rank());
}

Tensor params_row(const FaceParams& p)
{
    const auto flat = p.flatten();
    return Tensor({1, static_cast<int>(flat.size())}, flat);
}

} // namespace

FaceParams regress_params(const GeomRegressor& reg, const Tensor& frame)
{
    ag::NoGradGuard guard;
    return to_params(reg, reg.regress(Var::constant(as_batch(frame))).value());
}

LandmarkSet refine_landmarks(const GeomRegressor& reg, const LandmarkSet& landmarks, const FaceParams& params)
{
    ag::NoGradGuard guard;
    const Tensor t = landmarks.to_tensor();
    const Var out = reg.refine(Var::constant(t.reshaped({1, t.dim(0), 3})), Var::constant(params_row(params)));
    return LandmarkSet::from_tensor(out.value().reshaped({t.dim(0), 3}));
}

FaceParams params_from_landmarks(const GeomRegressor& reg, const LandmarkSet& landmarks)
{
    ag::NoGradGuard guard;
    const Tensor t = landmarks.to_tensor();
    return to_params(reg, reg.feedback(Var::constant(t.reshaped({1, t.dim(0), 3}))).value());
}

FaceMesh reconstruct_from_frame(const GeomRegressor& reg, const Tensor& frame)
{
    return reconstruct_mesh(reg.model(), regress_params(reg, frame));
}

std::vector<FaceMesh> reconstruct_clip(const GeomRegressor& reg, const Tensor& frames)
{
    ag::NoGradGuard guard;
    const Tensor params = reg.regress(Var::constant(frames)).value();
    const int p = params.dim(1);
    std::vector<FaceMesh> meshes;
    meshes.reserve(static_cast<std::size_t>(params.dim(0)));
    for (int b = 0; b < params.dim(0); ++b) {
        const std::vector<double> row(params.vec().begin() + static_cast<std::ptrdiff_t>(b) * p,
                                      params.vec().begin() + static_cast<std::ptrdiff_t>(b + 1) * p);
        meshes.push_back(
            reconstruct_mesh(reg.model(), FaceParams::unflatten(row, reg.model().id_rank(), reg.model().exp_rank())));
    }
    return meshes;
}

// ---- losses and pretraining ----------------------------------------------------

namespace {

Var scaled_abs_error(const GeomRegressor& reg, const Var& pred, const Tensor& target)
{
    const int b = pred.dim(0), p = pred.dim(1);
    Tensor inv({p});
    for (int k = 0; k < p; ++k) {
        inv[k] = 1.0 / reg.param_scale()[k];
    }
    return ag::mean(ag::abs(ag::mul(ag::sub(pred, Var::constant(target)), Var::constant(tile_rows(inv, b)))));
}

} // namespace

Var synergy_loss(const GeomRegressor& reg, const GeomOutput& out, const Tensor& gt_landmarks, HuberParams huber)
{
    const Var consistency = scaled_abs_error(reg, out.feedback_params, out.params.value());
    return ag::add(consistency, dense_lm_loss(out.refined, gt_landmarks, huber));
}

std::vector<double> pretrain_geomreg(GeomRegressor& reg, const Tensor& frames, const Tensor& gt_params,
                                     const Tensor& gt_landmarks, const GeomPretrainOptions& options)
{
    const int m = frames.rank() == 4 ? frames.dim(0) : 0;
    const int p = reg.model().param_count(), n = reg.landmark_config().size();
    if (m < 1 || gt_params.shape() != Shape{m, p} || gt_landmarks.shape() != Shape{m, n, 3}) {
        throw InvalidInput("pretrain_geomreg: need frames [M, 3, S, S], params [M, " + std::to_string(p) +
                           "], landmarks [M, " + std::to_string(n) + ", 3]");
    }
    if (options.iterations < 0 || options.batch < 1) {
        throw InvalidInput("pretrain_geomreg: iterations >= 0 and batch >= 1 required");
    }
    nn::Adam adam(reg.params(), {options.lr});
    nn::Rng rng(nn::derive_seed(options.seed, "geomreg-pretrain"));
    const Var all_frames = Var::constant(frames);
    const Var all_params = Var::constant(gt_params);
    const Var all_landmarks = Var::constant(gt_landmarks);
    std::vector<double> history;
    history.reserve(static_cast<std::size_t>(options.iterations));
    const int batch = std::min(options.batch, m);
    const double pixels = reg.config().input_size;
    for (int it = 0; it < options.iterations; ++it) {
        std::vector<int> pick(static_cast<std::size_t>(batch));
        for (int& k : pick) {
            k = static_cast<int>(rng.bits() % static_cast<std::uint64_t>(m));
        }
        const Var x = ag::gather(all_frames, pick);
        const Tensor tp = ag::gather(all_params, pick).value();
        const Tensor tl = ag::gather(all_landmarks, pick).value();
        const GeomOutput out = reg.run(x);
        const Var lm = dense_lm_loss(out.refined, tl);
        // Landmark terms in pixel units so they are not swamped by the parameter terms.
        Tensor tl_px = tl;
        for (double& v : tl_px.vec()) {
            v *= pixels;
        }
        Var loss = ag::add(scaled_abs_error(reg, out.params, tp), scaled_abs_error(reg, out.feedback_params, tp));
        loss = ag::add(loss, ag::add(dense_lm_loss(ag::mul_scalar(out.landmarks, pixels), tl_px),
                                     dense_lm_loss(ag::mul_scalar(out.refined, pixels), tl_px)));
        if (!std::isfinite(loss.item())) {
            throw NumericError("pretrain_geomreg: non-finite loss at iteration " + std::to_string(it));
        }
        adam.zero_grad();
        ag::backward(loss);
        adam.step();
        history.push_back(lm.item());
    }
    return history;
}

} // namespace hmdr
