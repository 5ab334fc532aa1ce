#pragma once

// Two-stage geometry regressor: frame -> model parameters -> mesh ->
// landmarks -> refined landmarks -> parameters (feedback path).

#include "hmdr/landmarks.hpp"
#include "hmdr/morphable.hpp"
#include "hmdr/nn.hpp"

#include <string>
#include <vector>

namespace hmdr {

struct GeomRegConfig {
    int input_size = 64;    // frames are input_size x input_size
    int base_channels = 16; // backbone widths c, 2c, 4c, 8c
    int refine_hidden = 32;
    int feedback_hidden = 128;
    double slope = 0.2;

    bool operator==(const GeomRegConfig&) const = default;
};

/// All intermediate outputs of one pass, batched over frames.
struct GeomOutput {
    ag::Var params;           // [B, P] regressed parameters
    ag::Var vertices;         // [B, V, 3]
    ag::Var landmarks;        // [B, N, 3] mesh landmarks of the active configuration
    ag::Var refined;          // [B, N, 3]
    ag::Var feedback_params;  // [B, P] from the refined landmarks
};

class GeomRegressor {
public:
    GeomRegressor(const MorphableModel& model, const LandmarkConfig& landmarks, const GeomRegConfig& config,
                  std::uint64_t seed);

    const MorphableModel& model() const { return *model_; }
    const LandmarkConfig& landmark_config() const { return landmarks_; }
    const GeomRegConfig& config() const { return config_; }
    const nn::NamedParams& params() const { return params_; }

    /// Frames [B, 3, S, S] -> parameters [B, P].
    ag::Var regress(const ag::Var& frames) const;
    /// Residual refinement of mesh landmarks [B, N, 3] conditioned on parameters [B, P].
    ag::Var refine(const ag::Var& landmarks, const ag::Var& params) const;
    /// Refined landmarks [B, N, 3] -> parameters [B, P].
    ag::Var feedback(const ag::Var& landmarks) const;
    /// Full pass.
    GeomOutput run(const ag::Var& frames) const;

    /// Per-dimension scale of the parameter vector used to normalize outputs
    /// and parameter losses.
    const Tensor& param_mean() const { return param_mean_; }
    const Tensor& param_scale() const { return param_scale_; }

private:
    ag::Var denormalize(const ag::Var& raw) const;
    void check_frames(const ag::Var& frames) const;

    const MorphableModel* model_;
    LandmarkConfig landmarks_;
    GeomRegConfig config_;
    std::vector<nn::Conv2d> backbone_;
    nn::Linear head_;
    nn::Linear refine_point_, refine_code_, refine_out_;
    nn::Linear feedback_in_, feedback_out_;
    Tensor param_mean_;  // [P]
    Tensor param_scale_; // [P]
    nn::NamedParams params_;
};

/// Single-frame conveniences. `frame` is [3, S, S] (channels first).
FaceParams regress_params(const GeomRegressor& reg, const Tensor& frame);
LandmarkSet refine_landmarks(const GeomRegressor& reg, const LandmarkSet& landmarks, const FaceParams& params);
FaceParams params_from_landmarks(const GeomRegressor& reg, const LandmarkSet& landmarks);
/// regress_params followed by reconstruct_mesh.
FaceMesh reconstruct_from_frame(const GeomRegressor& reg, const Tensor& frame);
/// One mesh per frame of a [T, 3, S, S] clip tensor.
std::vector<FaceMesh> reconstruct_clip(const GeomRegressor& reg, const Tensor& frames);

/// Stage-2 coupling: equal-weight sum of the feedback consistency term
/// mean|(feedback - stop_grad(params)) / scale| and the Huber landmark term
/// of the refined landmarks against `gt_landmarks` [B, N, 3].
ag::Var synergy_loss(const GeomRegressor& reg, const GeomOutput& out, const Tensor& gt_landmarks,
                     HuberParams huber = {});

struct GeomPretrainOptions {
    int iterations = 1500;
    int batch = 8;
    double lr = 1e-3;
    std::uint64_t seed = 0;
};

/// Supervised pretraining on unoccluded frames [M, 3, S, S] with ground-truth
/// parameters [M, P] and landmarks [M, N, 3] of the active configuration.
/// Returns the per-iteration landmark loss (mean Huber of refined landmarks).
std::vector<double> pretrain_geomreg(GeomRegressor& reg, const Tensor& frames, const Tensor& gt_params,
                                     const Tensor& gt_landmarks, const GeomPretrainOptions& options);

} // namespace hmdr
