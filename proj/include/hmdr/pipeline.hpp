#pragma once

// Training protocol, inference, evaluation and the landmark-density ablation.

#include "hmdr/dataio.hpp"
#include "hmdr/geomreg.hpp"
#include "hmdr/inpaintnet.hpp"
#include "hmdr/losses.hpp"
#include "hmdr/metrics.hpp"

#include <json.hpp>

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace hmdr {

// ---- data -----------------------------------------------------------------------------

struct TrainingClip {
    std::string name;
    VideoClip clip;
    OcclusionMask mask;
    std::vector<LandmarkSet> landmarks; // 478 per frame, from the unoccluded frames
    std::vector<FaceParams> params;     // optional ground-truth geometry per frame
    int reference_index = 0;
};

struct Dataset {
    std::vector<TrainingClip> clips;

    bool empty() const { return clips.empty(); }
    int size() const { return static_cast<int>(clips.size()); }
    /// All clips share frame count and resolution; landmarks cover every frame.
    void validate() const;
};

struct SyntheticDatasetOptions {
    int clips = 4;
    int frames = 8;
    int size = 64;
    std::uint64_t seed = 0;
};

/// Synthetic clips under the canonical HMD mask, with exact geometry.
Dataset make_synthetic_dataset(const SyntheticDatasetOptions& options);
/// One clip directory per clip (see write_synthetic_clip) plus dataset.json.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

// ---- configuration -----------------------------------------------------------------------

/// Optional archive paths for the frozen scorers. Empty = seeded stub.
struct ScorerPaths {
    std::string vgg;      // HMDR_VGG_WEIGHTS
    std::string fer;      // HMDR_FER_WEIGHTS
    std::string embedder; // HMDR_EMBEDDER_WEIGHTS
    std::string lpips;    // HMDR_LPIPS_WEIGHTS

    /// Environment variables take precedence over the configured paths.
    ScorerPaths with_env() const;
    bool operator==(const ScorerPaths&) const = default;
};

enum class CriticMode { GradientPenalty, WeightClipping };

struct TrainConfig {
    // Clip shape (one clip per step).
    int frames = 8;
    int size = 64;

    std::string landmark_config = "dense216";
    double landmark_radius = 0.0;
    bool random_reference = true;

    GeneratorConfig generator;
    DiscriminatorConfig discriminator;
    GeomRegConfig geomreg;

    // Optimizer.
    double lr = 9.6e-5;
    double geomreg_lr = 9.6e-5;

    // Stage schedule. An epoch is one pass over the clip set.
    int stage1_epochs = 100;
    int stage2_epochs = -1; // -1: same as stage 1
    LossWeights stage1_weights{0.0, 2.0, 10.0, 1.0, 1.0, 1.0};
    LossWeights stage2_weights{};

    // Critic.
    CriticMode critic_mode = CriticMode::GradientPenalty;
    double gp_coefficient = 10.0;
    double clip_value = 0.01;
    int critic_steps = 1;

    // Geometry branch.
    bool pretrain_geomreg = true;
    GeomPretrainOptions geomreg_pretrain;
    double synergy_weight = 1.0; // stage-2 coupling of the geometry fine-tuning term

    ScorerPaths scorers;
    int feature_width = 8;

    std::uint64_t seed = 0;

    int stage2_epoch_count() const { return stage2_epochs < 0 ? stage1_epochs : stage2_epochs; }
    /// Stage 1 must have lambda_adv = 0; shapes must suit the networks.
    void validate() const;

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
    static TrainConfig load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    /// Small preset that trains in minutes on one CPU core.
    static TrainConfig desk();
};

// ---- models ---------------------------------------------------------------------------------

/// Everything a run trains, built deterministically from a config.
struct ModelBundle {
    TrainConfig config;
    LandmarkConfig landmarks;
    std::unique_ptr<Generator> generator;
    std::unique_ptr<Discriminator> discriminator;
    std::unique_ptr<GeomRegressor> geomreg;

    explicit ModelBundle(const TrainConfig& config);

    /// Loads parameters from a checkpoint written by train(). Throws
    /// IncompatibleCheckpoint when the checkpoint does not fit.
    static ModelBundle from_checkpoint(const std::filesystem::path& path);
};

// ---- training ---------------------------------------------------------------------------------

struct LossLogRow {
    std::string stage; // "stage1" | "stage2"
    int epoch = 0;
    long long iteration = 0; // global, starting at 0
    std::string clip;
    LossWeights weights;
    std::array<std::optional<double>, kLossTermCount> terms; // absent = not evaluated
    double total = 0.0;
    std::optional<double> critic;           // mean(fake) - mean(real)
    std::optional<double> gradient_penalty; // penalty value
    std::optional<double> synergy;          // geometry fine-tuning term

    bool operator==(const LossLogRow&) const = default;
};

struct LossLog {
    std::vector<LossLogRow> rows;

    static const std::vector<std::string>& columns();
    std::string to_csv() const;
    void save(const std::filesystem::path& path) const;
    static LossLog load(const std::filesystem::path& path);
    /// Rows of one stage.
    std::vector<LossLogRow> stage(const std::string& name) const;
};

struct RunManifest {
    nlohmann::json config;
    std::uint64_t seed = 0;
    std::map<std::string, std::string> checkpoints; // stage -> path
    std::string loss_log;
    std::string metrics;
    std::uint64_t geomreg_checksum_init = 0;   // after pretraining, before stage 1
    std::uint64_t geomreg_checksum_stage1 = 0; // at the end of stage 1
    long long stage1_iterations = 0;
    long long stage2_iterations = 0;
    bool resumed = false;

    nlohmann::json to_json() const;
    static RunManifest from_json(const nlohmann::json& j);
    void save(const std::filesystem::path& path) const;
    static RunManifest load(const std::filesystem::path& path);
};

struct TrainOptions {
    /// Skip stages whose checkpoint already exists in the output directory.
    bool resume = false;
    /// Called after every logged iteration.
    std::function<void(const LossLogRow&)> on_iteration;
};

struct TrainResult {
    RunManifest manifest;
    LossLog log;
};

/// Stage 1 (lambda_adv = 0, geometry frozen) then stage 2 (adversarial, geometry
/// fine-tuned). Writes checkpoints/stage{1,2}.ckpt, loss_log.csv and
/// manifest.json under `out`. Non-finite losses raise NumericError.
TrainResult train(const TrainConfig& config, const Dataset& dataset, const std::filesystem::path& out,
                  const TrainOptions& options = {});

// ---- inference and evaluation -----------------------------------------------------------

struct InferenceResult {
    VideoClip inpainted;
    std::vector<FaceMesh> meshes; // one per frame, from the inpainted frames only
};

/// `landmarks` holds 478 points per frame (the active subset is taken here).
InferenceResult infer(const ModelBundle& models, const VideoClip& clip, const OcclusionMask& mask,
                      const std::vector<LandmarkSet>& landmarks, int reference_index = 0);

/// Writes inpainted frames and meshes for every clip of `dataset`.
void infer_dataset(const ModelBundle& models, const Dataset& dataset, const std::filesystem::path& out);

struct EvaluateOptions {
    /// Geometry regressor used to build meshes from predicted and ground-truth
    /// frames. Mesh metrics are skipped when null.
    const GeomRegressor* geometry = nullptr;
    std::string landmark_label;
    std::uint64_t seed = 0; // stub scorers
    ScorerPaths scorers;
};

struct NamedClip {
    std::string name;
    VideoClip clip;
};

MetricsReport evaluate_clips(const std::vector<NamedClip>& pred, const std::vector<NamedClip>& gt,
                             const EvaluateOptions& options);
/// Directories of clip folders matched by name. An inventory mismatch raises
/// InvalidInput naming the offending clips.
MetricsReport evaluate(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir,
                       const EvaluateOptions& options);

// ---- ablation ------------------------------------------------------------------------------

struct AblationRun {
    std::string landmark_config;
    std::optional<MetricsReport> report;
    std::string error; // non-empty when the run failed
    nlohmann::json config;
};

struct AblationResult {
    std::vector<AblationRun> runs;
    bool ok() const;
    std::vector<MetricsReport> reports() const;
};

/// Trains and evaluates one run per landmark configuration with a shared
/// seed. Writes one sub-directory per configuration plus comparison.csv and
/// comparison.txt under `out`. Failed runs are recorded and the rest continue.
AblationResult ablate(const TrainConfig& base, const Dataset& train_set, const Dataset& eval_set,
                      const std::filesystem::path& out,
                      const std::vector<std::string>& configs = LandmarkConfig::ablation_names(),
                      const std::function<void(const std::string&)>& progress = {});

} // namespace hmdr
