#pragma once

// Evaluation battery: RGB metrics over clips and distance metrics over meshes.

#include "hmdr/clip.hpp"
#include "hmdr/losses.hpp"
#include "hmdr/morphable.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace hmdr {

// ---- pixel metrics ----------------------------------------------------------------

inline constexpr double kPsnrCap = 100.0;

double mse(const VideoClip& pred, const VideoClip& gt);
double mse(const FrameView& pred, const FrameView& gt);
/// 10 log10(1 / mse), capped at kPsnrCap.
double psnr_from_mse(double mse);
double psnr(const VideoClip& pred, const VideoClip& gt);

/// BT.601 luma of an RGB frame, row-major [H][W].
std::vector<double> to_gray(const FrameView& frame);

struct SsimOptions {
    int window = 11;
    double sigma = 1.5;
    double dynamic_range = 255.0;
    double k1 = 0.01;
    double k2 = 0.03;
};

/// Mean local SSIM over all fully contained Gaussian windows of two grayscale
/// images with values in [0, 1] (scaled to the dynamic range first).
double ssim_gray(const std::vector<double>& a, const std::vector<double>& b, int height, int width,
                 const SsimOptions& options = {});
double ssim(const FrameView& pred, const FrameView& gt, const SsimOptions& options = {});
/// Mean over frames.
double ssim(const VideoClip& pred, const VideoClip& gt, const SsimOptions& options = {});

// ---- point sets and meshes -----------------------------------------------------------

/// Exact nearest-neighbour queries over a fixed point set.
class KdTree {
public:
    explicit KdTree(std::vector<Point3> points);

    struct Hit {
        int index = -1;
        double distance = 0.0;
    };
    Hit nearest(const Point3& query) const;
    int size() const { return static_cast<int>(points_.size()); }

private:
    struct Node {
        int point = -1;
        int axis = 0;
        int left = -1;
        int right = -1;
    };
    int build(std::vector<int>& order, int lo, int hi, int depth);
    void search(int node, const Point3& q, Hit& best, double& best2) const;

    std::vector<Point3> points_;
    std::vector<Node> nodes_;
    int root_ = -1;
};

/// Nearest-neighbour distance from every point of `from` to the set `to`.
std::vector<double> nearest_distances(const std::vector<Point3>& from, const KdTree& to);

enum class HausdorffMode {
    Mean, // max of the two directed mean distances
    Max,  // max of the two directed max distances (classical Hausdorff)
};

/// Distances are returned in the units of the vertices. Meshes from the toy
/// model are in frame-width-normalized coordinates.
double chamfer(const std::vector<Point3>& a, const std::vector<Point3>& b);
double rms_error(const std::vector<Point3>& a, const std::vector<Point3>& b);
double mean_hausdorff(const std::vector<Point3>& a, const std::vector<Point3>& b,
                      HausdorffMode mode = HausdorffMode::Mean);

double chamfer(const FaceMesh& a, const FaceMesh& b);
double rms_error(const FaceMesh& a, const FaceMesh& b);
double mean_hausdorff(const FaceMesh& a, const FaceMesh& b, HausdorffMode mode = HausdorffMode::Mean);

// ---- learned-metric scorers ---------------------------------------------------------

/// Frame -> embedding vector for FID.
class Embedder {
public:
    virtual ~Embedder() = default;
    virtual std::vector<double> embed(const FrameView& frame) const = 0;
    virtual int dim() const = 0;
    virtual std::string name() const = 0;
};

/// Fixed projection of the 8x8 average-pooled RGB frame (192 values).
class ProjectionEmbedder final : public Embedder {
public:
    static constexpr int kGrid = 8;
    static constexpr int kInputs = kGrid * kGrid * 3;
    static ProjectionEmbedder random(std::uint64_t seed, int dim = 16);
    /// Tensor archive with "embedder.weight" [D, 192] and optional "embedder.bias" [D].
    static ProjectionEmbedder load(const std::filesystem::path& path);

    std::vector<double> embed(const FrameView& frame) const override;
    int dim() const override { return weight_.dim(0); }
    std::string name() const override { return name_; }

private:
    Tensor weight_;
    Tensor bias_;
    std::string name_;
};

/// Frechet distance between Gaussian fits of two embedding sets (rows).
/// Each set needs at least two samples.
double frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b);
/// FID over the frames of two clips.
double fid(const std::vector<FrameView>& pred, const std::vector<FrameView>& gt, const Embedder& embedder);
double fid(const VideoClip& pred, const VideoClip& gt, const Embedder& embedder);

/// Per-pair perceptual distance.
class PerceptualScorer {
public:
    virtual ~PerceptualScorer() = default;
    virtual double distance(const FrameView& a, const FrameView& b) const = 0;
    virtual std::string name() const = 0;
};

/// LPIPS-style distance: channel-normalized features of a frozen extractor,
/// squared difference averaged over positions and summed over layers.
class FeaturePerceptualScorer final : public PerceptualScorer {
public:
    explicit FeaturePerceptualScorer(std::shared_ptr<const FeatureExtractor> extractor);
    double distance(const FrameView& a, const FrameView& b) const override;
    std::string name() const override { return "lpips:" + extractor_->name(); }

private:
    std::shared_ptr<const FeatureExtractor> extractor_;
};

double lpips(const FrameView& pred, const FrameView& gt, const PerceptualScorer& scorer);
/// Mean over frames.
double lpips(const VideoClip& pred, const VideoClip& gt, const PerceptualScorer& scorer);

/// Scorers resolved from environment overrides (HMDR_EMBEDDER_WEIGHTS,
/// HMDR_LPIPS_WEIGHTS) with seeded stubs as the fallback.
std::unique_ptr<Embedder> default_embedder(std::uint64_t seed = 0);
std::unique_ptr<PerceptualScorer> default_perceptual_scorer(std::uint64_t seed = 0);

// ---- report ------------------------------------------------------------------------------

/// Column headers in report order: the RGB table followed by the geometry table.
const std::vector<std::string>& rgb_metric_columns();
const std::vector<std::string>& mesh_metric_columns();
std::vector<std::string> metric_columns();

struct MetricsRow {
    std::string clip;
    std::map<std::string, double> values; // keyed by column header; missing = not measured
};

struct MetricsReport {
    std::string landmark_config; // e.g. "216 LM"
    std::string model = "Ours";
    std::vector<MetricsRow> rows;

    void add(MetricsRow row);
    /// Mean of the recorded values of one column; nullopt when no row has it.
    std::optional<double> average(const std::string& column) const;
    MetricsRow averages() const;

    /// Label in the "Ours (216 LM)" style.
    std::string label() const;

    /// CSV with columns clip, Model, landmark_config, then metric_columns().
    /// Per-clip rows followed by an "average" row.
    std::string to_csv() const;
    void save_csv(const std::filesystem::path& path) const;
    static MetricsReport load_csv(const std::filesystem::path& path);
};

/// Comparison table: one row per report (its averages), columns Model,
/// Method (the landmark label), metric_columns().
std::string comparison_csv(const std::vector<MetricsReport>& reports);
/// Plain-text side-by-side rendering of the comparison table.
std::string comparison_table(const std::vector<MetricsReport>& reports);

} // namespace hmdr
