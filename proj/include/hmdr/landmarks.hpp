#pragma once

#include "hmdr/autograd.hpp"
#include "hmdr/clip.hpp"
#include "hmdr/face_geometry.hpp"

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace hmdr {

using Point3 = face::Vec3;

/// 3D landmarks: x, y in normalized image coordinates, z relative depth.
struct LandmarkSet {
    std::vector<Point3> points;

    int size() const { return static_cast<int>(points.size()); }
    /// [N, 3]
    Tensor to_tensor() const;
    static LandmarkSet from_tensor(const Tensor& t);

    bool operator==(const LandmarkSet&) const = default;
};

/// Named ordered subset of the 478-point layout.
struct LandmarkConfig {
    std::string name;
    std::vector<int> indices;

    int size() const { return static_cast<int>(indices.size()); }
    /// "216 LM" style label used in reports.
    std::string label() const;

    static LandmarkConfig full();
    /// One of dense216, standard68, focus20, minimal10 (or full478).
    static LandmarkConfig named(std::string_view name);
    /// The four ablation configurations, densest first.
    static const std::vector<std::string>& ablation_names();
    /// Accepts a configuration name or a JSON object {"name": ...} /
    /// {"name": ..., "indices": [...]}.
    static LandmarkConfig parse(const std::string& text);
};

/// Indices of the 478 layout whose base-face landmarks fall inside the
/// canonical HMD outline, recomputed from geometry.
std::vector<int> compute_dense216();

LandmarkSet subset(const LandmarkSet& landmarks, const LandmarkConfig& config);
/// Points whose (x, y) fall on occluded pixels, in input order.
LandmarkSet select_masked_region(const LandmarkSet& landmarks, const OcclusionMask& mask);

/// Pixel holding a normalized coordinate: floor(x * W), clamped.
int pixel_index(double coord, int extent);

/// Single-channel [H, W] map with a disc of ones at every landmark.
Tensor rasterize(const LandmarkSet& landmarks, int height, int width, double radius);

struct HuberParams {
    double delta = 1.0;
};

double huber(double a, double b, HuberParams params = {});

/// Mean over landmarks of the per-coordinate Huber loss summed over
/// (x, y, z); z is skipped when use_z is false.
double dense_lm_loss(const LandmarkSet& predicted, const LandmarkSet& ground_truth, HuberParams params = {},
                     bool use_z = true);
/// Differentiable form on [N, 3] (or [B, N, 3], averaged over B) tensors.
ag::Var dense_lm_loss(const ag::Var& predicted, const Tensor& ground_truth, HuberParams params = {},
                      bool use_z = true);

/// 478-point landmark detector. An absent result means no face was found.
class Detector {
public:
    virtual ~Detector() = default;
    virtual std::optional<LandmarkSet> detect(const FrameView& frame) = 0;
};

/// Returns the analytic landmarks of registered synthetic frames, matched by
/// content hash (both exact and 8-bit-quantized pixels are registered).
class SyntheticDetector : public Detector {
public:
    void add(const FrameView& frame, const LandmarkSet& landmarks);
    std::optional<LandmarkSet> detect(const FrameView& frame) override;
    std::size_t registered() const { return table_.size(); }

private:
    std::unordered_map<std::uint64_t, LandmarkSet> table_;
};

class ConstantDetector : public Detector {
public:
    explicit ConstantDetector(LandmarkSet landmarks) : landmarks_(std::move(landmarks)) {}
    std::optional<LandmarkSet> detect(const FrameView&) override { return landmarks_; }

private:
    LandmarkSet landmarks_;
};

std::uint64_t frame_hash(const FrameView& frame);

/// JSON file: {"frames": [{"frame_index": t, "N": n, "points": [[x, y, z], ...]}, ...]}
void save_landmarks(const std::vector<LandmarkSet>& per_frame, const std::filesystem::path& path);
std::vector<LandmarkSet> load_landmarks(const std::filesystem::path& path);

} // namespace hmdr
