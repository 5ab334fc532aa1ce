#pragma once

#include "hmdr/clip.hpp"
#include "hmdr/face_geometry.hpp"
#include "hmdr/landmarks.hpp"
#include "hmdr/nn.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace hmdr {

/// Occluded pixels are replaced by `fill` (0 by default); others are copied.
VideoClip apply_mask(const VideoClip& clip, const OcclusionMask& mask, double fill = 0.0);

/// Frame `index` with every pixel outside the occluded region zeroed.
ReferenceFrame prepare_reference(const VideoClip& clip, const OcclusionMask& mask, int index = 0);

/// Uniform reference index in [0, T).
int random_reference_index(int frames, nn::Rng& rng);

/// Canonical HMD outline rasterized at pixel centers.
OcclusionMask canonical_hmd_mask(int height, int width);
/// Rows [i0, i1) x columns [j0, j1) occluded.
OcclusionMask rect_mask(int height, int width, int i0, int j0, int i1, int j1);

/// Motion and appearance controls of a synthetic clip. Amplitudes are in
/// face-local units; periods in frames.
struct SyntheticFaceSpec {
    int height = 64;
    int width = 64;
    double identity_jitter = 1.0; // multiples of FaceShape::identity_spread()
    double blink_amplitude = 0.022;
    double blink_period = 10.0;
    double brow_amplitude = 0.008;
    double mouth_amplitude = 0.02;
    double smile_amplitude = 0.008;
    double gaze_amplitude = 0.006;
    double motion_period = 16.0;
    double sway_amplitude = 0.01;
    double roll_amplitude = 0.03;
    double noise_amplitude = 0.015;

    /// Same appearance, no motion.
    SyntheticFaceSpec static_copy() const;
};

struct SyntheticClip {
    VideoClip clip;
    std::vector<LandmarkSet> landmarks; // 478 per frame
    std::vector<face::FaceShape> shapes;
    std::vector<face::Pose2> poses;
};

SyntheticClip generate_synthetic_clip(const SyntheticFaceSpec& spec, int frames, std::uint64_t seed);

/// Renders one face into an interleaved RGB buffer; optionally reports the
/// region of every pixel.
struct FaceAppearance {
    std::array<double, 3> background{}, skin{}, brow{}, sclera{}, iris{}, pupil{}, lips{}, mouth{};
    double noise_amplitude = 0.0;
    std::uint64_t noise_seed = 0;
};
void render_face(const face::FaceShape& shape, const face::Pose2& pose, const FaceAppearance& look, int height,
                 int width, double* rgb, std::vector<face::Region>* regions = nullptr);

/// Landmarks of a posed shape in normalized image coordinates.
LandmarkSet posed_landmarks(const face::FaceShape& shape, const face::Pose2& pose);

// Frame directories hold 00000.png, 00001.png, ...
std::string frame_filename(int index);
void save_clip(const VideoClip& clip, const std::filesystem::path& dir);
VideoClip load_clip(const std::filesystem::path& dir);

/// 8-bit grayscale, 255 = occluded.
void save_mask(const OcclusionMask& mask, const std::filesystem::path& path);
OcclusionMask load_mask(const std::filesystem::path& path);

/// JSON clip descriptor; relative paths resolve against the manifest's directory.
struct ClipManifest {
    std::string name;
    std::string frames_dir = "frames";
    std::string mask = "mask.png";
    int reference_index = 0;
    int frame_count = 0;
    int height = 0;
    int width = 0;
    std::string landmarks;    // optional per-frame landmark file
    std::string shapes;       // optional synthetic ground-truth geometry
};
void save_manifest(const ClipManifest& manifest, const std::filesystem::path& path);
ClipManifest load_manifest(const std::filesystem::path& path);

/// Writes a synthetic clip as frames, mask, landmarks and manifest under dir.
ClipManifest write_synthetic_clip(const SyntheticClip& clip, const OcclusionMask& mask, const std::string& name,
                                  const std::filesystem::path& dir, int reference_index = 0);

/// Synthetic per-frame geometry (shape parameters and pose) as JSON.
void save_shapes(const std::vector<face::FaceShape>& shapes, const std::vector<face::Pose2>& poses,
                 const std::filesystem::path& path);
void load_shapes(const std::filesystem::path& path, std::vector<face::FaceShape>& shapes,
                 std::vector<face::Pose2>& poses);

} // namespace hmdr
