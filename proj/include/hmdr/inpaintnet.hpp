#pragma once

// Gated temporal-shift generator and temporal-shift patch critic.
// Activations are laid out [T, C, H, W]: a clip is a batch of frames and the
// temporal shift mixes along the batch axis.

#include "hmdr/clip.hpp"
#include "hmdr/landmarks.hpp"
#include "hmdr/nn.hpp"

#include <string>
#include <utility>
#include <vector>

namespace hmdr {

enum class AttentionPlacement {
    Downsampling, // after each strided gated block
    Bottleneck,   // once, after the last bottleneck block
};

std::string to_string(AttentionPlacement p);
AttentionPlacement attention_placement_from_string(const std::string& s);

struct GeneratorConfig {
    int base_channels = 16;
    double shift_fraction = 0.25; // per direction
    bool identity_shift_init = false;
    double slope = 0.2;
    AttentionPlacement attention = AttentionPlacement::Downsampling;

    bool operator==(const GeneratorConfig&) const = default;
};

struct DiscriminatorConfig {
    int base_channels = 16;
    double shift_fraction = 0.25;
    bool identity_shift_init = false;
    double slope = 0.2;

    bool operator==(const DiscriminatorConfig&) const = default;
};

/// Learnable per-channel temporal mixing of the first `shifted` channels.
struct TemporalShift {
    ag::Var kernel; // [shifted, 3], taps at t-1, t, t+1

    /// 2 * round(fraction * channels) channels (capped at `channels`). The
    /// default init shifts the first half backward in time (output[t] =
    /// input[t-1]) and the second half forward; identity_init sets the center
    /// tap only.
    static TemporalShift make(int channels, double fraction, bool identity_init);
    int shifted() const { return kernel.defined() ? kernel.dim(0) : 0; }
    ag::Var operator()(const ag::Var& x) const;
};

/// temporal_shift -> [upsample] -> conv with 2*out channels -> act(feature) * sigmoid(gate).
struct GatedConv {
    TemporalShift shift;
    nn::Conv2d conv;
    bool upsample = false;
    bool linear_output = false; // feature branch without activation
    double slope = 0.2;

    static GatedConv make(int in, int out, int kernel, ag::Conv2dSpec spec, const GeneratorConfig& cfg, nn::Rng& rng,
                          bool upsample = false);
    ag::Var operator()(const ag::Var& x) const;
    void collect(const std::string& prefix, nn::NamedParams& out) const;
};

/// Residual self-attention: x + gamma * attention(x), gamma initialized to 0.
struct SelfAttention {
    nn::Conv2d f, g, h;
    ag::Var gamma;

    static SelfAttention make(int channels, nn::Rng& rng);
    ag::Var operator()(const ag::Var& x) const;
    /// Attention weights [T, N, N]; row j holds the weights over source positions.
    Tensor weights(const Tensor& x) const;
    void collect(const std::string& prefix, nn::NamedParams& out) const;
};

/// Channel-concatenated generator conditioning: masked frames, mask,
/// landmark map, reference.
struct GeneratorInput {
    Tensor masked_frames; // [T, 3, H, W]
    Tensor mask;          // [1, 1, H, W]
    Tensor landmark_maps; // [T, 1, H, W]
    Tensor reference;     // [1, 3, H, W]

    int frames() const { return masked_frames.dim(0); }
    /// [T, 8, H, W] in the fixed order frames, mask, landmarks, reference.
    Tensor assemble() const;
    void validate() const;

    static GeneratorInput build(const VideoClip& clip, const OcclusionMask& mask,
                                const std::vector<LandmarkSet>& landmarks, int reference_index = 0,
                                double fill = 0.0, double landmark_radius = 0.0);
};

class Generator {
public:
    static constexpr int kInputChannels = 8;
    static constexpr int kLayerCount = 13;

    Generator(const GeneratorConfig& config, std::uint64_t seed);

    /// Raw network output in (0, 1), [T, 3, H, W]. H and W must be divisible by 4.
    ag::Var forward(const ag::Var& input) const;
    /// Masked pixels take the network output; all others pass through bitwise.
    ag::Var generate(const GeneratorInput& input) const;

    const GeneratorConfig& config() const { return config_; }
    const std::vector<GatedConv>& layers() const { return layers_; }
    const std::vector<SelfAttention>& attention() const { return attention_; }
    const nn::NamedParams& params() const { return params_; }
    std::size_t parameter_count() const;

private:
    GeneratorConfig config_;
    std::vector<GatedConv> layers_;
    std::vector<SelfAttention> attention_;
    nn::NamedParams params_;
};

/// Composites `generated` into the masked frames of `input`: out = generated
/// where mask = 1, masked input elsewhere.
ag::Var composite(const ag::Var& generated, const GeneratorInput& input);

/// Inference helper: composite output as a clip.
VideoClip inpaint(const Generator& generator, const GeneratorInput& input);

/// Critic over a clip plus its mask; output [T, H/16, W/16] with no final squashing.
class Discriminator {
public:
    static constexpr int kLayerCount = 6;

    Discriminator(const DiscriminatorConfig& config, std::uint64_t seed);

    ag::Var score(const ag::Var& clip, const Tensor& mask) const;
    /// Scores plus their directional derivative along `tangent` (same shape as
    /// the clip; the mask channel has zero tangent).
    std::pair<ag::Var, ag::Var> score_with_tangent(const ag::Var& clip, const Tensor& mask,
                                                   const ag::Var& tangent) const;

    const DiscriminatorConfig& config() const { return config_; }
    const nn::NamedParams& params() const { return params_; }
    std::size_t parameter_count() const;

private:
    ag::Var input_of(const ag::Var& clip, const Tensor& mask) const;

    DiscriminatorConfig config_;
    std::vector<TemporalShift> shifts_;
    std::vector<nn::Conv2d> convs_;
    nn::NamedParams params_;
};

} // namespace hmdr
