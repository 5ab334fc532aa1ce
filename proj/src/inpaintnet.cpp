#include "hmdr/inpaintnet.hpp"

#include "hmdr/dataio.hpp"
#include "hmdr/error.hpp"

#include <algorithm>
#include <cmath>

namespace hmdr {

using ag::Var;

namespace {
constexpr double kFeatureGain = 2.0;
}

std::string to_string(AttentionPlacement p)
{
    return p == AttentionPlacement::Downsampling ? "downsampling" : "bottleneck";
}

AttentionPlacement attention_placement_from_string(const std::string& s)
{
    if (s == "downsampling") {
        return AttentionPlacement::Downsampling;
    }
    if (s == "bottleneck") {
        return AttentionPlacement::Bottleneck;
    }
    throw InvalidInput("unknown attention placement '" + s + "' (expected downsampling or bottleneck)");
}

// ---- temporal shift -----------------------------------------------------------

TemporalShift TemporalShift::make(int channels, double fraction, bool identity_init)
{
    if (!(fraction > 0.0) || fraction > 0.5) {
        throw InvalidInput("temporal shift fraction must lie in (0, 1/2]");
    }
    const int per_direction = static_cast<int>(std::lround(fraction * channels));
    const int s = std::min(channels, 2 * per_direction);
    TemporalShift out;
    if (s == 0) {
        return out;
    }
    Tensor k({s, 3});
    for (int c = 0; c < s; ++c) {
        const int tap = identity_init ? 1 : (c < s / 2 ? 0 : 2);
        k[static_cast<std::size_t>(c) * 3 + tap] = 1.0;
    }
    out.kernel = Var::parameter(std::move(k));
    return out;
}

Var TemporalShift::operator()(const Var& x) const
{
    return kernel.defined() ? ag::temporal_shift(x, kernel) : x;
}

// ---- gated convolution ----------------------------------------------------------

GatedConv GatedConv::make(int in, int out, int kernel, ag::Conv2dSpec spec, const GeneratorConfig& cfg, nn::Rng& rng,
                          bool upsample)
{
    GatedConv g;
    g.shift = TemporalShift::make(in, cfg.shift_fraction, cfg.identity_shift_init);
    g.conv = nn::Conv2d::make(in, 2 * out, kernel, spec, rng);
    // He init assumes a bare ReLU; the sigmoid gate (about 1/2) would shrink the
    // signal by roughly 2x per layer, so the feature half is scaled up.
    Tensor& w = g.conv.weight.mutable_value();
    const std::size_t feature = static_cast<std::size_t>(out) * in * kernel * kernel;
    for (std::size_t i = 0; i < feature; ++i) {
        w[i] *= kFeatureGain;
    }
    g.upsample = upsample;
    g.slope = cfg.slope;
    return g;
}

Var GatedConv::operator()(const Var& x) const
{
    Var y = shift(x);
    if (upsample) {
        y = ag::upsample_nearest2x(y);
    }
    return ag::gated_activation(conv(y), linear_output ? 1.0 : slope);
}

void GatedConv::collect(const std::string& prefix, nn::NamedParams& out) const
{
    if (shift.kernel.defined()) {
        out.emplace_back(prefix + ".shift", shift.kernel);
    }
    conv.collect(prefix + ".conv", out);
}

// ---- self-attention -----------------------------------------------------------

SelfAttention SelfAttention::make(int channels, nn::Rng& rng)
{
    const int key = std::max(1, channels / 8);
    SelfAttention a;
    a.f = nn::Conv2d::make(channels, key, 1, {}, rng);
    a.g = nn::Conv2d::make(channels, key, 1, {}, rng);
    a.h = nn::Conv2d::make(channels, channels, 1, {}, rng);
    a.gamma = Var::parameter(Tensor({1}));
    return a;
}

namespace {

// Attention over one frame [1, C, H, W]; returns (weights [1, N, N], output [1, C, H, W]).
std::pair<Var, Var> attend(const SelfAttention& a, const Var& x)
{
    const int c = x.dim(1), n = x.dim(2) * x.dim(3);
    const Var f = ag::reshape(a.f(x), {1, a.f.out_channels(), n});
    const Var g = ag::reshape(a.g(x), {1, a.g.out_channels(), n});
    const Var h = ag::reshape(a.h(x), {1, c, n});
    const Var w = ag::softmax(ag::bmm(g, f, true, false)); // [1, N_query, N_source]
    const Var o = ag::bmm(h, w, false, true);              // [1, C, N_query]
    return {w, ag::reshape(o, x.shape())};
}

} // namespace

Var SelfAttention::operator()(const Var& x) const
{
    if (x.value().rank() != 4) {
        throw InvalidInput("self_attention: expected [T, C, H, W], got " + shape_str(x.shape()));
    }
    std::vector<Var> frames;
    frames.reserve(static_cast<std::size_t>(x.dim(0)));
    for (int t = 0; t < x.dim(0); ++t) {
        frames.push_back(attend(*this, ag::slice(x, 0, t, t + 1)).second);
    }
    const Var o = frames.size() == 1 ? frames[0] : ag::concat(frames, 0);
    return ag::add(x, ag::scale(o, gamma));
}

Tensor SelfAttention::weights(const Tensor& x) const
{
    ag::NoGradGuard guard;
    const Var v = Var::constant(x);
    std::vector<Var> frames;
    for (int t = 0; t < x.dim(0); ++t) {
        frames.push_back(attend(*this, ag::slice(v, 0, t, t + 1)).first);
    }
    return (frames.size() == 1 ? frames[0] : ag::concat(frames, 0)).value();
}

void SelfAttention::collect(const std::string& prefix, nn::NamedParams& out) const
{
    f.collect(prefix + ".f", out);
    g.collect(prefix + ".g", out);
    h.collect(prefix + ".h", out);
    out.emplace_back(prefix + ".gamma", gamma);
}

// ---- generator input -----------------------------------------------------------

void GeneratorInput::validate() const
{
    const auto& s = masked_frames.shape();
    if (s.size() != 4 || s[1] != 3 || s[0] < 1) {
        throw InvalidInput("generator input: masked frames must be [T, 3, H, W], got " + shape_str(s));
    }
    const int t = s[0], h = s[2], w = s[3];
    if (mask.shape() != Shape{1, 1, h, w}) {
        throw InvalidInput("generator input: mask must be [1, 1, H, W], got " + shape_str(mask.shape()));
    }
    if (landmark_maps.shape() != Shape{t, 1, h, w}) {
        throw InvalidInput("generator input: landmark maps must be [T, 1, H, W], got " +
                           shape_str(landmark_maps.shape()));
    }
    if (reference.shape() != Shape{1, 3, h, w}) {
        throw InvalidInput("generator input: reference must be [1, 3, H, W], got " + shape_str(reference.shape()));
    }
}

Tensor GeneratorInput::assemble() const
{
    validate();
    const int t_count = frames(), h = masked_frames.dim(2), w = masked_frames.dim(3);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    Tensor out({t_count, Generator::kInputChannels, h, w});
    for (int t = 0; t < t_count; ++t) {
        double* dst = out.data() + static_cast<std::size_t>(t) * Generator::kInputChannels * plane;
        std::copy_n(masked_frames.data() + static_cast<std::size_t>(t) * 3 * plane, 3 * plane, dst);
        std::copy_n(mask.data(), plane, dst + 3 * plane);
        std::copy_n(landmark_maps.data() + static_cast<std::size_t>(t) * plane, plane, dst + 4 * plane);
        std::copy_n(reference.data(), 3 * plane, dst + 5 * plane);
    }
    return out;
}

GeneratorInput GeneratorInput::build(const VideoClip& clip, const OcclusionMask& mask,
                                     const std::vector<LandmarkSet>& landmarks, int reference_index, double fill,
                                     double landmark_radius)
{
    if (static_cast<int>(landmarks.size()) != clip.frames()) {
        throw InvalidInput("generator input: " + std::to_string(landmarks.size()) + " landmark sets for " +
                           std::to_string(clip.frames()) + " frames");
    }
    GeneratorInput in;
    in.masked_frames = apply_mask(clip, mask, fill).to_tensor();
    in.mask = mask.to_tensor();
    const int h = clip.height(), w = clip.width();
    in.landmark_maps = Tensor({clip.frames(), 1, h, w});
    for (int t = 0; t < clip.frames(); ++t) {
        const Tensor m = rasterize(landmarks[static_cast<std::size_t>(t)], h, w, landmark_radius);
        std::copy(m.vec().begin(), m.vec().end(),
                  in.landmark_maps.vec().begin() + static_cast<std::ptrdiff_t>(t) * h * w);
    }
    in.reference = prepare_reference(clip, mask, reference_index).to_tensor();
    return in;
}

// ---- generator -----------------------------------------------------------------

Generator::Generator(const GeneratorConfig& config, std::uint64_t seed) : config_(config)
{
    if (config.base_channels < 1) {
        throw InvalidInput("generator: base_channels must be >= 1");
    }
    nn::Rng rng(nn::derive_seed(seed, "generator"));
    const int c = config.base_channels;
    auto add = [&](int in, int out, int k, ag::Conv2dSpec spec, bool up = false) {
        layers_.push_back(GatedConv::make(in, out, k, spec, config, rng, up));
    };
    add(kInputChannels, c, 5, {1, 2, 1});
    add(c, 2 * c, 4, {2, 1, 1});
    add(2 * c, 2 * c, 3, {1, 1, 1});
    add(2 * c, 4 * c, 4, {2, 1, 1});
    add(4 * c, 4 * c, 3, {1, 1, 1});
    for (int d : {2, 4, 8, 16}) {
        add(4 * c, 4 * c, 3, {1, d, d});
    }
    add(4 * c, 4 * c, 3, {1, 1, 1});
    add(4 * c, 2 * c, 3, {1, 1, 1}, true);
    add(2 * c, c, 3, {1, 1, 1}, true);
    add(c, 3, 3, {1, 1, 1});
    layers_.back().linear_output = true;

    if (config.attention == AttentionPlacement::Downsampling) {
        attention_.push_back(SelfAttention::make(2 * c, rng));
        attention_.push_back(SelfAttention::make(4 * c, rng));
    } else {
        attention_.push_back(SelfAttention::make(4 * c, rng));
    }

    for (std::size_t i = 0; i < layers_.size(); ++i) {
        layers_[i].collect("gen.layer" + std::to_string(i), params_);
    }
    for (std::size_t i = 0; i < attention_.size(); ++i) {
        attention_[i].collect("gen.attn" + std::to_string(i), params_);
    }
}

Var Generator::forward(const Var& input) const
{
    const auto& s = input.shape();
    if (s.size() != 4 || s[1] != kInputChannels) {
        throw InvalidInput("generator: expected [T, 8, H, W], got " + shape_str(s));
    }
    if (s[2] % 4 != 0 || s[3] % 4 != 0 || s[2] < 4 || s[3] < 4) {
        throw InvalidInput("generator: H and W must be positive multiples of 4, got " + shape_str(s));
    }
    // Attention follows layer index 1 and 3 (downsampling) or 8 (last dilated block).
    const bool down = config_.attention == AttentionPlacement::Downsampling;
    Var x = input;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        x = layers_[i](x);
        if (down && i == 1) {
            x = attention_[0](x);
        } else if (down && i == 3) {
            x = attention_[1](x);
        } else if (!down && i == 8) {
            x = attention_[0](x);
        }
    }
    return ag::sigmoid(x);
}

Var Generator::generate(const GeneratorInput& input) const
{
    return composite(forward(Var::constant(input.assemble())), input);
}

std::size_t Generator::parameter_count() const
{
    std::size_t n = 0;
    for (const auto& [name, p] : params_) {
        n += p.size();
    }
    return n;
}

Var composite(const Var& generated, const GeneratorInput& input)
{
    input.validate();
    if (generated.shape() != input.masked_frames.shape()) {
        throw InvalidInput("composite: generated " + shape_str(generated.shape()) + " vs frames " +
                           shape_str(input.masked_frames.shape()));
    }
    const int t_count = input.frames();
    const std::size_t plane = input.mask.size();
    Tensor m(input.masked_frames.shape());
    for (int t = 0; t < t_count; ++t) {
        for (int c = 0; c < 3; ++c) {
            std::copy_n(input.mask.data(), plane, m.data() + (static_cast<std::size_t>(t) * 3 + c) * plane);
        }
    }
    return ag::where(m, generated, Var::constant(input.masked_frames));
}

VideoClip inpaint(const Generator& generator, const GeneratorInput& input)
{
    ag::NoGradGuard guard;
    return VideoClip::from_tensor(generator.generate(input).value());
}

// ---- discriminator ---------------------------------------------------------------

Discriminator::Discriminator(const DiscriminatorConfig& config, std::uint64_t seed) : config_(config)
{
    if (config.base_channels < 1) {
        throw InvalidInput("discriminator: base_channels must be >= 1");
    }
    nn::Rng rng(nn::derive_seed(seed, "discriminator"));
    const int c = config.base_channels;
    const int widths[kLayerCount + 1] = {4, c, 2 * c, 4 * c, 4 * c, 4 * c, 1};
    const int strides[kLayerCount] = {2, 2, 2, 2, 1, 1};
    for (int i = 0; i < kLayerCount; ++i) {
        shifts_.push_back(TemporalShift::make(widths[i], config.shift_fraction, config.identity_shift_init));
        convs_.push_back(nn::Conv2d::make(widths[i], widths[i + 1], 5, {strides[i], 2, 1}, rng));
        const std::string prefix = "disc.layer" + std::to_string(i);
        if (shifts_.back().kernel.defined()) {
            params_.emplace_back(prefix + ".shift", shifts_.back().kernel);
        }
        convs_.back().collect(prefix + ".conv", params_);
    }
}

Var Discriminator::input_of(const Var& clip, const Tensor& mask) const
{
    const auto& s = clip.shape();
    if (s.size() != 4 || s[1] != 3 || s[0] < 1) {
        throw InvalidInput("discriminator: expected clip [T, 3, H, W], got " + shape_str(s));
    }
    if (s[2] % 16 != 0 || s[3] % 16 != 0 || s[2] < 16 || s[3] < 16) {
        throw InvalidInput("discriminator: H and W must be positive multiples of 16, got " + shape_str(s));
    }
    if (mask.shape() != Shape{1, 1, s[2], s[3]}) {
        throw InvalidInput("discriminator: mask must be [1, 1, H, W], got " + shape_str(mask.shape()));
    }
    return ag::concat({clip, ag::repeat_leading(Var::constant(mask), s[0])}, 1);
}

Var Discriminator::score(const Var& clip, const Tensor& mask) const
{
    Var x = input_of(clip, mask);
    for (int i = 0; i < kLayerCount; ++i) {
        x = convs_[static_cast<std::size_t>(i)](shifts_[static_cast<std::size_t>(i)](x));
        if (i + 1 < kLayerCount) {
            x = ag::leaky_relu(x, config_.slope);
        }
    }
    return ag::reshape(x, {x.dim(0), x.dim(2), x.dim(3)});
}

std::pair<Var, Var> Discriminator::score_with_tangent(const Var& clip, const Tensor& mask, const Var& tangent) const
{
    if (tangent.shape() != clip.shape()) {
        throw InvalidInput("discriminator: tangent shape " + shape_str(tangent.shape()) + " vs clip " +
                           shape_str(clip.shape()));
    }
    Var x = input_of(clip, mask);
    Var dx = ag::concat({tangent, Var::constant(Tensor({clip.dim(0), 1, clip.dim(2), clip.dim(3)}))}, 1);
    for (int i = 0; i < kLayerCount; ++i) {
        const auto& shift = shifts_[static_cast<std::size_t>(i)];
        const auto& conv = convs_[static_cast<std::size_t>(i)];
        const Var pre = conv(shift(x));
        const Var dpre = ag::conv2d(shift(dx), conv.weight, Var(), conv.spec);
        if (i + 1 < kLayerCount) {
            x = ag::leaky_relu(pre, config_.slope);
            dx = ag::leaky_relu_tangent(pre, dpre, config_.slope);
        } else {
            x = pre;
            dx = dpre;
        }
    }
    return {ag::reshape(x, {x.dim(0), x.dim(2), x.dim(3)}), ag::reshape(dx, {dx.dim(0), dx.dim(2), dx.dim(3)})};
}

std::size_t Discriminator::parameter_count() const
{
    std::size_t n = 0;
    for (const auto& [name, p] : params_) {
        n += p.size();
    }
    return n;
}

} // namespace hmdr
