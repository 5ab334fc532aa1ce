#include "hmdr/clip.hpp"

#include "hmdr/error.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace hmdr {

VideoClip::VideoClip(int frames, int height, int width, double fill)
    : frames_(frames), height_(height), width_(width)
{
    if (frames < 1 || height < 1 || width < 1) {
        throw InvalidInput("VideoClip: dimensions must be positive");
    }
    data_.assign(static_cast<std::size_t>(frames) * frame_size(), fill);
}

void VideoClip::check_range() const
{
    for (double v : data_) {
        if (!(v >= 0.0 && v <= 1.0)) {
            throw InvalidInput("VideoClip: pixel value " + std::to_string(v) + " outside [0, 1]");
        }
    }
}

Tensor VideoClip::to_tensor() const
{
    Tensor t({frames_, 3, height_, width_});
    const std::size_t plane = static_cast<std::size_t>(height_) * width_;
    for (int f = 0; f < frames_; ++f) {
        const double* src = frame_data(f);
        double* dst = t.data() + static_cast<std::size_t>(f) * 3 * plane;
        for (std::size_t p = 0; p < plane; ++p) {
            dst[p] = src[p * 3];
            dst[plane + p] = src[p * 3 + 1];
            dst[2 * plane + p] = src[p * 3 + 2];
        }
    }
    return t;
}

VideoClip VideoClip::from_tensor(const Tensor& t)
{
    if (t.rank() != 4 || t.dim(1) != 3) {
        throw InvalidInput("VideoClip::from_tensor: expected [T, 3, H, W], got " + shape_str(t.shape()));
    }
    VideoClip clip(t.dim(0), t.dim(2), t.dim(3));
    const std::size_t plane = static_cast<std::size_t>(clip.height_) * clip.width_;
    for (int f = 0; f < clip.frames_; ++f) {
        const double* src = t.data() + static_cast<std::size_t>(f) * 3 * plane;
        double* dst = clip.frame_data(f);
        for (std::size_t p = 0; p < plane; ++p) {
            dst[p * 3] = src[p];
            dst[p * 3 + 1] = src[plane + p];
            dst[p * 3 + 2] = src[2 * plane + p];
        }
    }
    return clip;
}

OcclusionMask::OcclusionMask(int height, int width, std::uint8_t fill) : height_(height), width_(width)
{
    if (height < 1 || width < 1) {
        throw InvalidInput("OcclusionMask: dimensions must be positive");
    }
    if (fill > 1) {
        throw InvalidInput("OcclusionMask: values must be 0 or 1");
    }
    data_.assign(static_cast<std::size_t>(height) * width, fill);
}

std::size_t OcclusionMask::count() const
{
    return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
}

Tensor OcclusionMask::to_tensor() const
{
    Tensor t({1, 1, height_, width_});
    for (std::size_t i = 0; i < data_.size(); ++i) {
        t[i] = data_[i];
    }
    return t;
}

Tensor ReferenceFrame::to_tensor() const
{
    Tensor t({1, 3, height, width});
    const std::size_t plane = static_cast<std::size_t>(height) * width;
    for (std::size_t p = 0; p < plane; ++p) {
        for (int c = 0; c < 3; ++c) {
            t[c * plane + p] = pixels[p * 3 + c];
        }
    }
    return t;
}

} // namespace hmdr
