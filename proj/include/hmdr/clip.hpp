#pragma once

#include "hmdr/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <vector>

namespace hmdr {

/// 8-bit quantization used by the image files.
inline std::uint8_t to_byte(double v)
{
    const double c = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    return static_cast<std::uint8_t>(c * 255.0 + 0.5);
}
inline double from_byte(std::uint8_t b) { return b / 255.0; }

/// Read-only view of one interleaved RGB frame.
struct FrameView {
    int height = 0;
    int width = 0;
    const double* data = nullptr; // [H][W][3]

    std::size_t size() const { return static_cast<std::size_t>(height) * width * 3; }
    double at(int i, int j, int c) const { return data[(static_cast<std::size_t>(i) * width + j) * 3 + c]; }
};

/// T frames of H x W interleaved RGB in [0, 1], stored [T][H][W][3].
class VideoClip {
public:
    VideoClip() = default;
    VideoClip(int frames, int height, int width, double fill = 0.0);

    int frames() const { return frames_; }
    int height() const { return height_; }
    int width() const { return width_; }
    std::size_t frame_size() const { return static_cast<std::size_t>(height_) * width_ * 3; }
    bool empty() const { return data_.empty(); }

    double& at(int t, int i, int j, int c) { return data_[index(t, i, j, c)]; }
    double at(int t, int i, int j, int c) const { return data_[index(t, i, j, c)]; }
    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }
    double* frame_data(int t) { return data_.data() + static_cast<std::size_t>(t) * frame_size(); }
    const double* frame_data(int t) const { return data_.data() + static_cast<std::size_t>(t) * frame_size(); }
    FrameView frame(int t) const { return {height_, width_, frame_data(t)}; }

    /// Throws InvalidInput if any value lies outside [0, 1] or is not finite.
    void check_range() const;

    /// Channels-first tensor [T, 3, H, W].
    Tensor to_tensor() const;
    /// Inverse of to_tensor(); values are taken as-is.
    static VideoClip from_tensor(const Tensor& t);

    bool operator==(const VideoClip&) const = default;

private:
    std::size_t index(int t, int i, int j, int c) const
    {
        return ((static_cast<std::size_t>(t) * height_ + i) * width_ + j) * 3 + c;
    }

    int frames_ = 0;
    int height_ = 0;
    int width_ = 0;
    std::vector<double> data_;
};

/// Static binary occlusion mask; 1 = occluded (to be inpainted).
class OcclusionMask {
public:
    OcclusionMask() = default;
    OcclusionMask(int height, int width, std::uint8_t fill = 0);

    int height() const { return height_; }
    int width() const { return width_; }
    std::uint8_t& at(int i, int j) { return data_[static_cast<std::size_t>(i) * width_ + j]; }
    std::uint8_t at(int i, int j) const { return data_[static_cast<std::size_t>(i) * width_ + j]; }
    const std::vector<std::uint8_t>& data() const { return data_; }
    std::size_t count() const;

    /// [1, 1, H, W] tensor of 0/1.
    Tensor to_tensor() const;

    bool operator==(const OcclusionMask&) const = default;

private:
    int height_ = 0;
    int width_ = 0;
    std::vector<std::uint8_t> data_;
};

/// One frame with every pixel outside the occluded region set to zero.
struct ReferenceFrame {
    int height = 0;
    int width = 0;
    std::vector<double> pixels; // [H][W][3]
    int source_index = 0;

    /// [1, 3, H, W] tensor.
    Tensor to_tensor() const;
};

} // namespace hmdr
