#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace hmdr::png {

/// 8-bit image with 1 (gray) or 3 (RGB) interleaved channels.
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<std::uint8_t> bytes;
};

Image read(const std::filesystem::path& path, int channels);
void write(const std::filesystem::path& path, const Image& image);

} // namespace hmdr::png
