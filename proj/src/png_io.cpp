#include "png_io.hpp"

#include "hmdr/error.hpp"

#include <png.h>

#include <cstring>

namespace hmdr::png {

Image read(const std::filesystem::path& path, int channels)
{
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str())) {
        throw FormatError(path.string(), std::string("cannot read PNG: ") + img.message);
    }
    img.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    Image out{static_cast<int>(img.height), static_cast<int>(img.width), channels, {}};
    out.bytes.resize(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, out.bytes.data(), 0, nullptr)) {
        png_image_free(&img);
        throw FormatError(path.string(), std::string("cannot decode PNG: ") + img.message);
    }
    return out;
}

void write(const std::filesystem::path& path, const Image& image)
{
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width);
    img.height = static_cast<png_uint_32>(image.height);
    img.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&img, path.c_str(), 0, image.bytes.data(), 0, nullptr)) {
        throw FormatError(path.string(), std::string("cannot write PNG: ") + img.message);
    }
}

} // namespace hmdr::png
