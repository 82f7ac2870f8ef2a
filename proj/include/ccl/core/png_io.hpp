#ifndef CCL_CORE_PNG_IO_HPP
#define CCL_CORE_PNG_IO_HPP

#include <png.h>

#include <cstdio>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>

#include "ccl/core/image.hpp"

namespace ccl {

namespace detail {
struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace detail

/// 8-bit grayscale PNG writer. Fixed compression settings keep output
/// byte-identical across runs.
inline void write_png_gray8(const std::filesystem::path& path, const Image& img) {
    detail::FilePtr fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) throw std::runtime_error("write_png_gray8: cannot open " + path.string());

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("write_png_gray8: png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw std::runtime_error("write_png_gray8: png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("write_png_gray8: libpng error writing " + path.string());
    }

    png_init_io(png, fp.get());
    png_set_compression_level(png, 6);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    const auto bytes = img.to_u8();
    for (int r = 0; r < img.height; ++r)
        png_write_row(png, const_cast<png_bytep>(bytes.data() + static_cast<std::size_t>(r) * img.width));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline Image read_png_gray8(const std::filesystem::path& path) {
    detail::FilePtr fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) throw std::runtime_error("read_png_gray8: cannot open " + path.string());

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("read_png_gray8: png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw std::runtime_error("read_png_gray8: png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("read_png_gray8: libpng error reading " + path.string());
    }

    png_init_io(png, fp.get());
    png_read_info(png, info);

    const int width = static_cast<int>(png_get_image_width(png, info));
    const int height = static_cast<int>(png_get_image_height(png, info));
    const png_byte color_type = png_get_color_type(png, info);
    const png_byte bit_depth = png_get_bit_depth(png, info);

    // Normalize whatever we get to 8-bit grayscale.
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (bit_depth == 16) png_set_strip_16(png);
    if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (color_type == PNG_COLOR_TYPE_RGB || color_type == PNG_COLOR_TYPE_RGB_ALPHA ||
        color_type == PNG_COLOR_TYPE_PALETTE)
        png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    png_read_update_info(png, info);

    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(height) * width);
    for (int r = 0; r < height; ++r)
        png_read_row(png, bytes.data() + static_cast<std::size_t>(r) * width, nullptr);
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    return Image::from_u8(bytes, height, width);
}

}  // namespace ccl

#endif  // CCL_CORE_PNG_IO_HPP
