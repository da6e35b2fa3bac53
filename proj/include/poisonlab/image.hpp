#pragma once

// Image container and pixel utilities. All pipeline images are RGB float in
// [0,1], snapped to the 8-bit grid (multiples of 1/255) so that in-memory
// values and PNG round trips score identically.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <png.h>

#include "poisonlab/common.hpp"

namespace poisonlab {

struct Image {
    int h = 0;
    int w = 0;
    std::vector<float> px;  // h*w*3, row-major, RGB interleaved

    Image() = default;
    Image(int h_, int w_, float fill = 0.0f) : h(h_), w(w_), px(std::size_t(h_) * w_ * 3, fill) {}

    float& at(int y, int x, int c) { return px[(std::size_t(y) * w + x) * 3 + c]; }
    const float& at(int y, int x, int c) const { return px[(std::size_t(y) * w + x) * 3 + c]; }

    bool same_size(const Image& o) const { return h == o.h && w == o.w; }

    bool operator==(const Image& o) const { return h == o.h && w == o.w && px == o.px; }
};

// Snap every channel to the nearest 1/255 step, clamping to [0,1].
inline float quantize8(float v) {
    float c = std::clamp(v, 0.0f, 1.0f);
    return std::round(c * 255.0f) / 255.0f;
}

inline void quantize8(Image& img) {
    for (float& v : img.px) v = quantize8(v);
}

inline bool all_finite(const Image& img) {
    for (float v : img.px)
        if (!std::isfinite(v)) return false;
    return true;
}

// Mean over |a-b| for quick diff checks.
inline double mean_abs_diff(const Image& a, const Image& b) {
    if (!a.same_size(b)) throw std::invalid_argument("mean_abs_diff: size mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.px.size(); ++i) acc += std::abs(double(a.px[i]) - double(b.px[i]));
    return a.px.empty() ? 0.0 : acc / double(a.px.size());
}

// Normalized cross-correlation between two equally sized pixel regions,
// computed over channels jointly. Returns 1 for identical non-constant data.
inline double normalized_cross_correlation(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size() || a.empty())
        throw std::invalid_argument("normalized_cross_correlation: size mismatch");
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= double(a.size());
    mb /= double(b.size());
    double num = 0, da = 0, db = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double xa = a[i] - ma, xb = b[i] - mb;
        num += xa * xb;
        da += xa * xa;
        db += xb * xb;
    }
    if (da == 0.0 && db == 0.0) return 1.0;  // both constant
    if (da == 0.0 || db == 0.0) return 0.0;
    return num / std::sqrt(da * db);
}

// ---------------------------------------------------------------------------
// PNG I/O (8-bit RGB)

inline void write_png(const std::filesystem::path& path, const Image& img) {
    FILE* fp = std::fopen(path.string().c_str(), "wb");
    if (!fp) throw std::runtime_error("write_png: cannot open " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw std::runtime_error("write_png: libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw std::runtime_error("write_png: encode error for " + path.string());
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, png_uint_32(img.w), png_uint_32(img.h), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<std::uint8_t> row(std::size_t(img.w) * 3);
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c)
                row[std::size_t(x) * 3 + c] =
                    std::uint8_t(std::lround(std::clamp(img.at(y, x, c), 0.0f, 1.0f) * 255.0f));
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

inline Image read_png(const std::filesystem::path& path) {
    FILE* fp = std::fopen(path.string().c_str(), "rb");
    if (!fp) throw std::runtime_error("read_png: cannot open " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("read_png: libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("read_png: decode error for " + path.string());
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    const int w = int(png_get_image_width(png, info));
    const int h = int(png_get_image_height(png, info));
    Image img(h, w);
    std::vector<std::uint8_t> row(std::size_t(w) * 3);
    for (int y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(y, x, c) = float(row[std::size_t(x) * 3 + c]) / 255.0f;
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

}  // namespace poisonlab
