#ifndef CCL_CORE_IMAGE_HPP
#define CCL_CORE_IMAGE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace ccl {

/// Grayscale image, row-major, values in [0,1].
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> px;

    Image() = default;
    Image(int h, int w, float fill = 0.0f) : height(h), width(w), px(static_cast<std::size_t>(h) * w, fill) {}

    float& at(int r, int c) { return px[static_cast<std::size_t>(r) * width + c]; }
    float at(int r, int c) const { return px[static_cast<std::size_t>(r) * width + c]; }

    std::size_t size() const { return px.size(); }

    void clamp01() {
        for (auto& v : px) v = std::min(1.0f, std::max(0.0f, v));
    }

    /// 8-bit quantization, round-half-up. Matches what lands in the PNG files.
    std::vector<std::uint8_t> to_u8() const {
        std::vector<std::uint8_t> out(px.size());
        for (std::size_t i = 0; i < px.size(); ++i) {
            const float v = std::min(1.0f, std::max(0.0f, px[i]));
            out[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
        }
        return out;
    }

    static Image from_u8(const std::vector<std::uint8_t>& data, int h, int w) {
        if (data.size() != static_cast<std::size_t>(h) * w)
            throw std::invalid_argument("Image::from_u8: size mismatch");
        Image img(h, w);
        for (std::size_t i = 0; i < data.size(); ++i) img.px[i] = static_cast<float>(data[i]) / 255.0f;
        return img;
    }
};

inline double mean_abs_diff(const Image& a, const Image& b) {
    if (a.px.size() != b.px.size()) throw std::invalid_argument("mean_abs_diff: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.px.size(); ++i) acc += std::abs(static_cast<double>(a.px[i]) - b.px[i]);
    return acc / static_cast<double>(a.px.size());
}

inline double max_abs_diff(const Image& a, const Image& b) {
    if (a.px.size() != b.px.size()) throw std::invalid_argument("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.px.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a.px[i]) - b.px[i]));
    return m;
}

}  // namespace ccl

#endif  // CCL_CORE_IMAGE_HPP
