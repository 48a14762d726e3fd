#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace lvlmlens {

/// 8-bit interleaved RGB raster.
struct RgbImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;  // height * width * 3

    std::uint8_t* at(int x, int y) { return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
    const std::uint8_t* at(int x, int y) const {
        return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3;
    }
    bool operator==(const RgbImage&) const = default;
};

std::vector<std::uint8_t> encode_png(const RgbImage& image);

/// Decodes any libpng-readable PNG into 8-bit RGB (alpha dropped, palettes expanded).
RgbImage decode_png(std::span<const std::uint8_t> bytes);

}  // namespace lvlmlens
