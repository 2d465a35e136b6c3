#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "vifuse/common.hpp"
#include "vifuse/tensor.hpp"

namespace vifuse {

// Plane indices of an NrgbImage. This order is fixed everywhere downstream.
enum class Plane : int { NIR = 0, R = 1, G = 2, B = 3 };

// Four-channel (NIR, R, G, B) raster with values in [0,1] and a per-pixel
// validity mask. Invalid pixels keep their values; statistics and metrics
// must consult the mask.
struct NrgbImage {
    int width = 0, height = 0;
    std::array<std::vector<double>, 4> planes; // NIR, R, G, B
    std::vector<std::uint8_t> valid;           // nonzero = valid

    NrgbImage() = default;
    NrgbImage(int width_, int height_);

    std::size_t idx(int y, int x) const {
        return static_cast<std::size_t>(y) * width + x;
    }
    double at(Plane p, int y, int x) const {
        return planes[static_cast<int>(p)][idx(y, x)];
    }
    double& at(Plane p, int y, int x) {
        return planes[static_cast<int>(p)][idx(y, x)];
    }
    bool is_valid(int y, int x) const { return valid[idx(y, x)] != 0; }
    std::size_t pixel_count() const {
        return static_cast<std::size_t>(width) * height;
    }
};

// Checks the NrgbImage invariants: consistent plane/mask sizes and all values
// finite within [0,1]. Throws DataError on violation.
void validate(const NrgbImage& img);

// Loads an NRGB image from an 8-bit RGB file plus an 8-bit grayscale NIR file
// (and optionally an 8-bit grayscale mask, nonzero = valid). Values are scaled
// by 1/255. An absent mask means all pixels valid.
NrgbImage load_image(const std::string& rgb_path, const std::string& nir_path,
                     const std::string& mask_path = "");

// Packs the four planes into a [1,4,H,W] tensor, values bit-identical.
Tensor4 to_tensor(const NrgbImage& img);

} // namespace vifuse
