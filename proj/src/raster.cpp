#include "vifuse/raster.hpp"

#include <cmath>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

namespace vifuse {

NrgbImage::NrgbImage(int width_, int height_) : width(width_), height(height_) {
    if (width_ <= 0 || height_ <= 0)
        throw DataError("NrgbImage: dimensions must be positive");
    const std::size_t total = static_cast<std::size_t>(width_) * height_;
    for (auto& p : planes) p.assign(total, 0.0);
    valid.assign(total, 1);
}

void validate(const NrgbImage& img) {
    if (img.width <= 0 || img.height <= 0)
        throw DataError("NrgbImage: empty image");
    const std::size_t total = img.pixel_count();
    for (const auto& p : img.planes) {
        if (p.size() != total)
            throw DataError("NrgbImage: plane size does not match dimensions");
        for (double v : p) {
            if (!std::isfinite(v) || v < 0.0 || v > 1.0)
                throw DataError("NrgbImage: plane value outside [0,1]");
        }
    }
    if (img.valid.size() != total)
        throw DataError("NrgbImage: mask size does not match dimensions");
}

namespace {

cv::Mat read_8bit(const std::string& path, int want_channels) {
    cv::Mat m = cv::imread(path, cv::IMREAD_UNCHANGED);
    if (m.empty())
        throw DataError("cannot read image file: " + path);
    if (m.depth() != CV_8U)
        throw DataError("expected 8-bit image: " + path);
    if (m.channels() != want_channels)
        throw DataError("expected " + std::to_string(want_channels) +
                        "-channel image, got " + std::to_string(m.channels()) +
                        ": " + path);
    return m;
}

} // namespace

NrgbImage load_image(const std::string& rgb_path, const std::string& nir_path,
                     const std::string& mask_path) {
    cv::Mat rgb = read_8bit(rgb_path, 3); // OpenCV loads color as BGR
    cv::Mat nir = read_8bit(nir_path, 1);
    if (rgb.cols != nir.cols || rgb.rows != nir.rows)
        throw DataError("RGB/NIR dimension mismatch: " + rgb_path + " vs " +
                        nir_path);

    cv::Mat mask;
    if (!mask_path.empty()) {
        mask = read_8bit(mask_path, 1);
        if (mask.cols != rgb.cols || mask.rows != rgb.rows)
            throw DataError("mask dimension mismatch: " + mask_path);
    }

    NrgbImage img(rgb.cols, rgb.rows);
    constexpr double inv255 = 1.0 / 255.0;
    for (int y = 0; y < img.height; ++y) {
        const cv::Vec3b* rrow = rgb.ptr<cv::Vec3b>(y);
        const std::uint8_t* nrow = nir.ptr<std::uint8_t>(y);
        for (int x = 0; x < img.width; ++x) {
            const std::size_t i = img.idx(y, x);
            img.planes[static_cast<int>(Plane::NIR)][i] = nrow[x] * inv255;
            img.planes[static_cast<int>(Plane::R)][i] = rrow[x][2] * inv255;
            img.planes[static_cast<int>(Plane::G)][i] = rrow[x][1] * inv255;
            img.planes[static_cast<int>(Plane::B)][i] = rrow[x][0] * inv255;
        }
    }
    if (!mask.empty()) {
        for (int y = 0; y < img.height; ++y) {
            const std::uint8_t* mrow = mask.ptr<std::uint8_t>(y);
            for (int x = 0; x < img.width; ++x)
                img.valid[img.idx(y, x)] = mrow[x] != 0 ? 1 : 0;
        }
    }
    validate(img);
    return img;
}

Tensor4 to_tensor(const NrgbImage& img) {
    validate(img);
    Tensor4 t(1, 4, img.height, img.width);
    for (int c = 0; c < 4; ++c) {
        const auto& plane = img.planes[c];
        std::copy(plane.begin(), plane.end(),
                  t.v.begin() + static_cast<std::ptrdiff_t>(c) * img.pixel_count());
    }
    return t;
}

} // namespace vifuse
