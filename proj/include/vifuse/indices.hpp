#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vifuse/common.hpp"
#include "vifuse/raster.hpp"

namespace vifuse {

// The 13 NRGB vegetation indices, in canonical table order. This ordering is
// load-bearing: correlation matrices and multi-index outputs index by it.
enum class ViKind : int {
    NDVI = 0,
    IAVI,
    MSAVI2,
    EVI,
    VDVI,
    WDRVI,
    MCARI,
    GDVI,
    SAVI,
    RVI,
    VCI,
    GRVI,
    NDGI,
};

inline constexpr int kNumViKinds = 13;

const std::array<ViKind, kNumViKinds>& all_vi_kinds();

// The 12 indices usable as network input channels: canonical order minus
// IAVI (its gamma parameter needs calibration, so it is not fed directly).
const std::array<ViKind, 12>& network_vi_kinds();

std::string vi_name(ViKind kind);
ViKind vi_from_name(const std::string& name); // case-insensitive; throws DataError

// Free parameters of the index family.
struct ViParams {
    double gamma = 0.9;  // IAVI weighting, must lie in (0.65, 1.12)
    double savi_l = 0.5; // SAVI soil factor, one of {0, 0.5, 1}
    std::optional<double> ndvi_min; // dataset-level NDVI extrema, required by VCI
    std::optional<double> ndvi_max;
    double clip_eps = 1e-6; // denominator guard

    // Throws DataError if a parameter needed by `kind` is missing or invalid.
    void validate(ViKind kind) const;
};

// Meaningful-range metadata. These intervals are informational; values outside
// them are never clamped.
struct ViRange {
    double lo = 0.0, hi = 0.0;
    bool lo_open = false, hi_open = false;
    bool bounded() const;
};

ViRange meaningful_range(ViKind kind);

// A per-pixel index raster with the validity mask inherited from its source.
struct ViRaster {
    ViKind kind = ViKind::NDVI;
    int width = 0, height = 0;
    std::vector<double> values;
    std::vector<std::uint8_t> valid;

    std::size_t idx(int y, int x) const {
        return static_cast<std::size_t>(y) * width + x;
    }
    double at(int y, int x) const { return values[idx(y, x)]; }
};

// Evaluates a single scalar pixel. Every denominator d is replaced by
// sign(d)*max(|d|, eps) with sign(0) = +1, so the result is always finite.
double vi_pixel(ViKind kind, double nir, double r, double g, double b,
                const ViParams& params);

// Per-pixel evaluation of one index over a whole image.
ViRaster compute_vi(ViKind kind, const NrgbImage& image, const ViParams& params);

// All network-usable indices (12, IAVI excluded) in canonical order.
// Requires VCI statistics in `params`.
std::vector<ViRaster> compute_all(const NrgbImage& image, const ViParams& params);

// NDVI extrema over the valid pixels of every image in the dataset.
std::pair<double, double> vci_stats(const std::vector<NrgbImage>& dataset,
                                    const ViParams& params);

// Pearson correlation over valid pixels, pairwise across rasters. All rasters
// must share dimensions and mask. Entries involving a constant raster are
// reported as NaN, never silently zero. At least 2 valid pixels required.
std::vector<std::vector<double>> correlation_matrix(
    const std::vector<ViRaster>& rasters);

} // namespace vifuse
