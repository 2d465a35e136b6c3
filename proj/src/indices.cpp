#include "vifuse/indices.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>

#include "vifuse/diffcore.hpp"

namespace vifuse {

const std::array<ViKind, kNumViKinds>& all_vi_kinds() {
    static const std::array<ViKind, kNumViKinds> kinds = {
        ViKind::NDVI, ViKind::IAVI, ViKind::MSAVI2, ViKind::EVI,
        ViKind::VDVI, ViKind::WDRVI, ViKind::MCARI, ViKind::GDVI,
        ViKind::SAVI, ViKind::RVI,   ViKind::VCI,   ViKind::GRVI,
        ViKind::NDGI};
    return kinds;
}

const std::array<ViKind, 12>& network_vi_kinds() {
    static const std::array<ViKind, 12> kinds = {
        ViKind::NDVI, ViKind::MSAVI2, ViKind::EVI,  ViKind::VDVI,
        ViKind::WDRVI, ViKind::MCARI, ViKind::GDVI, ViKind::SAVI,
        ViKind::RVI,  ViKind::VCI,    ViKind::GRVI, ViKind::NDGI};
    return kinds;
}

std::string vi_name(ViKind kind) {
    switch (kind) {
        case ViKind::NDVI: return "NDVI";
        case ViKind::IAVI: return "IAVI";
        case ViKind::MSAVI2: return "MSAVI2";
        case ViKind::EVI: return "EVI";
        case ViKind::VDVI: return "VDVI";
        case ViKind::WDRVI: return "WDRVI";
        case ViKind::MCARI: return "MCARI";
        case ViKind::GDVI: return "GDVI";
        case ViKind::SAVI: return "SAVI";
        case ViKind::RVI: return "RVI";
        case ViKind::VCI: return "VCI";
        case ViKind::GRVI: return "GRVI";
        case ViKind::NDGI: return "NDGI";
    }
    throw DataError("unknown ViKind");
}

ViKind vi_from_name(const std::string& name) {
    std::string up;
    up.reserve(name.size());
    for (char ch : name) up.push_back(static_cast<char>(std::toupper(ch)));
    for (ViKind k : all_vi_kinds())
        if (vi_name(k) == up) return k;
    throw DataError("unknown vegetation index: " + name);
}

void ViParams::validate(ViKind kind) const {
    if (!(clip_eps > 0.0))
        throw DataError("clip_eps must be positive");
    if (kind == ViKind::IAVI && !(gamma > 0.65 && gamma < 1.12))
        throw DataError("IAVI gamma must lie in (0.65, 1.12)");
    if (kind == ViKind::SAVI && savi_l != 0.0 && savi_l != 0.5 && savi_l != 1.0)
        throw DataError("SAVI L must be one of {0, 0.5, 1}");
    if (kind == ViKind::VCI) {
        if (!ndvi_min.has_value() || !ndvi_max.has_value())
            throw DataError("VCI requires dataset NDVI statistics (ndvi_min/ndvi_max)");
        if (*ndvi_min > *ndvi_max)
            throw DataError("VCI statistics inverted: ndvi_min > ndvi_max");
    }
}

bool ViRange::bounded() const {
    return std::isfinite(lo) && std::isfinite(hi);
}

ViRange meaningful_range(ViKind kind) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    switch (kind) {
        case ViKind::NDVI: return {0.0, 1.0, false, false};
        case ViKind::IAVI: return {-1.0, 1.0, false, false};
        case ViKind::MSAVI2: return {0.0, 1.0, false, false};
        case ViKind::EVI: return {-inf, inf, true, true};
        case ViKind::VDVI: return {-1.0, 1.0, false, false};
        case ViKind::WDRVI: return {-1.0, 1.0, false, false};
        case ViKind::MCARI: return {-1.6, 4.88, true, true};
        case ViKind::GDVI: return {-1.0, 1.0, false, false};
        case ViKind::SAVI: return {0.0, 1.0, false, false};
        case ViKind::RVI: return {0.0, inf, false, true};
        case ViKind::VCI: return {0.0, 1.0, false, false};
        case ViKind::GRVI: return {0.0, inf, false, true};
        case ViKind::NDGI: return {-1.0, 1.0, false, false};
    }
    throw DataError("unknown ViKind");
}

double vi_pixel(ViKind kind, double nir, double r, double g, double b,
                const ViParams& params) {
    const double eps = params.clip_eps;
    switch (kind) {
        case ViKind::NDVI:
            return (nir - r) / clip_denominator(nir + r, eps);
        case ViKind::IAVI: {
            const double adj = r - params.gamma * (b - r);
            return (nir - adj) / clip_denominator(nir + adj, eps);
        }
        case ViKind::MSAVI2: {
            const double t = 2.0 * nir + 1.0;
            return 0.5 * (t - std::sqrt(t * t - 8.0 * (nir - r)));
        }
        case ViKind::EVI:
            return 2.5 * (nir - r) /
                   clip_denominator(nir + 6.0 * r - 7.5 * b + 1.0, eps);
        case ViKind::VDVI:
            return 2.0 * (2.0 * g - r - b) /
                   clip_denominator(2.0 * g + r + b, eps);
        case ViKind::WDRVI:
            return (0.2 * nir - r) / clip_denominator(0.2 * nir + r, eps);
        case ViKind::MCARI: {
            const double t = 2.0 * nir + 1.0;
            const double den = std::sqrt(t * t - (6.0 * nir - 5.0 * r) - 0.5);
            return 1.5 * (2.5 * (nir - r) - 1.3 * (nir - g)) /
                   clip_denominator(den, eps);
        }
        case ViKind::GDVI:
            return nir - g;
        case ViKind::SAVI: {
            const double l = params.savi_l;
            return (1.0 + l) * (nir - r) / clip_denominator(nir + r + l, eps);
        }
        case ViKind::RVI:
            return r / clip_denominator(nir, eps);
        case ViKind::VCI: {
            const double ndvi = (nir - r) / clip_denominator(nir + r, eps);
            return (ndvi - *params.ndvi_min) /
                   clip_denominator(*params.ndvi_max + *params.ndvi_min, eps);
        }
        case ViKind::GRVI:
            return nir / clip_denominator(g, eps);
        case ViKind::NDGI:
            return (g - r) / clip_denominator(g + r, eps);
    }
    throw DataError("unknown ViKind");
}

ViRaster compute_vi(ViKind kind, const NrgbImage& image, const ViParams& params) {
    params.validate(kind);
    ViRaster out;
    out.kind = kind;
    out.width = image.width;
    out.height = image.height;
    out.values.resize(image.pixel_count());
    out.valid = image.valid;
    const auto& nir = image.planes[static_cast<int>(Plane::NIR)];
    const auto& r = image.planes[static_cast<int>(Plane::R)];
    const auto& g = image.planes[static_cast<int>(Plane::G)];
    const auto& b = image.planes[static_cast<int>(Plane::B)];
    for (std::size_t i = 0; i < out.values.size(); ++i)
        out.values[i] = vi_pixel(kind, nir[i], r[i], g[i], b[i], params);
    return out;
}

std::vector<ViRaster> compute_all(const NrgbImage& image, const ViParams& params) {
    std::vector<ViRaster> out;
    out.reserve(network_vi_kinds().size());
    for (ViKind k : network_vi_kinds())
        out.push_back(compute_vi(k, image, params));
    return out;
}

std::pair<double, double> vci_stats(const std::vector<NrgbImage>& dataset,
                                    const ViParams& params) {
    if (dataset.empty())
        throw DataError("vci_stats: empty dataset");
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    std::size_t valid_count = 0;
    for (const NrgbImage& img : dataset) {
        ViRaster ndvi = compute_vi(ViKind::NDVI, img, params);
        for (std::size_t i = 0; i < ndvi.values.size(); ++i) {
            if (!ndvi.valid[i]) continue;
            lo = std::min(lo, ndvi.values[i]);
            hi = std::max(hi, ndvi.values[i]);
            ++valid_count;
        }
    }
    if (valid_count == 0)
        throw DataError("vci_stats: no valid pixels in dataset");
    return {lo, hi};
}

std::vector<std::vector<double>> correlation_matrix(
    const std::vector<ViRaster>& rasters) {
    const std::size_t m = rasters.size();
    if (m == 0) throw DataError("correlation_matrix: no rasters");
    const ViRaster& first = rasters.front();
    for (const ViRaster& r : rasters) {
        if (r.width != first.width || r.height != first.height)
            throw DataError("correlation_matrix: raster dimension mismatch");
        if (r.valid != first.valid)
            throw DataError("correlation_matrix: raster masks differ");
    }

    std::vector<std::size_t> sel;
    for (std::size_t i = 0; i < first.valid.size(); ++i)
        if (first.valid[i]) sel.push_back(i);
    if (sel.size() < 2)
        throw DataError("correlation_matrix: fewer than 2 valid pixels");

    const double n = static_cast<double>(sel.size());
    std::vector<double> mean(m, 0.0), var(m, 0.0);
    for (std::size_t a = 0; a < m; ++a) {
        double s = 0.0;
        for (std::size_t i : sel) s += rasters[a].values[i];
        mean[a] = s / n;
        double ss = 0.0;
        for (std::size_t i : sel) {
            const double d = rasters[a].values[i] - mean[a];
            ss += d * d;
        }
        var[a] = ss / n;
    }

    const double nan = std::numeric_limits<double>::quiet_NaN();
    std::vector<std::vector<double>> corr(m, std::vector<double>(m, nan));
    for (std::size_t a = 0; a < m; ++a) {
        if (var[a] > 0.0) corr[a][a] = 1.0;
        for (std::size_t bcol = a + 1; bcol < m; ++bcol) {
            if (var[a] <= 0.0 || var[bcol] <= 0.0) continue; // undefined, stays NaN
            double cov = 0.0;
            for (std::size_t i : sel)
                cov += (rasters[a].values[i] - mean[a]) *
                       (rasters[bcol].values[i] - mean[bcol]);
            cov /= n;
            const double c = cov / std::sqrt(var[a] * var[bcol]);
            corr[a][bcol] = std::clamp(c, -1.0, 1.0);
            corr[bcol][a] = corr[a][bcol];
        }
    }
    return corr;
}

} // namespace vifuse
