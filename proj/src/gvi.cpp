#include "vifuse/gvi.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "vifuse/csvio.hpp"

namespace vifuse {

namespace {

void check_pair(const GviLayer& layer) {
    if (layer.alpha.c_out != layer.beta.c_out ||
        layer.alpha.c_in != layer.beta.c_in || layer.alpha.k != layer.beta.k)
        throw DataError("GviLayer: numerator/denominator filter shape mismatch");
}

} // namespace

void GviLayer::zero_grad() {
    alpha.zero_grad();
    beta.zero_grad();
}

Tensor4 gvi_forward(const GviLayer& layer, const Tensor4& x) {
    check_pair(layer);
    const Tensor4 num = conv2d_forward(x, layer.alpha, Padding::Same);
    const Tensor4 den = conv2d_forward(x, layer.beta, Padding::Same);
    return safe_div_forward(num, den, layer.clip_eps);
}

Tensor4 gvi_backward(GviLayer& layer, const Tensor4& x, const Tensor4& upstream) {
    check_pair(layer);
    const Tensor4 num = conv2d_forward(x, layer.alpha, Padding::Same);
    const Tensor4 den = conv2d_forward(x, layer.beta, Padding::Same);
    const auto [gnum, gden] = safe_div_backward(num, den, upstream, layer.clip_eps);
    Tensor4 gx = conv2d_backward(x, layer.alpha, gnum, Padding::Same);
    const Tensor4 gx_den = conv2d_backward(x, layer.beta, gden, Padding::Same);
    for (std::size_t i = 0; i < gx.size(); ++i) gx.v[i] += gx_den.v[i];
    return gx;
}

GviLayer gvi_init(int m, int k, unsigned long long seed, bool ndvi_seed_channel0,
                  double clip_eps) {
    if (m <= 0) throw DataError("gvi_init: need at least one output channel");
    if (!(clip_eps > 0.0)) throw DataError("gvi_init: clip_eps must be positive");
    GviLayer layer;
    layer.alpha = ConvFilter(m, 4, k);
    layer.beta = ConvFilter(m, 4, k);
    layer.clip_eps = clip_eps;

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const int per_out = 4 * k * k;
    for (int co = 0; co < m; ++co) {
        layer.alpha.b[co] = 0.0;
        for (int i = 0; i < per_out; ++i)
            layer.alpha.w[static_cast<std::size_t>(co) * per_out + i] =
                0.3 * u(rng);

        // Denominator: bias 1, weights rescaled so sum |w| = 0.4 per channel.
        // On [0,1] inputs the response then stays inside [0.6, 1.4].
        layer.beta.b[co] = 1.0;
        double* bw = &layer.beta.w[static_cast<std::size_t>(co) * per_out];
        double norm = 0.0;
        for (int i = 0; i < per_out; ++i) {
            bw[i] = u(rng);
            norm += std::abs(bw[i]);
        }
        const double scale = norm > 0.0 ? 0.4 / norm : 0.0;
        for (int i = 0; i < per_out; ++i) bw[i] *= scale;
    }

    if (ndvi_seed_channel0) {
        const int center = (k / 2) * k + (k / 2);
        for (int i = 0; i < per_out; ++i) {
            layer.alpha.w[i] = 0.0;
            layer.beta.w[i] = 0.0;
        }
        layer.alpha.b[0] = 0.0;
        layer.beta.b[0] = 0.0;
        layer.alpha.w[0 * k * k + center] = 1.0;  // NIR
        layer.alpha.w[1 * k * k + center] = -1.0; // R
        layer.beta.w[0 * k * k + center] = 1.0;
        layer.beta.w[1 * k * k + center] = 1.0;
    }
    return layer;
}

GviLayer express_vi(ViKind kind, const ViParams& params) {
    // Structural rejection comes first: no parameter choice makes these three
    // a ratio of affine channel combinations.
    if (kind == ViKind::MSAVI2 || kind == ViKind::MCARI || kind == ViKind::VCI)
        throw NotExpressibleError(vi_name(kind) +
                                  std::string(" has no ratio-of-affine form"));
    params.validate(kind);
    GviLayer layer;
    layer.alpha = ConvFilter(1, 4, 1);
    layer.beta = ConvFilter(1, 4, 1);
    layer.clip_eps = params.clip_eps;
    auto& a = layer.alpha;
    auto& b = layer.beta;

    // Channel order NIR, R, G, B; bias carries the constant term.
    switch (kind) {
        case ViKind::NDVI:
            a.w = {1.0, -1.0, 0.0, 0.0};
            b.w = {1.0, 1.0, 0.0, 0.0};
            break;
        case ViKind::IAVI: {
            const double g = params.gamma;
            a.w = {1.0, -(1.0 + g), 0.0, g};
            b.w = {1.0, 1.0 + g, 0.0, -g};
            break;
        }
        case ViKind::EVI:
            a.w = {2.5, -2.5, 0.0, 0.0};
            b.w = {1.0, 6.0, 0.0, -7.5};
            b.b[0] = 1.0;
            break;
        case ViKind::VDVI:
            a.w = {0.0, -2.0, 4.0, -2.0};
            b.w = {0.0, 1.0, 2.0, 1.0};
            break;
        case ViKind::WDRVI:
            a.w = {0.2, -1.0, 0.0, 0.0};
            b.w = {0.2, 1.0, 0.0, 0.0};
            break;
        case ViKind::GDVI:
            a.w = {1.0, 0.0, -1.0, 0.0};
            b.b[0] = 1.0; // constant denominator
            break;
        case ViKind::SAVI: {
            const double l = params.savi_l;
            a.w = {1.0 + l, -(1.0 + l), 0.0, 0.0};
            b.w = {1.0, 1.0, 0.0, 0.0};
            b.b[0] = l;
            break;
        }
        case ViKind::RVI:
            a.w = {0.0, 1.0, 0.0, 0.0};
            b.w = {1.0, 0.0, 0.0, 0.0};
            break;
        case ViKind::GRVI:
            a.w = {1.0, 0.0, 0.0, 0.0};
            b.w = {0.0, 0.0, 1.0, 0.0};
            break;
        case ViKind::NDGI:
            a.w = {0.0, -1.0, 1.0, 0.0};
            b.w = {0.0, 1.0, 1.0, 0.0};
            break;
        case ViKind::MSAVI2:
        case ViKind::MCARI:
        case ViKind::VCI:
            throw NotExpressibleError(vi_name(kind) +
                                      std::string(" has no ratio-of-affine form"));
    }
    return layer;
}

namespace {

void write_doubles(std::ostream& os, const std::vector<double>& v) {
    for (double x : v) os << ' ' << format_double(x);
}

std::vector<double> read_doubles(std::istream& is, std::size_t count,
                                 const std::string& path) {
    std::vector<double> v(count);
    for (std::size_t i = 0; i < count; ++i)
        if (!(is >> v[i]))
            throw DataError("malformed parameter file: " + path);
    return v;
}

} // namespace

void save_gvi(const GviLayer& layer, const std::string& path) {
    check_pair(layer);
    std::ostringstream os;
    os << "gvi " << layer.channels() << ' ' << layer.alpha.c_in << ' '
       << layer.kernel() << ' ' << format_double(layer.clip_eps) << '\n';
    os << "alpha";
    write_doubles(os, layer.alpha.b);
    write_doubles(os, layer.alpha.w);
    os << "\nbeta";
    write_doubles(os, layer.beta.b);
    write_doubles(os, layer.beta.w);
    os << '\n';
    atomic_write(path, os.str());
}

GviLayer load_gvi(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open parameter file: " + path);
    std::string tag;
    int m = 0, c_in = 0, k = 0;
    double eps = 0.0;
    if (!(is >> tag >> m >> c_in >> k >> eps) || tag != "gvi")
        throw DataError("malformed parameter file: " + path);
    if (m <= 0 || c_in <= 0 || k <= 0 || k % 2 == 0 || !(eps > 0.0))
        throw DataError("malformed parameter file: " + path);
    GviLayer layer;
    layer.alpha = ConvFilter(m, c_in, k);
    layer.beta = ConvFilter(m, c_in, k);
    layer.clip_eps = eps;
    const std::size_t nw = layer.alpha.w.size();
    if (!(is >> tag) || tag != "alpha")
        throw DataError("malformed parameter file: " + path);
    layer.alpha.b = read_doubles(is, static_cast<std::size_t>(m), path);
    layer.alpha.w = read_doubles(is, nw, path);
    if (!(is >> tag) || tag != "beta")
        throw DataError("malformed parameter file: " + path);
    layer.beta.b = read_doubles(is, static_cast<std::size_t>(m), path);
    layer.beta.w = read_doubles(is, nw, path);
    return layer;
}

} // namespace vifuse
