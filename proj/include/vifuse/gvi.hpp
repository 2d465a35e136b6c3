#pragma once

#include <stdexcept>
#include <string>

#include "vifuse/diffcore.hpp"
#include "vifuse/indices.hpp"
#include "vifuse/tensor.hpp"

namespace vifuse {

// Learnable generalized vegetation index: a clipped ratio of two convolutions
// over NRGB input. With k=1 the numerator and denominator are affine channel
// combinations (bias + per-channel weights), which is exactly the rational
// form shared by most of the fixed indices.
struct GviLayer {
    ConvFilter alpha; // numerator filters
    ConvFilter beta;  // denominator filters
    double clip_eps = 1e-6;

    int channels() const { return alpha.c_out; }
    int kernel() const { return alpha.k; }
    void zero_grad();
};

// safe_div(conv(x, alpha), conv(x, beta)), same padding. Output [N, m, H, W],
// finite for every input.
Tensor4 gvi_forward(const GviLayer& layer, const Tensor4& x);

// Composite adjoint through the ratio and both convolutions. Accumulates into
// the filter gradient buffers and returns the gradient with respect to x.
Tensor4 gvi_backward(GviLayer& layer, const Tensor4& x, const Tensor4& upstream);

// Fresh layer with m output channels and odd kernel k. Numerator weights are
// small random; denominator bias starts at 1 with weights scaled so the
// denominator response on [0,1] inputs stays inside [0.6, 1.4] and clipping is
// inactive at the start of training. Optionally seeds channel 0 with the NDVI
// coefficients.
GviLayer gvi_init(int m, int k, unsigned long long seed,
                  bool ndvi_seed_channel0 = false, double clip_eps = 1e-6);

// Requested index has no exact rational-form realization.
struct NotExpressibleError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Fixed k=1, m=1 weights that reproduce `kind` exactly on clip-free inputs.
// Accepted: NDVI, IAVI, EVI, VDVI, WDRVI, GDVI (degenerate, denominator = 1),
// SAVI, RVI, GRVI, NDGI. MSAVI2, MCARI and VCI throw NotExpressibleError.
GviLayer express_vi(ViKind kind, const ViParams& params = {});

// Flat text serialization of the layer parameters; exact round trip.
void save_gvi(const GviLayer& layer, const std::string& path);
GviLayer load_gvi(const std::string& path);

} // namespace vifuse
