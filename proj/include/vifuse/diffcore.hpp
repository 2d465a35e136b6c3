#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "vifuse/common.hpp"
#include "vifuse/tensor.hpp"

namespace vifuse {

enum class Padding { Same, Valid };

// 2-D convolution filter bank with square odd kernels and per-output bias.
// Gradient buffers are shape-matched and accumulated by the backward pass.
struct ConvFilter {
    int c_out = 0, c_in = 0, k = 1;
    std::vector<double> w;  // [c_out][c_in][k][k]
    std::vector<double> b;  // [c_out]
    std::vector<double> gw; // accumulated weight gradient
    std::vector<double> gb; // accumulated bias gradient

    ConvFilter() = default;
    ConvFilter(int c_out_, int c_in_, int k_);

    std::size_t widx(int co, int ci, int ky, int kx) const {
        return ((static_cast<std::size_t>(co) * c_in + ci) * k + ky) * k + kx;
    }
    double& wat(int co, int ci, int ky, int kx) { return w[widx(co, ci, ky, kx)]; }
    double wat(int co, int ci, int ky, int kx) const { return w[widx(co, ci, ky, kx)]; }

    void zero_grad();
};

// Cross-correlation (deep-learning convention, no kernel flip) with bias.
// Same padding preserves H and W; valid padding shrinks them by k-1.
Tensor4 conv2d_forward(const Tensor4& x, const ConvFilter& f,
                       Padding pad = Padding::Same);

// Analytic adjoint. Accumulates weight/bias gradients into `f` and returns
// the gradient with respect to x.
Tensor4 conv2d_backward(const Tensor4& x, ConvFilter& f, const Tensor4& upstream,
                        Padding pad = Padding::Same);

// Denominator guard: sign(d)*max(|d|, eps) with sign(0) = +1.
double clip_denominator(double d, double eps);
// Numerator guard: clamp to [-1/eps, 1/eps].
double clamp_numerator(double x, double eps);

// Elementwise clipped division: clamp(num)/clip(den). Total: finite for every
// input, including zero denominators.
Tensor4 safe_div_forward(const Tensor4& num, const Tensor4& den, double clip_eps);

// Gradients of the clipped division. A saturated entry (clamped numerator or
// clipped denominator, boundary included) passes zero gradient to that operand.
std::pair<Tensor4, Tensor4> safe_div_backward(const Tensor4& num,
                                              const Tensor4& den,
                                              const Tensor4& upstream,
                                              double clip_eps);

// Per-pixel affine map over channels: [N,C_in,H,W] -> [N,C_out,H,W].
struct DenseLayer {
    int out = 0, in = 0;
    std::vector<double> w;  // [out][in]
    std::vector<double> b;  // [out]
    std::vector<double> gw;
    std::vector<double> gb;

    DenseLayer() = default;
    DenseLayer(int out_, int in_);

    double& wat(int o, int i) { return w[static_cast<std::size_t>(o) * in + i]; }
    double wat(int o, int i) const { return w[static_cast<std::size_t>(o) * in + i]; }

    void zero_grad();
};

Tensor4 dense_forward(const Tensor4& x, const DenseLayer& d);
Tensor4 dense_backward(const Tensor4& x, DenseLayer& d, const Tensor4& upstream);

Tensor4 relu_forward(const Tensor4& x);
// Subgradient at 0 is 0.
Tensor4 relu_backward(const Tensor4& x, const Tensor4& upstream);

double sigmoid(double x);
Tensor4 sigmoid_forward(const Tensor4& x);
// Takes the forward *output* y = sigmoid(x).
Tensor4 sigmoid_backward(const Tensor4& y, const Tensor4& upstream);

// Adam with decoupled weight decay. One state per parameter vector; moment
// buffers are sized on first use.
struct AdamState {
    double lr = 0.01;
    double weight_decay = 5e-4;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long step = 0;
    std::vector<double> m, v;
};

// One optimizer step. Throws NumericError on a non-finite gradient entry.
void adam_update(std::vector<double>& params, const std::vector<double>& grads,
                 AdamState& s);

// A differentiable operation flattened to vectors, for gradient checking.
// `forward` maps inputs to outputs; `vjp` returns the analytic gradient of
// <upstream, forward(x)> with respect to x.
struct DiffProblem {
    std::function<std::vector<double>(const std::vector<double>&)> forward;
    std::function<std::vector<double>(const std::vector<double>&,
                                      const std::vector<double>&)> vjp;
};

// Central finite-difference check of `vjp` against `forward`. Returns the
// worst discrepancy |analytic - numeric| / max(1, |analytic|, |numeric|).
// The caller keeps the point at least 10h away from kinks.
double finite_diff_check(const DiffProblem& p, const std::vector<double>& x,
                         const std::vector<double>& upstream, double h = 1e-5);

// Returns a filter with one more input channel inserted at `new_position`,
// its weights copied from `source_channel` of the original filter.
ConvFilter extend_input_channels(const ConvFilter& f, int source_channel,
                                 int new_position);

} // namespace vifuse
