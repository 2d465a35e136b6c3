#include "vifuse/diffcore.hpp"

#include <algorithm>
#include <cmath>

namespace vifuse {

ConvFilter::ConvFilter(int c_out_, int c_in_, int k_)
    : c_out(c_out_), c_in(c_in_), k(k_) {
    if (c_out_ <= 0 || c_in_ <= 0 || k_ <= 0 || k_ % 2 == 0)
        throw DataError("ConvFilter: channels must be positive and k odd");
    const std::size_t nw = static_cast<std::size_t>(c_out_) * c_in_ * k_ * k_;
    w.assign(nw, 0.0);
    gw.assign(nw, 0.0);
    b.assign(c_out_, 0.0);
    gb.assign(c_out_, 0.0);
}

void ConvFilter::zero_grad() {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
}

namespace {

struct ConvDims {
    int pad, h_out, w_out;
};

ConvDims conv_dims(const Tensor4& x, const ConvFilter& f, Padding pad) {
    if (x.c != f.c_in)
        throw DataError("conv2d: input channel count does not match filter");
    if (pad == Padding::Same) return {f.k / 2, x.h, x.w};
    if (x.h < f.k || x.w < f.k)
        throw DataError("conv2d: input smaller than kernel with valid padding");
    return {0, x.h - f.k + 1, x.w - f.k + 1};
}

} // namespace

Tensor4 conv2d_forward(const Tensor4& x, const ConvFilter& f, Padding pad) {
    const auto [p, h_out, w_out] = conv_dims(x, f, pad);
    Tensor4 out(x.n, f.c_out, h_out, w_out);
    for (int in = 0; in < x.n; ++in) {
        for (int co = 0; co < f.c_out; ++co) {
            double* orow0 = &out.v[out.idx(in, co, 0, 0)];
            std::fill(orow0, orow0 + static_cast<std::size_t>(h_out) * w_out,
                      f.b[co]);
            for (int ci = 0; ci < f.c_in; ++ci) {
                for (int ky = 0; ky < f.k; ++ky) {
                    const int oy_lo = std::max(0, p - ky);
                    const int oy_hi = std::min(h_out - 1, x.h - 1 - ky + p);
                    for (int kx = 0; kx < f.k; ++kx) {
                        const double wv = f.wat(co, ci, ky, kx);
                        if (wv == 0.0) continue;
                        const int ox_lo = std::max(0, p - kx);
                        const int ox_hi = std::min(w_out - 1, x.w - 1 - kx + p);
                        for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                            const double* xr =
                                &x.v[x.idx(in, ci, oy + ky - p, ox_lo + kx - p)];
                            double* orow = &out.v[out.idx(in, co, oy, ox_lo)];
                            for (int ox = 0; ox <= ox_hi - ox_lo; ++ox)
                                orow[ox] += wv * xr[ox];
                        }
                    }
                }
            }
        }
    }
    return out;
}

Tensor4 conv2d_backward(const Tensor4& x, ConvFilter& f, const Tensor4& upstream,
                        Padding pad) {
    const auto [p, h_out, w_out] = conv_dims(x, f, pad);
    if (upstream.n != x.n || upstream.c != f.c_out || upstream.h != h_out ||
        upstream.w != w_out)
        throw DataError("conv2d_backward: upstream shape mismatch");

    Tensor4 gx(x.n, x.c, x.h, x.w);
    for (int in = 0; in < x.n; ++in) {
        for (int co = 0; co < f.c_out; ++co) {
            double bsum = 0.0;
            const double* u0 = &upstream.v[upstream.idx(in, co, 0, 0)];
            const std::size_t total = static_cast<std::size_t>(h_out) * w_out;
            for (std::size_t i = 0; i < total; ++i) bsum += u0[i];
            f.gb[co] += bsum;

            for (int ci = 0; ci < f.c_in; ++ci) {
                for (int ky = 0; ky < f.k; ++ky) {
                    const int oy_lo = std::max(0, p - ky);
                    const int oy_hi = std::min(h_out - 1, x.h - 1 - ky + p);
                    for (int kx = 0; kx < f.k; ++kx) {
                        const int ox_lo = std::max(0, p - kx);
                        const int ox_hi = std::min(w_out - 1, x.w - 1 - kx + p);
                        const double wv = f.wat(co, ci, ky, kx);
                        double wg = 0.0;
                        for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                            const double* ur = &upstream.v[upstream.idx(in, co, oy, ox_lo)];
                            const double* xr =
                                &x.v[x.idx(in, ci, oy + ky - p, ox_lo + kx - p)];
                            double* gr =
                                &gx.v[gx.idx(in, ci, oy + ky - p, ox_lo + kx - p)];
                            const int len = ox_hi - ox_lo + 1;
                            for (int ox = 0; ox < len; ++ox) {
                                wg += ur[ox] * xr[ox];
                                gr[ox] += wv * ur[ox];
                            }
                        }
                        f.gw[f.widx(co, ci, ky, kx)] += wg;
                    }
                }
            }
        }
    }
    return gx;
}

double clip_denominator(double d, double eps) {
    const double sign = d < 0.0 ? -1.0 : 1.0; // sign(0) = +1
    return sign * std::max(std::abs(d), eps);
}

double clamp_numerator(double x, double eps) {
    const double bound = 1.0 / eps;
    return std::clamp(x, -bound, bound);
}

Tensor4 safe_div_forward(const Tensor4& num, const Tensor4& den, double clip_eps) {
    if (!num.same_shape(den))
        throw DataError("safe_div: shape mismatch");
    if (!(clip_eps > 0.0))
        throw DataError("safe_div: clip_eps must be positive");
    Tensor4 out(num.n, num.c, num.h, num.w);
    for (std::size_t i = 0; i < num.size(); ++i)
        out.v[i] = clamp_numerator(num.v[i], clip_eps) /
                   clip_denominator(den.v[i], clip_eps);
    return out;
}

std::pair<Tensor4, Tensor4> safe_div_backward(const Tensor4& num,
                                              const Tensor4& den,
                                              const Tensor4& upstream,
                                              double clip_eps) {
    if (!num.same_shape(den) || !num.same_shape(upstream))
        throw DataError("safe_div_backward: shape mismatch");
    Tensor4 gnum(num.n, num.c, num.h, num.w);
    Tensor4 gden(num.n, num.c, num.h, num.w);
    const double bound = 1.0 / clip_eps;
    for (std::size_t i = 0; i < num.size(); ++i) {
        const double nc = clamp_numerator(num.v[i], clip_eps);
        const double dc = clip_denominator(den.v[i], clip_eps);
        const double u = upstream.v[i];
        const bool num_live = std::abs(num.v[i]) < bound;
        const bool den_live = std::abs(den.v[i]) > clip_eps;
        gnum.v[i] = num_live ? u / dc : 0.0;
        gden.v[i] = den_live ? -u * nc / (dc * dc) : 0.0;
    }
    return {std::move(gnum), std::move(gden)};
}

DenseLayer::DenseLayer(int out_, int in_) : out(out_), in(in_) {
    if (out_ <= 0 || in_ <= 0)
        throw DataError("DenseLayer: sizes must be positive");
    w.assign(static_cast<std::size_t>(out_) * in_, 0.0);
    gw.assign(w.size(), 0.0);
    b.assign(out_, 0.0);
    gb.assign(out_, 0.0);
}

void DenseLayer::zero_grad() {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
}

Tensor4 dense_forward(const Tensor4& x, const DenseLayer& d) {
    if (x.c != d.in)
        throw DataError("dense: input channel count does not match layer");
    Tensor4 out(x.n, d.out, x.h, x.w);
    const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
    for (int in = 0; in < x.n; ++in) {
        for (int o = 0; o < d.out; ++o) {
            double* orow = &out.v[out.idx(in, o, 0, 0)];
            std::fill(orow, orow + plane, d.b[o]);
            for (int i = 0; i < d.in; ++i) {
                const double wv = d.wat(o, i);
                const double* xr = &x.v[x.idx(in, i, 0, 0)];
                for (std::size_t px = 0; px < plane; ++px)
                    orow[px] += wv * xr[px];
            }
        }
    }
    return out;
}

Tensor4 dense_backward(const Tensor4& x, DenseLayer& d, const Tensor4& upstream) {
    if (x.c != d.in || upstream.c != d.out || upstream.n != x.n ||
        upstream.h != x.h || upstream.w != x.w)
        throw DataError("dense_backward: shape mismatch");
    Tensor4 gx(x.n, x.c, x.h, x.w);
    const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
    for (int in = 0; in < x.n; ++in) {
        for (int o = 0; o < d.out; ++o) {
            const double* ur = &upstream.v[upstream.idx(in, o, 0, 0)];
            double bsum = 0.0;
            for (std::size_t px = 0; px < plane; ++px) bsum += ur[px];
            d.gb[o] += bsum;
            for (int i = 0; i < d.in; ++i) {
                const double wv = d.wat(o, i);
                const double* xr = &x.v[x.idx(in, i, 0, 0)];
                double* gr = &gx.v[gx.idx(in, i, 0, 0)];
                double wg = 0.0;
                for (std::size_t px = 0; px < plane; ++px) {
                    wg += ur[px] * xr[px];
                    gr[px] += wv * ur[px];
                }
                d.gw[static_cast<std::size_t>(o) * d.in + i] += wg;
            }
        }
    }
    return gx;
}

Tensor4 relu_forward(const Tensor4& x) {
    Tensor4 out(x.n, x.c, x.h, x.w);
    for (std::size_t i = 0; i < x.size(); ++i)
        out.v[i] = x.v[i] > 0.0 ? x.v[i] : 0.0;
    return out;
}

Tensor4 relu_backward(const Tensor4& x, const Tensor4& upstream) {
    if (!x.same_shape(upstream))
        throw DataError("relu_backward: shape mismatch");
    Tensor4 gx(x.n, x.c, x.h, x.w);
    for (std::size_t i = 0; i < x.size(); ++i)
        gx.v[i] = x.v[i] > 0.0 ? upstream.v[i] : 0.0;
    return gx;
}

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

Tensor4 sigmoid_forward(const Tensor4& x) {
    Tensor4 out(x.n, x.c, x.h, x.w);
    for (std::size_t i = 0; i < x.size(); ++i) out.v[i] = sigmoid(x.v[i]);
    return out;
}

Tensor4 sigmoid_backward(const Tensor4& y, const Tensor4& upstream) {
    if (!y.same_shape(upstream))
        throw DataError("sigmoid_backward: shape mismatch");
    Tensor4 gx(y.n, y.c, y.h, y.w);
    for (std::size_t i = 0; i < y.size(); ++i)
        gx.v[i] = upstream.v[i] * y.v[i] * (1.0 - y.v[i]);
    return gx;
}

void adam_update(std::vector<double>& params, const std::vector<double>& grads,
                 AdamState& s) {
    if (params.size() != grads.size())
        throw DataError("adam_update: parameter/gradient size mismatch");
    if (s.m.empty()) {
        s.m.assign(params.size(), 0.0);
        s.v.assign(params.size(), 0.0);
    }
    if (s.m.size() != params.size())
        throw DataError("adam_update: state sized for a different parameter vector");
    for (double g : grads)
        if (!std::isfinite(g))
            throw NumericError("adam_update: non-finite gradient");

    s.step += 1;
    const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
    const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * g;
        s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * g * g;
        const double mhat = s.m[i] / bc1;
        const double vhat = s.v[i] / bc2;
        params[i] -= s.lr * (mhat / (std::sqrt(vhat) + s.eps) +
                             s.weight_decay * params[i]);
    }
}

double finite_diff_check(const DiffProblem& p, const std::vector<double>& x,
                         const std::vector<double>& upstream, double h) {
    const std::vector<double> analytic = p.vjp(x, upstream);
    if (analytic.size() != x.size())
        throw DataError("finite_diff_check: vjp size mismatch");

    auto weighted = [&upstream](const std::vector<double>& y) {
        if (y.size() != upstream.size())
            throw DataError("finite_diff_check: output/upstream size mismatch");
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += upstream[i] * y[i];
        return s;
    };

    double worst = 0.0;
    std::vector<double> probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        probe[i] = x[i] + h;
        const double lp = weighted(p.forward(probe));
        probe[i] = x[i] - h;
        const double lm = weighted(p.forward(probe));
        probe[i] = x[i];
        const double numeric = (lp - lm) / (2.0 * h);
        const double denom =
            std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
}

ConvFilter extend_input_channels(const ConvFilter& f, int source_channel,
                                 int new_position) {
    if (source_channel < 0 || source_channel >= f.c_in)
        throw DataError("extend_input_channels: source channel out of range");
    if (new_position < 0 || new_position > f.c_in)
        throw DataError("extend_input_channels: insert position out of range");
    ConvFilter out(f.c_out, f.c_in + 1, f.k);
    out.b = f.b;
    for (int co = 0; co < f.c_out; ++co) {
        for (int ci = 0; ci < out.c_in; ++ci) {
            // Channels at or past the insert position come from index ci-1.
            const int src = ci == new_position ? source_channel
                          : ci < new_position ? ci
                                              : ci - 1;
            for (int ky = 0; ky < f.k; ++ky)
                for (int kx = 0; kx < f.k; ++kx)
                    out.wat(co, ci, ky, kx) = f.wat(co, src, ky, kx);
        }
    }
    return out;
}

} // namespace vifuse
