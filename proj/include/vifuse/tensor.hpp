#pragma once

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace vifuse {

// Rank-4 real tensor in NCHW layout with a paired, same-shape gradient buffer.
// The gradient buffer starts zeroed; backward passes accumulate into it.
struct Tensor4 {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<double> v; // values
    std::vector<double> g; // gradient

    Tensor4() = default;

    Tensor4(int n_, int c_, int h_, int w_, double fill = 0.0)
        : n(n_), c(c_), h(h_), w(w_) {
        if (n_ <= 0 || c_ <= 0 || h_ <= 0 || w_ <= 0)
            throw std::invalid_argument("Tensor4: dimensions must be positive");
        const std::size_t total =
            static_cast<std::size_t>(n_) * c_ * h_ * w_;
        v.assign(total, fill);
        g.assign(total, 0.0);
    }

    std::size_t size() const { return v.size(); }

    std::size_t idx(int in, int ic, int iy, int ix) const {
        return ((static_cast<std::size_t>(in) * c + ic) * h + iy) * w + ix;
    }

    double& at(int in, int ic, int iy, int ix) { return v[idx(in, ic, iy, ix)]; }
    double at(int in, int ic, int iy, int ix) const { return v[idx(in, ic, iy, ix)]; }

    double& grad_at(int in, int ic, int iy, int ix) { return g[idx(in, ic, iy, ix)]; }
    double grad_at(int in, int ic, int iy, int ix) const { return g[idx(in, ic, iy, ix)]; }

    bool same_shape(const Tensor4& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }

    void zero_grad() { std::fill(g.begin(), g.end(), 0.0); }
};

} // namespace vifuse
