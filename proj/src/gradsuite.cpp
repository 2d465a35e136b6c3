#include "vifuse/gradsuite.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "vifuse/diffcore.hpp"
#include "vifuse/gvi.hpp"
#include "vifuse/losses.hpp"
#include "vifuse/norm.hpp"

namespace vifuse {

namespace {

using Vec = std::vector<double>;

// Reads tensors and vectors back out of a flat parameter vector.
struct Cursor {
    const Vec& v;
    std::size_t pos = 0;

    Tensor4 tensor(int n, int c, int h, int w) {
        Tensor4 t(n, c, h, w);
        std::copy(v.begin() + pos, v.begin() + pos + t.size(), t.v.begin());
        pos += t.size();
        return t;
    }
    Vec vec(std::size_t count) {
        Vec out(v.begin() + pos, v.begin() + pos + count);
        pos += count;
        return out;
    }
};

void append(Vec& dst, const Vec& src) {
    dst.insert(dst.end(), src.begin(), src.end());
}

double urand(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

Vec uvec(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
    Vec v(n);
    for (double& x : v) x = urand(rng, lo, hi);
    return v;
}

double conv_point(std::mt19937_64& rng, Padding pad, double h) {
    const int N = 2, CI = 3, CO = 2, K = 3, H = 5, W = 5;
    Vec x0 = uvec(rng, N * CI * H * W, -1.0, 1.0);
    append(x0, uvec(rng, CO * CI * K * K, -1.0, 1.0));
    append(x0, uvec(rng, CO, -0.5, 0.5));
    const int HO = pad == Padding::Same ? H : H - K + 1;
    const int WO = pad == Padding::Same ? W : W - K + 1;
    const Vec up = uvec(rng, N * CO * HO * WO, -1.0, 1.0);

    auto unpack = [=](const Vec& flat) {
        Cursor cur{flat};
        Tensor4 x = cur.tensor(N, CI, H, W);
        ConvFilter f(CO, CI, K);
        f.w = cur.vec(f.w.size());
        f.b = cur.vec(f.b.size());
        return std::make_pair(std::move(x), std::move(f));
    };
    DiffProblem p;
    p.forward = [=](const Vec& flat) {
        auto [x, f] = unpack(flat);
        return conv2d_forward(x, f, pad).v;
    };
    p.vjp = [=](const Vec& flat, const Vec& upstream) {
        auto [x, f] = unpack(flat);
        Tensor4 u(N, CO, HO, WO);
        u.v = upstream;
        Vec g = conv2d_backward(x, f, u, pad).v;
        append(g, f.gw);
        append(g, f.gb);
        return g;
    };
    return finite_diff_check(p, x0, up, h);
}

double safe_div_point(std::mt19937_64& rng, double h) {
    const int N = 1, C = 2, H = 3, W = 4;
    const std::size_t count = static_cast<std::size_t>(N) * C * H * W;
    Vec x0 = uvec(rng, count, -1.0, 1.0);
    for (std::size_t i = 0; i < count; ++i) {
        const double mag = urand(rng, 0.5, 1.5);
        x0.push_back(urand(rng, -1.0, 1.0) < 0.0 ? -mag : mag);
    }
    const Vec up = uvec(rng, count, -1.0, 1.0);
    const double eps = 1e-6;

    DiffProblem p;
    p.forward = [=](const Vec& flat) {
        Cursor cur{flat};
        const Tensor4 num = cur.tensor(N, C, H, W);
        const Tensor4 den = cur.tensor(N, C, H, W);
        return safe_div_forward(num, den, eps).v;
    };
    p.vjp = [=](const Vec& flat, const Vec& upstream) {
        Cursor cur{flat};
        const Tensor4 num = cur.tensor(N, C, H, W);
        const Tensor4 den = cur.tensor(N, C, H, W);
        Tensor4 u(N, C, H, W);
        u.v = upstream;
        auto [gn, gd] = safe_div_backward(num, den, u, eps);
        Vec g = std::move(gn.v);
        append(g, gd.v);
        return g;
    };
    return finite_diff_check(p, x0, up, h);
}

double dense_point(std::mt19937_64& rng, double h) {
    const int N = 2, CI = 3, CO = 2, H = 4, W = 4;
    Vec x0 = uvec(rng, N * CI * H * W, -1.0, 1.0);
    append(x0, uvec(rng, CO * CI, -1.0, 1.0));
    append(x0, uvec(rng, CO, -0.5, 0.5));
    const Vec up = uvec(rng, N * CO * H * W, -1.0, 1.0);

    auto unpack = [=](const Vec& flat) {
        Cursor cur{flat};
        Tensor4 x = cur.tensor(N, CI, H, W);
        DenseLayer d(CO, CI);
        d.w = cur.vec(d.w.size());
        d.b = cur.vec(d.b.size());
        return std::make_pair(std::move(x), std::move(d));
    };
    DiffProblem p;
    p.forward = [=](const Vec& flat) {
        auto [x, d] = unpack(flat);
        return dense_forward(x, d).v;
    };
    p.vjp = [=](const Vec& flat, const Vec& upstream) {
        auto [x, d] = unpack(flat);
        Tensor4 u(N, CO, H, W);
        u.v = upstream;
        Vec g = dense_backward(x, d, u).v;
        append(g, d.gw);
        append(g, d.gb);
        return g;
    };
    return finite_diff_check(p, x0, up, h);
}

double relu_point(std::mt19937_64& rng, double h) {
    const int N = 1, C = 2, H = 4, W = 4;
    const std::size_t count = static_cast<std::size_t>(N) * C * H * W;
    Vec x0(count);
    for (double& v : x0) {
        do v = urand(rng, -1.0, 1.0); while (std::abs(v) < 1e-3);
    }
    const Vec up = uvec(rng, count, -1.0, 1.0);
    DiffProblem p;
    p.forward = [=](const Vec& flat) {
        Cursor cur{flat};
        return relu_forward(cur.tensor(N, C, H, W)).v;
    };
    p.vjp = [=](const Vec& flat, const Vec& upstream) {
        Cursor cur{flat};
        const Tensor4 x = cur.tensor(N, C, H, W);
        Tensor4 u(N, C, H, W);
        u.v = upstream;
        return relu_backward(x, u).v;
    };
    return finite_diff_check(p, x0, up, h);
}

double sigmoid_point(std::mt19937_64& rng, double h) {
    const int N = 1, C = 2, H = 4, W = 4;
    const std::size_t count = static_cast<std::size_t>(N) * C * H * W;
    const Vec x0 = uvec(rng, count, -3.0, 3.0);
    const Vec up = uvec(rng, count, -1.0, 1.0);
    DiffProblem p;
    p.forward = [=](const Vec& flat) {
        Cursor cur{flat};
        return sigmoid_forward(cur.tensor(N, C, H, W)).v;
    };
    p.vjp = [=](const Vec& flat, const Vec& upstream) {
        Cursor cur{flat};
        const Tensor4 y = sigmoid_forward(cur.tensor(N, C, H, W));
        Tensor4 u(N, C, H, W);
        u.v = upstream;
        return sigmoid_backward(y, u).v;
    };
    return finite_diff_check(p, x0, up, h);
}

double norm_point(std::mt19937_64& rng, NormMode mode, bool training, double h) {
    const int N = 3, C = 4, H = 3, W = 3;
    const int groups = mode == NormMode::BN ? 1 : 2;
    const std::size_t count = static_cast<std::size_t>(N) * C * H * W;
    const bool has_rho = mode == NormMode::AGN;

    Vec x0 = uvec(rng, count, -2.0, 2.0);
    append(x0, uvec(rng, C, 0.5, 1.5));  // scale
    append(x0, uvec(rng, C, -0.5, 0.5)); // shift
    if (has_rho) x0.push_back(urand(rng, -2.0, 2.0));
    const Vec up = uvec(rng, count, -1.0, 1.0);
    const Vec run_mean = uvec(rng, C, -0.5, 0.5);
    const Vec run_var = uvec(rng, C, 0.5, 1.5);

    auto unpack = [=](const Vec& flat) {
        Cursor cur{flat};
        Tensor4 x = cur.tensor(N, C, H, W);
        NormState s = make_norm_state(mode, C, groups);
        s.scale = cur.vec(C);
        s.shift = cur.vec(C);
        if (has_rho) s.rho = cur.vec(1)[0];
        s.training = training;
        s.running_mean = run_mean;
        s.running_var = run_var;
        return std::make_pair(std::move(x), std::move(s));
    };
    DiffProblem p;
    p.forward = [=](const Vec& flat) {
        auto [x, s] = unpack(flat);
        return norm_forward(x, s).v;
    };
    p.vjp = [=](const Vec& flat, const Vec& upstream) {
        auto [x, s] = unpack(flat);
        Tensor4 u(N, C, H, W);
        u.v = upstream;
        Vec g = norm_backward(x, s, u).v;
        append(g, s.gscale);
        append(g, s.gshift);
        if (has_rho) g.push_back(s.grho);
        return g;
    };
    return finite_diff_check(p, x0, up, h);
}

double gvi_point(std::mt19937_64& rng, double h) {
    const int N = 1, H = 4, W = 4, M = 2, K = 1;
    const GviLayer proto = gvi_init(M, K, rng(), false, 1e-6);
    const std::size_t count = static_cast<std::size_t>(N) * 4 * H * W;

    Vec x0 = uvec(rng, count, 0.0, 1.0);
    append(x0, proto.alpha.w);
    append(x0, proto.alpha.b);
    append(x0, proto.beta.w);
    append(x0, proto.beta.b);
    const Vec up = uvec(rng, static_cast<std::size_t>(N) * M * H * W, -1.0, 1.0);

    auto unpack = [=](const Vec& flat) {
        Cursor cur{flat};
        Tensor4 x = cur.tensor(N, 4, H, W);
        GviLayer layer;
        layer.alpha = ConvFilter(M, 4, K);
        layer.beta = ConvFilter(M, 4, K);
        layer.clip_eps = proto.clip_eps;
        layer.alpha.w = cur.vec(layer.alpha.w.size());
        layer.alpha.b = cur.vec(layer.alpha.b.size());
        layer.beta.w = cur.vec(layer.beta.w.size());
        layer.beta.b = cur.vec(layer.beta.b.size());
        return std::make_pair(std::move(x), std::move(layer));
    };
    DiffProblem p;
    p.forward = [=](const Vec& flat) {
        auto [x, layer] = unpack(flat);
        return gvi_forward(layer, x).v;
    };
    p.vjp = [=](const Vec& flat, const Vec& upstream) {
        auto [x, layer] = unpack(flat);
        Tensor4 u(N, M, H, W);
        u.v = upstream;
        Vec g = gvi_backward(layer, x, u).v;
        append(g, layer.alpha.gw);
        append(g, layer.alpha.gb);
        append(g, layer.beta.gw);
        append(g, layer.beta.gb);
        return g;
    };
    return finite_diff_check(p, x0, up, h);
}

struct LossPoint {
    int n = 2, c = 3, h = 4, w = 4;
    Tensor4 probs{2, 3, 4, 4};
    std::vector<LabelGrid> targets;
};

// Random probabilities mixed toward uniform (every class prob stays well away
// from 0) and random 1-2 label target sets. Pixels with two labels are redrawn
// until the two target probabilities are separated, so the max over the target
// set is locally smooth.
LossPoint make_loss_point(std::mt19937_64& rng) {
    LossPoint lp;
    std::normal_distribution<double> nd(0.0, 1.0);
    auto draw_pixel = [&](int n, int y, int x) {
        double e[3], sum = 0.0;
        for (double& v : e) {
            v = std::exp(nd(rng));
            sum += v;
        }
        for (int c = 0; c < 3; ++c)
            lp.probs.at(n, c, y, x) = 0.9 * e[c] / sum + 0.1 / 3.0;
    };
    for (int n = 0; n < lp.n; ++n) {
        LabelGrid t(lp.w, lp.h, lp.c);
        for (int y = 0; y < lp.h; ++y) {
            for (int x = 0; x < lp.w; ++x) {
                draw_pixel(n, y, x);
                const bool valid = (y == 0 && x == 0) || urand(rng, 0.0, 1.0) > 0.1;
                if (!valid) {
                    t.valid[t.idx(y, x)] = 0;
                    continue;
                }
                const int a = static_cast<int>(urand(rng, 0.0, 3.0)) % 3;
                t.add_label(y, x, a);
                if (urand(rng, 0.0, 1.0) < 0.5) {
                    const int b = (a + 1 + static_cast<int>(urand(rng, 0.0, 2.0)) % 2) % 3;
                    t.add_label(y, x, b);
                    while (true) {
                        double vals[2];
                        int k = 0;
                        for (int c = 0; c < 3; ++c)
                            if (t.has_label(y, x, c)) vals[k++] = lp.probs.at(n, c, y, x);
                        if (std::abs(vals[0] - vals[1]) > 1e-3) break;
                        draw_pixel(n, y, x);
                    }
                }
            }
        }
        lp.targets.push_back(std::move(t));
    }
    return lp;
}

enum class LossKind { Focal, Dice, Combined };

double loss_point(std::mt19937_64& rng, LossKind kind, double h) {
    const LossPoint lp = make_loss_point(rng);
    const Vec x0 = lp.probs.v;
    const Vec up = {urand(rng, 0.5, 1.5)};

    auto probs_of = [=](const Vec& flat) {
        Tensor4 p(lp.n, lp.c, lp.h, lp.w);
        p.v = flat;
        return p;
    };
    DiffProblem p;
    p.forward = [=](const Vec& flat) -> Vec {
        const Tensor4 probs = probs_of(flat);
        const std::span<const LabelGrid> t(lp.targets);
        switch (kind) {
            case LossKind::Focal: return {focal_loss(probs, t)};
            case LossKind::Dice: return {dice_loss(probs, t)};
            case LossKind::Combined: return {combined_loss(probs, t)};
        }
        return {};
    };
    p.vjp = [=](const Vec& flat, const Vec& upstream) {
        const Tensor4 probs = probs_of(flat);
        const std::span<const LabelGrid> t(lp.targets);
        Tensor4 g(lp.n, lp.c, lp.h, lp.w);
        switch (kind) {
            case LossKind::Focal: g = focal_backward(probs, t); break;
            case LossKind::Dice: g = dice_backward(probs, t); break;
            case LossKind::Combined: g = combined_backward(probs, t); break;
        }
        for (double& v : g.v) v *= upstream[0];
        return g.v;
    };
    return finite_diff_check(p, x0, up, h);
}

} // namespace

std::vector<GradCheckResult> run_gradient_suite(unsigned long long seed,
                                                int points_per_op, double h) {
    std::mt19937_64 rng(seed);
    std::vector<GradCheckResult> results;
    auto run = [&](const std::string& name, auto&& point_fn) {
        double worst = 0.0;
        for (int i = 0; i < points_per_op; ++i)
            worst = std::max(worst, point_fn(rng));
        results.push_back({name, worst});
    };

    run("conv2d_same", [&](std::mt19937_64& r) { return conv_point(r, Padding::Same, h); });
    run("conv2d_valid", [&](std::mt19937_64& r) { return conv_point(r, Padding::Valid, h); });
    run("safe_div", [&](std::mt19937_64& r) { return safe_div_point(r, h); });
    run("dense", [&](std::mt19937_64& r) { return dense_point(r, h); });
    run("relu", [&](std::mt19937_64& r) { return relu_point(r, h); });
    run("sigmoid", [&](std::mt19937_64& r) { return sigmoid_point(r, h); });
    run("batch_norm_train", [&](std::mt19937_64& r) { return norm_point(r, NormMode::BN, true, h); });
    run("batch_norm_eval", [&](std::mt19937_64& r) { return norm_point(r, NormMode::BN, false, h); });
    run("group_norm", [&](std::mt19937_64& r) { return norm_point(r, NormMode::GN, true, h); });
    run("agn_train", [&](std::mt19937_64& r) { return norm_point(r, NormMode::AGN, true, h); });
    run("agn_eval", [&](std::mt19937_64& r) { return norm_point(r, NormMode::AGN, false, h); });
    run("gvi", [&](std::mt19937_64& r) { return gvi_point(r, h); });
    run("focal_loss", [&](std::mt19937_64& r) { return loss_point(r, LossKind::Focal, h); });
    run("dice_loss", [&](std::mt19937_64& r) { return loss_point(r, LossKind::Dice, h); });
    run("combined_loss", [&](std::mt19937_64& r) { return loss_point(r, LossKind::Combined, h); });
    return results;
}

} // namespace vifuse
