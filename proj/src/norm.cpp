#include "vifuse/norm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "vifuse/csvio.hpp"
#include "vifuse/diffcore.hpp"

namespace vifuse {

std::string norm_mode_name(NormMode mode) {
    switch (mode) {
        case NormMode::BN: return "bn";
        case NormMode::GN: return "gn";
        case NormMode::IN: return "in";
        case NormMode::LN: return "ln";
        case NormMode::AGN: return "agn";
    }
    throw DataError("unknown NormMode");
}

NormMode norm_mode_from_name(const std::string& name) {
    std::string s = name;
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    if (s == "bn") return NormMode::BN;
    if (s == "gn") return NormMode::GN;
    if (s == "in") return NormMode::IN;
    if (s == "ln") return NormMode::LN;
    if (s == "agn") return NormMode::AGN;
    throw DataError("unknown normalization mode: " + name);
}

NormState make_norm_state(NormMode mode, int channels, int groups) {
    if (channels <= 0) throw DataError("make_norm_state: channels must be positive");
    NormState s;
    s.mode = mode;
    s.channels = channels;
    s.groups = mode == NormMode::IN ? channels
             : mode == NormMode::LN ? 1
                                    : groups;
    if (s.groups < 1 || s.groups > channels || channels % s.groups != 0)
        throw DataError("make_norm_state: group count must divide channels");
    s.running_mean.assign(channels, 0.0);
    s.running_var.assign(channels, 1.0);
    s.scale.assign(channels, 1.0);
    s.shift.assign(channels, 0.0);
    s.gscale.assign(channels, 0.0);
    s.gshift.assign(channels, 0.0);
    return s;
}

namespace {

void check_input(const Tensor4& x, const NormState& s) {
    if (x.c != s.channels)
        throw DataError("norm: input channel count does not match state");
}

int effective_groups(const Tensor4& x, const NormState& s) {
    const int g = s.mode == NormMode::IN ? x.c
                : s.mode == NormMode::LN ? 1
                                         : s.groups;
    if (g < 1 || g > x.c || x.c % g != 0)
        throw DataError("norm: group count must divide channels");
    return g;
}

struct ChannelStats {
    std::vector<double> mean, var; // biased variance over (N,H,W)
};

ChannelStats bn_batch_stats(const Tensor4& x) {
    ChannelStats st;
    st.mean.assign(x.c, 0.0);
    st.var.assign(x.c, 0.0);
    const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
    const double m = static_cast<double>(x.n) * plane;
    for (int c = 0; c < x.c; ++c) {
        double sum = 0.0;
        for (int n = 0; n < x.n; ++n) {
            const double* p = &x.v[x.idx(n, c, 0, 0)];
            for (std::size_t i = 0; i < plane; ++i) sum += p[i];
        }
        st.mean[c] = sum / m;
        double sq = 0.0;
        for (int n = 0; n < x.n; ++n) {
            const double* p = &x.v[x.idx(n, c, 0, 0)];
            for (std::size_t i = 0; i < plane; ++i) {
                const double d = p[i] - st.mean[c];
                sq += d * d;
            }
        }
        st.var[c] = sq / m;
    }
    return st;
}

// Normalize with per-channel statistics, no affine.
Tensor4 bn_normalize(const Tensor4& x, const std::vector<double>& mean,
                     const std::vector<double>& var, double eps) {
    Tensor4 out(x.n, x.c, x.h, x.w);
    const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
    for (int c = 0; c < x.c; ++c) {
        const double inv = 1.0 / std::sqrt(var[c] + eps);
        const double mu = mean[c];
        for (int n = 0; n < x.n; ++n) {
            const double* p = &x.v[x.idx(n, c, 0, 0)];
            double* o = &out.v[out.idx(n, c, 0, 0)];
            for (std::size_t i = 0; i < plane; ++i) o[i] = (p[i] - mu) * inv;
        }
    }
    return out;
}

struct GroupStats {
    int groups = 1;
    std::vector<double> mean, var; // [n * groups + g]
};

GroupStats gn_stats(const Tensor4& x, int groups) {
    GroupStats st;
    st.groups = groups;
    st.mean.assign(static_cast<std::size_t>(x.n) * groups, 0.0);
    st.var.assign(st.mean.size(), 0.0);
    const int cpg = x.c / groups;
    const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
    const double m = static_cast<double>(cpg) * plane;
    for (int n = 0; n < x.n; ++n) {
        for (int g = 0; g < groups; ++g) {
            const std::size_t gi = static_cast<std::size_t>(n) * groups + g;
            double sum = 0.0;
            for (int c = g * cpg; c < (g + 1) * cpg; ++c) {
                const double* p = &x.v[x.idx(n, c, 0, 0)];
                for (std::size_t i = 0; i < plane; ++i) sum += p[i];
            }
            st.mean[gi] = sum / m;
            double sq = 0.0;
            for (int c = g * cpg; c < (g + 1) * cpg; ++c) {
                const double* p = &x.v[x.idx(n, c, 0, 0)];
                for (std::size_t i = 0; i < plane; ++i) {
                    const double d = p[i] - st.mean[gi];
                    sq += d * d;
                }
            }
            st.var[gi] = sq / m;
        }
    }
    return st;
}

Tensor4 gn_normalize(const Tensor4& x, const GroupStats& st, double eps) {
    Tensor4 out(x.n, x.c, x.h, x.w);
    const int cpg = x.c / st.groups;
    const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
    for (int n = 0; n < x.n; ++n) {
        for (int c = 0; c < x.c; ++c) {
            const std::size_t gi =
                static_cast<std::size_t>(n) * st.groups + c / cpg;
            const double mu = st.mean[gi];
            const double inv = 1.0 / std::sqrt(st.var[gi] + eps);
            const double* p = &x.v[x.idx(n, c, 0, 0)];
            double* o = &out.v[out.idx(n, c, 0, 0)];
            for (std::size_t i = 0; i < plane; ++i) o[i] = (p[i] - mu) * inv;
        }
    }
    return out;
}

void apply_affine(Tensor4& y, const NormState& s) {
    const std::size_t plane = static_cast<std::size_t>(y.h) * y.w;
    for (int n = 0; n < y.n; ++n) {
        for (int c = 0; c < y.c; ++c) {
            double* p = &y.v[y.idx(n, c, 0, 0)];
            const double sc = s.scale[c], sh = s.shift[c];
            for (std::size_t i = 0; i < plane; ++i) p[i] = sc * p[i] + sh;
        }
    }
}

void update_running(NormState& s, const ChannelStats& st) {
    for (int c = 0; c < s.channels; ++c) {
        s.running_mean[c] =
            (1.0 - s.momentum) * s.running_mean[c] + s.momentum * st.mean[c];
        s.running_var[c] =
            (1.0 - s.momentum) * s.running_var[c] + s.momentum * st.var[c];
    }
}

void check_bn_count(const Tensor4& x) {
    if (static_cast<long long>(x.n) * x.h * x.w < 2)
        throw DataError("batch_norm: need at least two values per channel in training");
}

// BN branch pre-affine output for the current mode/state, no running update.
Tensor4 bn_branch(const Tensor4& x, const NormState& s) {
    if (s.training) {
        const ChannelStats st = bn_batch_stats(x);
        return bn_normalize(x, st.mean, st.var, s.eps);
    }
    return bn_normalize(x, s.running_mean, s.running_var, s.eps);
}

} // namespace

Tensor4 batch_norm(const Tensor4& x, NormState& s) {
    check_input(x, s);
    Tensor4 out(x.n, x.c, x.h, x.w);
    if (s.training) {
        check_bn_count(x);
        const ChannelStats st = bn_batch_stats(x);
        out = bn_normalize(x, st.mean, st.var, s.eps);
        update_running(s, st);
    } else {
        out = bn_normalize(x, s.running_mean, s.running_var, s.eps);
    }
    apply_affine(out, s);
    return out;
}

Tensor4 group_norm(const Tensor4& x, NormState& s) {
    check_input(x, s);
    const int g = effective_groups(x, s);
    Tensor4 out = gn_normalize(x, gn_stats(x, g), s.eps);
    apply_affine(out, s);
    return out;
}

Tensor4 agn(const Tensor4& x, NormState& s) {
    check_input(x, s);
    const int g = effective_groups(x, s);
    const Tensor4 yg = gn_normalize(x, gn_stats(x, g), s.eps);
    Tensor4 out(x.n, x.c, x.h, x.w);
    if (s.training) {
        check_bn_count(x);
        const ChannelStats st = bn_batch_stats(x);
        out = bn_normalize(x, st.mean, st.var, s.eps);
        update_running(s, st);
    } else {
        out = bn_normalize(x, s.running_mean, s.running_var, s.eps);
    }
    const double gate = sigmoid(s.rho);
    for (std::size_t i = 0; i < out.size(); ++i) out.v[i] += gate * yg.v[i];
    apply_affine(out, s);
    return out;
}

Tensor4 norm_forward(const Tensor4& x, NormState& s) {
    switch (s.mode) {
        case NormMode::BN: return batch_norm(x, s);
        case NormMode::GN:
        case NormMode::IN:
        case NormMode::LN: return group_norm(x, s);
        case NormMode::AGN: return agn(x, s);
    }
    throw DataError("unknown NormMode");
}

namespace {

// Full-chain gradient through BN normalization in training mode; direct
// scaling in eval mode. gy is the gradient at the pre-affine output. For one
// statistics pool of m values: grad_x = inv/m * (m*gy - sum(gy) - xhat*sum(gy*xhat)).
Tensor4 bn_branch_backward(const Tensor4& x, const NormState& s,
                           const Tensor4& gy) {
    Tensor4 gx(x.n, x.c, x.h, x.w);
    const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
    if (!s.training) {
        for (int c = 0; c < x.c; ++c) {
            const double inv = 1.0 / std::sqrt(s.running_var[c] + s.eps);
            for (int n = 0; n < x.n; ++n) {
                const double* gp = &gy.v[gy.idx(n, c, 0, 0)];
                double* o = &gx.v[gx.idx(n, c, 0, 0)];
                for (std::size_t i = 0; i < plane; ++i) o[i] = gp[i] * inv;
            }
        }
        return gx;
    }
    const ChannelStats st = bn_batch_stats(x);
    const double m = static_cast<double>(x.n) * plane;
    for (int c = 0; c < x.c; ++c) {
        const double mu = st.mean[c];
        const double inv = 1.0 / std::sqrt(st.var[c] + s.eps);
        double sum_g = 0.0, sum_gx = 0.0;
        for (int n = 0; n < x.n; ++n) {
            const double* gp = &gy.v[gy.idx(n, c, 0, 0)];
            const double* xp = &x.v[x.idx(n, c, 0, 0)];
            for (std::size_t i = 0; i < plane; ++i) {
                sum_g += gp[i];
                sum_gx += gp[i] * (xp[i] - mu) * inv;
            }
        }
        for (int n = 0; n < x.n; ++n) {
            const double* gp = &gy.v[gy.idx(n, c, 0, 0)];
            const double* xp = &x.v[x.idx(n, c, 0, 0)];
            double* o = &gx.v[gx.idx(n, c, 0, 0)];
            for (std::size_t i = 0; i < plane; ++i) {
                const double xhat = (xp[i] - mu) * inv;
                o[i] = inv / m * (m * gp[i] - sum_g - xhat * sum_gx);
            }
        }
    }
    return gx;
}

Tensor4 gn_branch_backward(const Tensor4& x, int groups, double eps,
                           const Tensor4& gy) {
    Tensor4 gx(x.n, x.c, x.h, x.w);
    const GroupStats st = gn_stats(x, groups);
    const int cpg = x.c / groups;
    const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
    const double m = static_cast<double>(cpg) * plane;
    for (int n = 0; n < x.n; ++n) {
        for (int g = 0; g < groups; ++g) {
            const std::size_t gi = static_cast<std::size_t>(n) * groups + g;
            const double mu = st.mean[gi];
            const double inv = 1.0 / std::sqrt(st.var[gi] + eps);
            double sum_g = 0.0, sum_gx = 0.0;
            for (int c = g * cpg; c < (g + 1) * cpg; ++c) {
                const double* gp = &gy.v[gy.idx(n, c, 0, 0)];
                const double* xp = &x.v[x.idx(n, c, 0, 0)];
                for (std::size_t i = 0; i < plane; ++i) {
                    sum_g += gp[i];
                    sum_gx += gp[i] * (xp[i] - mu) * inv;
                }
            }
            for (int c = g * cpg; c < (g + 1) * cpg; ++c) {
                const double* gp = &gy.v[gy.idx(n, c, 0, 0)];
                const double* xp = &x.v[x.idx(n, c, 0, 0)];
                double* o = &gx.v[gx.idx(n, c, 0, 0)];
                for (std::size_t i = 0; i < plane; ++i) {
                    const double xhat = (xp[i] - mu) * inv;
                    o[i] = inv / m * (m * gp[i] - sum_g - xhat * sum_gx);
                }
            }
        }
    }
    return gx;
}

// Pre-affine output of the active mode, recomputed without state mutation.
Tensor4 preaffine_forward(const Tensor4& x, const NormState& s) {
    switch (s.mode) {
        case NormMode::BN:
            if (s.training) check_bn_count(x);
            return bn_branch(x, s);
        case NormMode::GN:
        case NormMode::IN:
        case NormMode::LN:
            return gn_normalize(x, gn_stats(x, effective_groups(x, s)), s.eps);
        case NormMode::AGN: {
            if (s.training) check_bn_count(x);
            Tensor4 y = bn_branch(x, s);
            const Tensor4 yg =
                gn_normalize(x, gn_stats(x, effective_groups(x, s)), s.eps);
            const double gate = sigmoid(s.rho);
            for (std::size_t i = 0; i < y.size(); ++i) y.v[i] += gate * yg.v[i];
            return y;
        }
    }
    throw DataError("unknown NormMode");
}

} // namespace

Tensor4 norm_backward(const Tensor4& x, NormState& s, const Tensor4& upstream) {
    check_input(x, s);
    if (!x.same_shape(upstream))
        throw DataError("norm_backward: upstream shape mismatch");

    const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;

    // Affine adjoint; gy = upstream * scale at the pre-affine output.
    Tensor4 gy(x.n, x.c, x.h, x.w);
    {
        const Tensor4 pre = preaffine_forward(x, s);
        for (int n = 0; n < x.n; ++n) {
            for (int c = 0; c < x.c; ++c) {
                const double* up = &upstream.v[upstream.idx(n, c, 0, 0)];
                const double* pp = &pre.v[pre.idx(n, c, 0, 0)];
                double* gp = &gy.v[gy.idx(n, c, 0, 0)];
                double ds = 0.0, db = 0.0;
                for (std::size_t i = 0; i < plane; ++i) {
                    ds += up[i] * pp[i];
                    db += up[i];
                    gp[i] = up[i] * s.scale[c];
                }
                s.gscale[c] += ds;
                s.gshift[c] += db;
            }
        }
    }

    switch (s.mode) {
        case NormMode::BN:
            return bn_branch_backward(x, s, gy);
        case NormMode::GN:
        case NormMode::IN:
        case NormMode::LN:
            return gn_branch_backward(x, effective_groups(x, s), s.eps, gy);
        case NormMode::AGN: {
            const int g = effective_groups(x, s);
            const double gate = sigmoid(s.rho);

            // d(out)/d(rho) = scale * sigmoid'(rho) * GN(x)
            const Tensor4 yg = gn_normalize(x, gn_stats(x, g), s.eps);
            double rho_sum = 0.0;
            for (std::size_t i = 0; i < gy.size(); ++i) rho_sum += gy.v[i] * yg.v[i];
            s.grho += rho_sum * gate * (1.0 - gate);

            Tensor4 gy_gn(x.n, x.c, x.h, x.w);
            for (std::size_t i = 0; i < gy.size(); ++i)
                gy_gn.v[i] = gy.v[i] * gate;
            Tensor4 gx = gn_branch_backward(x, g, s.eps, gy_gn);
            const Tensor4 gx_bn = bn_branch_backward(x, s, gy);
            for (std::size_t i = 0; i < gx.size(); ++i) gx.v[i] += gx_bn.v[i];
            return gx;
        }
    }
    throw DataError("unknown NormMode");
}

NormState bn_to_agn_upgrade(const NormState& bn_state, int groups,
                            double rho_init) {
    if (bn_state.mode != NormMode::BN)
        throw DataError("bn_to_agn_upgrade: source state is not batch norm");
    if (groups < 1 || groups > bn_state.channels ||
        bn_state.channels % groups != 0)
        throw DataError("bn_to_agn_upgrade: group count must divide channels");
    NormState s = bn_state;
    s.mode = NormMode::AGN;
    s.groups = groups;
    s.rho = rho_init;
    s.grho = 0.0;
    return s;
}

void save_norm(const NormState& s, const std::string& path) {
    std::ostringstream os;
    os << "norm " << norm_mode_name(s.mode) << ' ' << s.channels << ' '
       << s.groups << ' ' << format_double(s.momentum) << ' '
       << format_double(s.eps) << ' ' << format_double(s.rho) << ' '
       << (s.training ? 1 : 0) << '\n';
    auto line = [&os](const char* tag, const std::vector<double>& v) {
        os << tag;
        for (double x : v) os << ' ' << format_double(x);
        os << '\n';
    };
    line("running_mean", s.running_mean);
    line("running_var", s.running_var);
    line("scale", s.scale);
    line("shift", s.shift);
    atomic_write(path, os.str());
}

NormState load_norm(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open parameter file: " + path);
    std::string tag, mode;
    int channels = 0, groups = 0, training = 0;
    double momentum = 0.0, eps = 0.0, rho = 0.0;
    if (!(is >> tag >> mode >> channels >> groups >> momentum >> eps >> rho >>
          training) ||
        tag != "norm")
        throw DataError("malformed parameter file: " + path);
    NormState s = make_norm_state(norm_mode_from_name(mode), channels, groups);
    s.momentum = momentum;
    s.eps = eps;
    s.rho = rho;
    s.training = training != 0;
    auto read_line = [&is, &path](const char* want, std::vector<double>& v) {
        std::string t;
        if (!(is >> t) || t != want)
            throw DataError("malformed parameter file: " + path);
        for (double& x : v)
            if (!(is >> x))
                throw DataError("malformed parameter file: " + path);
    };
    read_line("running_mean", s.running_mean);
    read_line("running_var", s.running_var);
    read_line("scale", s.scale);
    read_line("shift", s.shift);
    return s;
}

} // namespace vifuse
