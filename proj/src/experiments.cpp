#include "vifuse/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "vifuse/diffcore.hpp"
#include "vifuse/gvi.hpp"

namespace vifuse {

namespace {

double urand(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Value noise: a coarse uniform control grid interpolated bilinearly. Smooth
// enough for blobby superlevel sets to act as field regions.
std::vector<double> smooth_field(std::mt19937_64& rng, int size, int ctrl) {
    std::vector<double> c(static_cast<std::size_t>(ctrl) * ctrl);
    for (double& v : c) v = urand(rng, 0.0, 1.0);
    std::vector<double> f(static_cast<std::size_t>(size) * size);
    const double step = static_cast<double>(ctrl - 1) / (size - 1);
    for (int y = 0; y < size; ++y) {
        const double fy = y * step;
        const int iy = std::min(static_cast<int>(fy), ctrl - 2);
        const double ty = fy - iy;
        for (int x = 0; x < size; ++x) {
            const double fx = x * step;
            const int ix = std::min(static_cast<int>(fx), ctrl - 2);
            const double tx = fx - ix;
            const double a = c[static_cast<std::size_t>(iy) * ctrl + ix];
            const double b = c[static_cast<std::size_t>(iy) * ctrl + ix + 1];
            const double d = c[static_cast<std::size_t>(iy + 1) * ctrl + ix];
            const double e = c[static_cast<std::size_t>(iy + 1) * ctrl + ix + 1];
            f[static_cast<std::size_t>(y) * size + x] =
                (1.0 - ty) * ((1.0 - tx) * a + tx * b) +
                ty * ((1.0 - tx) * d + tx * e);
        }
    }
    return f;
}

void check_spec(const SynthSpec& spec) {
    if (spec.count <= 0 || spec.size < 8)
        throw DataError("synth_dataset: need a positive count and size >= 8");
    if (!(spec.illum_min > 0.0) || spec.illum_min > spec.illum_max ||
        spec.illum_max > 1.0)
        throw DataError("synth_dataset: illumination range must satisfy 0 < min <= max <= 1");
    if (spec.noise_sigma < 0.0 || spec.invalid_frac < 0.0 ||
        spec.invalid_frac >= 0.5)
        throw DataError("synth_dataset: bad noise parameters");
}

} // namespace

SynthDataset synth_dataset(const SynthSpec& spec) {
    check_spec(spec);
    SynthDataset out;
    out.num_classes = spec.rule == LabelRule::Vegetation ? 3 : 2;
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> unit_noise(0.0, 1.0);
    const int s = spec.size;

    for (int i = 0; i < spec.count; ++i) {
        const std::vector<double> veg = smooth_field(rng, s, 5);
        const std::vector<double> moist = smooth_field(rng, s, 5);
        const std::vector<double> soil = smooth_field(rng, s, 5);
        // Illumination has two parts: a per-capture exposure (sun elevation,
        // sensor gain) drawn from [illum_min, illum_max], and a patchy
        // within-capture field (vignetting, broken cloud) that dims down to
        // 60% of the exposure. Whole captures therefore differ in brightness,
        // and brightness also varies inside one at the scale of the surface
        // fields, so raw intensity alone cannot separate the classes.
        const double exposure =
            urand(rng, spec.illum_min, spec.illum_max);
        std::vector<double> illum = smooth_field(rng, s, 4);
        for (double& a : illum) a = exposure * (0.6 + 0.4 * a);

        NrgbImage img(s, s);
        LabelGrid lab(s, s, out.num_classes);
        for (int y = 0; y < s; ++y) {
            for (int x = 0; x < s; ++x) {
                const std::size_t px = static_cast<std::size_t>(y) * s + x;
                const double v = veg[px], m = moist[px], so = soil[px];
                const double wet = std::clamp((m - 0.55) / 0.25, 0.0, 1.0);

                // Clean reflectances: vegetation raises NIR/G and lowers R;
                // standing water absorbs NIR and brightens B.
                const double nir = (0.10 + 0.70 * v) * (1.0 - 0.6 * wet);
                const double red = (0.32 - 0.22 * v + 0.08 * so) * (1.0 - 0.25 * wet);
                const double grn = 0.18 + 0.20 * v + 0.06 * so;
                const double blu = 0.12 + 0.05 * so + 0.10 * wet;

                if (spec.rule == LabelRule::Vegetation) {
                    const double ndvi_clean = (nir - red) / (nir + red);
                    const bool weed = ndvi_clean > 0.5;
                    const bool water = m > 0.7;
                    if (weed) lab.add_label(y, x, 1);
                    if (water) lab.add_label(y, x, 2);
                    if (!weed && !water) lab.add_label(y, x, 0);
                }

                auto observe = [&](double clean) {
                    return std::clamp(
                        illum[px] * clean + spec.noise_sigma * unit_noise(rng),
                        0.0, 1.0);
                };
                const double n_o = observe(nir);
                const double r_o = observe(red);
                const double g_o = observe(grn);
                const double b_o = observe(blu);
                img.at(Plane::NIR, y, x) = n_o;
                img.at(Plane::R, y, x) = r_o;
                img.at(Plane::G, y, x) = g_o;
                img.at(Plane::B, y, x) = b_o;

                if (spec.rule == LabelRule::NirThreshold)
                    lab.add_label(y, x, n_o > 0.35 ? 1 : 0);

                const bool invalid = urand(rng, 0.0, 1.0) < spec.invalid_frac;
                img.valid[px] = invalid ? 0 : 1;
                lab.valid[px] = img.valid[px];
            }
        }
        out.images.push_back(std::move(img));
        out.labels.push_back(std::move(lab));
    }
    return out;
}

std::vector<std::string> synth_class_names(LabelRule rule) {
    if (rule == LabelRule::Vegetation) return {"background", "weed", "waterway"};
    return {"background", "bright"};
}

PixelDataset make_pixel_dataset(ViKind kind, const ViParams& params,
                                const SynthSpec& spec, int train_pixels,
                                int test_pixels) {
    if (train_pixels <= 0 || test_pixels <= 0)
        throw DataError("make_pixel_dataset: pixel counts must be positive");
    const SynthDataset data = synth_dataset(spec);

    ViParams p = params;
    if (kind == ViKind::VCI && (!p.ndvi_min || !p.ndvi_max)) {
        const auto [lo, hi] = vci_stats(data.images, p);
        p.ndvi_min = lo;
        p.ndvi_max = hi;
    }
    p.validate(kind);

    std::mt19937_64 rng(spec.seed ^ 0x9e3779b97f4a7c15ull);
    std::uniform_int_distribution<int> pick_img(
        0, static_cast<int>(data.images.size()) - 1);
    auto draw_from = [&](const NrgbImage& img, std::vector<std::array<double, 4>>& xs,
                         std::vector<double>& ts) {
        for (;;) {
            const int y = std::uniform_int_distribution<int>(0, img.height - 1)(rng);
            const int x = std::uniform_int_distribution<int>(0, img.width - 1)(rng);
            if (!img.is_valid(y, x)) continue;
            const std::array<double, 4> px = {
                img.at(Plane::NIR, y, x), img.at(Plane::R, y, x),
                img.at(Plane::G, y, x), img.at(Plane::B, y, x)};
            xs.push_back(px);
            ts.push_back(vi_pixel(kind, px[0], px[1], px[2], px[3], p));
            return;
        }
    };
    PixelDataset out;
    // Training pixels arrive tile-wise: each run of kPixelTile consecutive
    // pixels comes from a single image, so sequential batches share that
    // image's capture conditions. Held-out pixels are independent draws.
    while (static_cast<int>(out.x_train.size()) < train_pixels) {
        const NrgbImage& img = data.images[pick_img(rng)];
        for (int i = 0; i < kPixelTile &&
                        static_cast<int>(out.x_train.size()) < train_pixels; ++i)
            draw_from(img, out.x_train, out.t_train);
    }
    while (static_cast<int>(out.x_test.size()) < test_pixels)
        draw_from(data.images[pick_img(rng)], out.x_test, out.t_test);
    return out;
}

namespace {

// One Adam-managed parameter vector.
struct ParamGroup {
    std::vector<double>* p = nullptr;
    std::vector<double>* g = nullptr;
    AdamState st;
    double lr_mult = 1.0;
};

void step_groups(std::vector<ParamGroup>& groups, double lr) {
    for (ParamGroup& gr : groups) {
        gr.st.lr = lr * gr.lr_mult;
        adam_update(*gr.p, *gr.g, gr.st);
        std::fill(gr.g->begin(), gr.g->end(), 0.0);
    }
}

void xavier_fill(std::vector<double>& w, int fan_in, int fan_out,
                 std::mt19937_64& rng) {
    const double lim = std::sqrt(6.0 / (fan_in + fan_out));
    for (double& v : w) v = urand(rng, -lim, lim);
}

} // namespace

double fit_vi_experiment(const FitConfig& config, const PixelDataset& data,
                         std::vector<double>* predictions) {
    if (config.batch_size < 2 || config.hidden_width <= 0 || config.epochs <= 0)
        throw DataError("fit_vi_experiment: bad configuration");
    if (config.norm_mode != NormMode::BN && config.norm_mode != NormMode::AGN)
        throw DataError("fit_vi_experiment: norm mode must be bn or agn");
    if (data.x_train.size() != data.t_train.size() ||
        data.x_test.size() != data.t_test.size() || data.x_train.empty() ||
        data.x_test.empty())
        throw DataError("fit_vi_experiment: malformed dataset");

    const int hidden = config.hidden_width;
    std::mt19937_64 rng(config.seed);
    DenseLayer d1(hidden, 4);
    DenseLayer d2(1, hidden);
    xavier_fill(d1.w, 4, hidden, rng);
    xavier_fill(d2.w, hidden, 1, rng);
    NormState norm = make_norm_state(config.norm_mode, hidden, config.groups);
    if (config.norm_mode == NormMode::AGN) norm.rho = config.rho_init;

    std::vector<ParamGroup> groups;
    auto add_group = [&](std::vector<double>* p, std::vector<double>* g,
                         double wd, double lr_mult = 1.0) {
        ParamGroup gr;
        gr.p = p;
        gr.g = g;
        gr.st.lr = config.lr;
        gr.st.weight_decay = wd;
        gr.lr_mult = lr_mult;
        groups.push_back(std::move(gr));
    };
    add_group(&d1.w, &d1.gw, config.weight_decay);
    add_group(&d1.b, &d1.gb, 0.0);
    add_group(&d2.w, &d2.gw, config.weight_decay);
    add_group(&d2.b, &d2.gb, 0.0);
    add_group(&norm.scale, &norm.gscale, 0.0);
    add_group(&norm.shift, &norm.gshift, 0.0);
    std::vector<double> rho_p{norm.rho}, rho_g{0.0};
    if (config.norm_mode == NormMode::AGN) add_group(&rho_p, &rho_g, 0.0);

    auto forward = [&](const Tensor4& x, Tensor4* cache_a1, Tensor4* cache_n1,
                       Tensor4* cache_r1) {
        Tensor4 a1 = dense_forward(x, d1);
        Tensor4 n1 = norm_forward(a1, norm);
        Tensor4 r1 = relu_forward(n1);
        Tensor4 y = dense_forward(r1, d2);
        if (cache_a1) *cache_a1 = std::move(a1);
        if (cache_n1) *cache_n1 = std::move(n1);
        if (cache_r1) *cache_r1 = std::move(r1);
        return y;
    };

    // Batches are contiguous pixel runs so the tile grouping of the dataset
    // is preserved; only the batch visiting order is reshuffled per epoch.
    const int ntrain = static_cast<int>(data.x_train.size());
    const int bs = config.batch_size;
    std::vector<int> order(ntrain / bs);
    std::iota(order.begin(), order.end(), 0);
    if (order.empty())
        throw DataError("fit_vi_experiment: fewer training pixels than a batch");

    // One annealing cycle across the whole run: restarting mid-run would make
    // the final-epoch weights depend on where the last kick landed.
    TrainSchedule lr_schedule;
    lr_schedule.max_lr = config.lr;
    lr_schedule.min_lr = config.lr / 100.0;
    lr_schedule.cycle_epochs = config.epochs;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const double lr = cosine_lr(epoch, lr_schedule);
        std::shuffle(order.begin(), order.end(), rng);
        norm.training = true;
        for (int batch : order) {
            const int start = batch * bs;
            Tensor4 x(bs, 4, 1, 1);
            std::vector<double> t(bs);
            for (int i = 0; i < bs; ++i) {
                const auto& px = data.x_train[start + i];
                for (int c = 0; c < 4; ++c) x.at(i, c, 0, 0) = px[c];
                t[i] = data.t_train[start + i];
            }
            Tensor4 a1, n1, r1;
            const Tensor4 y = forward(x, &a1, &n1, &r1);

            double loss = 0.0;
            Tensor4 gy(bs, 1, 1, 1);
            for (int i = 0; i < bs; ++i) {
                const double d = y.at(i, 0, 0, 0) - t[i];
                loss += std::abs(d);
                gy.at(i, 0, 0, 0) = (d > 0.0 ? 1.0 : d < 0.0 ? -1.0 : 0.0) / bs;
            }
            loss /= bs;
            if (!std::isfinite(loss))
                throw NumericError("fit_vi_experiment: non-finite loss");

            const Tensor4 gr1 = dense_backward(r1, d2, gy);
            const Tensor4 gn1 = relu_backward(n1, gr1);
            const Tensor4 ga1 = norm_backward(a1, norm, gn1);
            dense_backward(x, d1, ga1);
            if (config.norm_mode == NormMode::AGN) {
                rho_g[0] = norm.grho;
                norm.grho = 0.0;
            }
            step_groups(groups, lr);
            if (config.norm_mode == NormMode::AGN) norm.rho = rho_p[0];
        }
    }

    norm.training = false;
    const int ntest = static_cast<int>(data.x_test.size());
    Tensor4 xt(ntest, 4, 1, 1);
    for (int i = 0; i < ntest; ++i)
        for (int c = 0; c < 4; ++c) xt.at(i, c, 0, 0) = data.x_test[i][c];
    const Tensor4 yt = forward(xt, nullptr, nullptr, nullptr);

    double mean_t = 0.0;
    for (double v : data.t_test) mean_t += v;
    mean_t /= ntest;
    double var_t = 0.0, l1 = 0.0;
    for (int i = 0; i < ntest; ++i) {
        var_t += (data.t_test[i] - mean_t) * (data.t_test[i] - mean_t);
        l1 += std::abs(yt.at(i, 0, 0, 0) - data.t_test[i]);
    }
    var_t /= ntest;
    l1 /= ntest;
    if (!(var_t > 0.0))
        throw DataError("fit_vi_experiment: constant target");
    if (!std::isfinite(l1))
        throw NumericError("fit_vi_experiment: non-finite predictions");
    if (predictions) {
        predictions->resize(ntest);
        for (int i = 0; i < ntest; ++i) (*predictions)[i] = yt.at(i, 0, 0, 0);
    }
    return 100.0 * l1 / std::sqrt(var_t);
}

double cosine_lr(int epoch, const TrainSchedule& schedule) {
    if (epoch < 0) throw DataError("cosine_lr: negative epoch");
    if (schedule.cycle_epochs <= 0 || !(schedule.min_lr < schedule.max_lr))
        throw DataError("cosine_lr: bad schedule");
    const int e = epoch % schedule.cycle_epochs;
    const double t = static_cast<double>(e) / schedule.cycle_epochs;
    return schedule.min_lr +
           0.5 * (schedule.max_lr - schedule.min_lr) *
               (1.0 + std::cos(t * 3.14159265358979323846));
}

bool early_stop(const std::vector<double>& loss_history, int patience) {
    if (patience < 1) throw DataError("early_stop: patience must be >= 1");
    if (loss_history.empty()) return false;
    std::size_t best = 0;
    for (std::size_t i = 1; i < loss_history.size(); ++i)
        if (loss_history[i] < loss_history[best]) best = i;
    return loss_history.size() - 1 - best >= static_cast<std::size_t>(patience);
}

std::string seg_variant_name(SegVariant v) {
    switch (v) {
        case SegVariant::Baseline: return "baseline";
        case SegVariant::VI: return "vi";
        case SegVariant::GVI: return "gvi";
        case SegVariant::AGN: return "agn";
    }
    throw DataError("unknown SegVariant");
}

SegVariant seg_variant_from_name(const std::string& name) {
    std::string s = name;
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    if (s == "baseline") return SegVariant::Baseline;
    if (s == "vi") return SegVariant::VI;
    if (s == "gvi") return SegVariant::GVI;
    if (s == "agn") return SegVariant::AGN;
    throw DataError("unknown segmentation variant: " + name);
}

int seg_input_channels(SegVariant variant, const SegNetConfig& net) {
    switch (variant) {
        case SegVariant::Baseline: return 4;
        case SegVariant::VI: return 4 + 12;
        case SegVariant::GVI:
        case SegVariant::AGN: return 4 + net.gvi_channels;
    }
    throw DataError("unknown SegVariant");
}

namespace {

// Two normalized 3x3 conv blocks and a 1x1 classification head.
struct SegNet {
    ConvFilter conv1, conv2, head;
    NormState s1, s2;
    GviLayer gvi;
    bool has_gvi = false;

    std::vector<ParamGroup> groups;
    std::vector<double> rho1_p{0.0}, rho1_g{0.0};
    std::vector<double> rho2_p{0.0}, rho2_g{0.0};
};

struct SegBatchCache {
    Tensor4 x, a1, n1, r1, a2, n2, r2, logits;
};

Tensor4 seg_forward(SegNet& net, const Tensor4& x, SegBatchCache* cache) {
    Tensor4 a1 = conv2d_forward(x, net.conv1, Padding::Same);
    Tensor4 n1 = norm_forward(a1, net.s1);
    Tensor4 r1 = relu_forward(n1);
    Tensor4 a2 = conv2d_forward(r1, net.conv2, Padding::Same);
    Tensor4 n2 = norm_forward(a2, net.s2);
    Tensor4 r2 = relu_forward(n2);
    Tensor4 logits = conv2d_forward(r2, net.head, Padding::Same);
    if (cache) {
        cache->a1 = std::move(a1);
        cache->n1 = std::move(n1);
        cache->r1 = std::move(r1);
        cache->a2 = std::move(a2);
        cache->n2 = std::move(n2);
        cache->r2 = std::move(r2);
    }
    return logits;
}

// Returns grad with respect to the net input.
Tensor4 seg_backward(SegNet& net, const SegBatchCache& cache,
                     const Tensor4& glogits) {
    const Tensor4 gr2 = conv2d_backward(cache.r2, net.head, glogits, Padding::Same);
    const Tensor4 gn2 = relu_backward(cache.n2, gr2);
    const Tensor4 ga2 = norm_backward(cache.a2, net.s2, gn2);
    const Tensor4 gr1 = conv2d_backward(cache.r1, net.conv2, ga2, Padding::Same);
    const Tensor4 gn1 = relu_backward(cache.n1, gr1);
    const Tensor4 ga1 = norm_backward(cache.a1, net.s1, gn1);
    return conv2d_backward(cache.x, net.conv1, ga1, Padding::Same);
}

// Copies the NRGB planes of one image into batch slot `slot`.
void fill_nrgb(Tensor4& batch, int slot, const NrgbImage& img) {
    for (int c = 0; c < 4; ++c) {
        const auto& plane = img.planes[c];
        std::copy(plane.begin(), plane.end(),
                  batch.v.begin() + batch.idx(slot, c, 0, 0));
    }
}

} // namespace

SegResult toy_segmentation_experiment(SegVariant variant, const SynthSpec& spec,
                                      const TrainSchedule& schedule,
                                      unsigned long long seed,
                                      const SegNetConfig& net_cfg) {
    if (schedule.max_epochs <= 0 || schedule.batch_images <= 0 ||
        schedule.patience < 1)
        throw DataError("toy_segmentation_experiment: bad schedule");
    const SynthDataset data = synth_dataset(spec);
    const int num_classes = data.num_classes;
    const int size = spec.size;

    std::mt19937_64 rng(seed);

    // 80/20 split by image, fixed by the experiment seed.
    std::vector<int> order(spec.count);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const int ntrain = std::max(1, spec.count * 4 / 5);
    std::vector<int> train_idx(order.begin(), order.begin() + ntrain);
    std::vector<int> val_idx(order.begin() + ntrain, order.end());
    if (val_idx.empty())
        throw DataError("toy_segmentation_experiment: dataset too small to split");

    const bool use_vi = variant == SegVariant::VI;
    const bool use_gvi = variant == SegVariant::GVI || variant == SegVariant::AGN;
    const int gvi_ch = net_cfg.gvi_channels;
    const int in_ch = seg_input_channels(variant, net_cfg);

    // Static per-image input tensors. The VI variant appends the 12 index
    // channels, standardized with training-split statistics (VCI extrema also
    // come from the training split).
    std::vector<Tensor4> static_inputs;
    static_inputs.reserve(spec.count);
    if (use_vi) {
        ViParams params;
        std::vector<NrgbImage> train_images;
        train_images.reserve(train_idx.size());
        for (int i : train_idx) train_images.push_back(data.images[i]);
        const auto [lo, hi] = vci_stats(train_images, params);
        params.ndvi_min = lo;
        params.ndvi_max = hi;

        std::vector<std::vector<ViRaster>> rasters(spec.count);
        for (int i = 0; i < spec.count; ++i)
            rasters[i] = compute_all(data.images[i], params);

        std::vector<double> mean(12, 0.0), var(12, 0.0);
        std::size_t counted = 0;
        for (int i : train_idx) {
            for (int k = 0; k < 12; ++k)
                for (std::size_t px = 0; px < rasters[i][k].values.size(); ++px)
                    if (rasters[i][k].valid[px]) mean[k] += rasters[i][k].values[px];
            for (std::size_t px = 0; px < rasters[i][0].valid.size(); ++px)
                counted += rasters[i][0].valid[px] != 0;
        }
        for (int k = 0; k < 12; ++k) mean[k] /= static_cast<double>(counted);
        for (int i : train_idx)
            for (int k = 0; k < 12; ++k)
                for (std::size_t px = 0; px < rasters[i][k].values.size(); ++px)
                    if (rasters[i][k].valid[px]) {
                        const double d = rasters[i][k].values[px] - mean[k];
                        var[k] += d * d;
                    }
        for (int k = 0; k < 12; ++k)
            var[k] = std::max(var[k] / static_cast<double>(counted), 1e-12);

        for (int i = 0; i < spec.count; ++i) {
            Tensor4 t(1, in_ch, size, size);
            fill_nrgb(t, 0, data.images[i]);
            for (int k = 0; k < 12; ++k) {
                const double inv = 1.0 / std::sqrt(var[k]);
                for (std::size_t px = 0; px < rasters[i][k].values.size(); ++px)
                    t.v[t.idx(0, 4 + k, 0, 0) + px] =
                        (rasters[i][k].values[px] - mean[k]) * inv;
            }
            static_inputs.push_back(std::move(t));
        }
    } else {
        for (int i = 0; i < spec.count; ++i) {
            Tensor4 t(1, 4, size, size);
            fill_nrgb(t, 0, data.images[i]);
            static_inputs.push_back(std::move(t));
        }
    }

    // Network.
    SegNet net;
    const int f = net_cfg.filters;
    if (f % net_cfg.agn_groups != 0)
        throw DataError("toy_segmentation_experiment: filters must divide into AGN groups");
    net.conv1 = ConvFilter(f, in_ch, 3);
    net.conv2 = ConvFilter(f, f, 3);
    net.head = ConvFilter(num_classes, f, 1);
    xavier_fill(net.conv1.w, in_ch * 9, f * 9, rng);
    xavier_fill(net.conv2.w, f * 9, f * 9, rng);
    xavier_fill(net.head.w, f, num_classes, rng);
    net.s1 = make_norm_state(NormMode::BN, f);
    net.s2 = make_norm_state(NormMode::BN, f);
    if (use_gvi) {
        net.gvi = gvi_init(gvi_ch, net_cfg.gvi_kernel, rng(),
                           net_cfg.gvi_ndvi_seed);
        net.has_gvi = true;
    }

    auto add_group = [&](std::vector<double>* p, std::vector<double>* g,
                         double wd, double lr_mult = 1.0) {
        ParamGroup gr;
        gr.p = p;
        gr.g = g;
        gr.st.lr = schedule.base_lr;
        gr.st.weight_decay = wd;
        gr.lr_mult = lr_mult;
        net.groups.push_back(std::move(gr));
    };
    const double wd = schedule.weight_decay;
    add_group(&net.conv1.w, &net.conv1.gw, wd);
    add_group(&net.conv1.b, &net.conv1.gb, 0.0);
    add_group(&net.conv2.w, &net.conv2.gw, wd);
    add_group(&net.conv2.b, &net.conv2.gb, 0.0);
    add_group(&net.head.w, &net.head.gw, wd);
    add_group(&net.head.b, &net.head.gb, 0.0);
    add_group(&net.s1.scale, &net.s1.gscale, 0.0);
    add_group(&net.s1.shift, &net.s1.gshift, 0.0);
    add_group(&net.s2.scale, &net.s2.gscale, 0.0);
    add_group(&net.s2.shift, &net.s2.gshift, 0.0);
    if (net.has_gvi) {
        add_group(&net.gvi.alpha.w, &net.gvi.alpha.gw, 0.0);
        add_group(&net.gvi.alpha.b, &net.gvi.alpha.gb, 0.0);
        add_group(&net.gvi.beta.w, &net.gvi.beta.gw, 0.0);
        add_group(&net.gvi.beta.b, &net.gvi.beta.gb, 0.0);
    }

    const int warm_epochs = std::max(1, schedule.max_epochs / 3);
    const int bs = schedule.batch_images;

    // Builds the [B, in_ch, H, W] input for a list of images. GVI channels are
    // recomputed per call from the current layer weights; `nrgb_out` receives
    // the raw NRGB batch needed by the GVI backward pass.
    auto assemble = [&](const std::vector<int>& ids, Tensor4* nrgb_out) {
        const int b = static_cast<int>(ids.size());
        Tensor4 x(b, in_ch, size, size);
        for (int i = 0; i < b; ++i) {
            const Tensor4& st = static_inputs[ids[i]];
            std::copy(st.v.begin(), st.v.end(), x.v.begin() + x.idx(i, 0, 0, 0));
        }
        if (net.has_gvi) {
            Tensor4 nrgb(b, 4, size, size);
            for (int i = 0; i < b; ++i) fill_nrgb(nrgb, i, data.images[ids[i]]);
            const Tensor4 gv = gvi_forward(net.gvi, nrgb);
            for (int i = 0; i < b; ++i)
                std::copy(gv.v.begin() + gv.idx(i, 0, 0, 0),
                          gv.v.begin() + gv.idx(i, 0, 0, 0) +
                              static_cast<std::size_t>(gvi_ch) * size * size,
                          x.v.begin() + x.idx(i, 4, 0, 0));
            if (nrgb_out) *nrgb_out = std::move(nrgb);
        }
        return x;
    };

    auto targets_of = [&](const std::vector<int>& ids) {
        std::vector<LabelGrid> t;
        t.reserve(ids.size());
        for (int i : ids) t.push_back(data.labels[i]);
        return t;
    };

    auto set_training = [&](bool on) {
        net.s1.training = on;
        net.s2.training = on;
    };

    // One pass over the validation split yields both the loss (for early
    // stopping) and the mIoU of the argmax predictions.
    auto eval_val = [&](IouReport* report) {
        set_training(false);
        double total = 0.0;
        int batches = 0;
        std::vector<PredGrid> preds;
        std::vector<LabelGrid> labels;
        for (std::size_t start = 0; start < val_idx.size(); start += bs) {
            const std::vector<int> chunk(
                val_idx.begin() + start,
                val_idx.begin() + std::min(val_idx.size(), start + bs));
            const Tensor4 x = assemble(chunk, nullptr);
            const Tensor4 logits = seg_forward(net, x, nullptr);
            const Tensor4 probs = softmax_channel(logits);
            const std::vector<LabelGrid> t = targets_of(chunk);
            total += combined_loss(probs, t);
            ++batches;
            for (std::size_t i = 0; i < chunk.size(); ++i) {
                PredGrid p(size, size);
                for (int y = 0; y < size; ++y) {
                    for (int px = 0; px < size; ++px) {
                        int top = 0;
                        for (int c = 1; c < num_classes; ++c)
                            if (logits.at(static_cast<int>(i), c, y, px) >
                                logits.at(static_cast<int>(i), top, y, px))
                                top = c;
                        p.cls[p.idx(y, px)] = top;
                    }
                }
                preds.push_back(std::move(p));
                labels.push_back(data.labels[chunk[i]]);
            }
        }
        *report = miou_overlapped(preds, labels, num_classes);
        return total / batches;
    };

    SegResult result;
    std::vector<double> val_history;

    // The cosine restarts make late epochs turbulent and the loss is only a
    // proxy for the quantity reported, so each run keeps the best validation
    // mIoU seen across epochs.
    double best_miou = -1.0;

    for (int epoch = 0; epoch < schedule.max_epochs; ++epoch) {
        if (variant == SegVariant::AGN && epoch == warm_epochs) {
            net.s1 = bn_to_agn_upgrade(net.s1, net_cfg.agn_groups,
                                       net_cfg.agn_rho_init);
            net.s2 = bn_to_agn_upgrade(net.s2, net_cfg.agn_groups,
                                       net_cfg.agn_rho_init);
            net.rho1_p[0] = net.s1.rho;
            net.rho2_p[0] = net.s2.rho;
            // The gate logit is a single scalar on a long journey from -10.
            // Adam already equalizes step sizes, so a mild boost is enough; a
            // large one makes the gate slam open and destabilizes training.
            add_group(&net.rho1_p, &net.rho1_g, 0.0, 3.0);
            add_group(&net.rho2_p, &net.rho2_g, 0.0, 3.0);
        }
        const double lr = cosine_lr(epoch, schedule);
        const bool agn_active =
            variant == SegVariant::AGN && epoch >= warm_epochs;

        std::shuffle(train_idx.begin(), train_idx.end(), rng);
        set_training(true);
        double train_loss = 0.0;
        int batches = 0;
        double gvi_sq = 0.0;
        for (std::size_t start = 0; start + bs <= train_idx.size();
             start += bs) {
            const std::vector<int> chunk(train_idx.begin() + start,
                                         train_idx.begin() + start + bs);
            if (agn_active) {
                net.s1.rho = net.rho1_p[0];
                net.s2.rho = net.rho2_p[0];
            }
            SegBatchCache cache;
            Tensor4 nrgb;
            cache.x = assemble(chunk, &nrgb);
            const Tensor4 logits = seg_forward(net, cache.x, &cache);
            const Tensor4 probs = softmax_channel(logits);
            const std::vector<LabelGrid> t = targets_of(chunk);
            const double loss = combined_loss(probs, t);
            if (!std::isfinite(loss))
                throw NumericError("toy_segmentation_experiment: non-finite loss");
            train_loss += loss;
            ++batches;

            const Tensor4 gprobs = combined_backward(probs, t);
            const Tensor4 glogits = softmax_backward(probs, gprobs);
            const Tensor4 gx = seg_backward(net, cache, glogits);
            if (net.has_gvi) {
                Tensor4 up(bs, gvi_ch, size, size);
                for (int i = 0; i < bs; ++i)
                    std::copy(gx.v.begin() + gx.idx(i, 4, 0, 0),
                              gx.v.begin() + gx.idx(i, 4, 0, 0) +
                                  static_cast<std::size_t>(gvi_ch) * size * size,
                              up.v.begin() + up.idx(i, 0, 0, 0));
                gvi_backward(net.gvi, nrgb, up);
                for (double v : net.gvi.alpha.gw) gvi_sq += v * v;
                for (double v : net.gvi.alpha.gb) gvi_sq += v * v;
                for (double v : net.gvi.beta.gw) gvi_sq += v * v;
                for (double v : net.gvi.beta.gb) gvi_sq += v * v;
            }
            if (agn_active) {
                net.rho1_g[0] = net.s1.grho;
                net.rho2_g[0] = net.s2.grho;
                net.s1.grho = 0.0;
                net.s2.grho = 0.0;
            }
            step_groups(net.groups, lr);
            if (agn_active) {
                net.s1.rho = net.rho1_p[0];
                net.s2.rho = net.rho2_p[0];
            }
        }

        result.epoch_train_loss.push_back(train_loss / batches);
        result.epoch_lr.push_back(lr);
        result.gvi_grad_norm = std::sqrt(gvi_sq);
        IouReport rep;
        const double vloss = eval_val(&rep);
        result.epoch_val_loss.push_back(vloss);
        val_history.push_back(vloss);
        if (std::isfinite(rep.miou) && rep.miou > best_miou) {
            best_miou = rep.miou;
            result.miou = rep.miou;
            result.class_iou = rep.iou;
        }
        result.epochs_run = epoch + 1;
        if (early_stop(val_history, schedule.patience)) break;
    }

    if (variant == SegVariant::AGN)
        result.final_rho = 0.5 * (net.s1.rho + net.s2.rho);
    return result;
}

} // namespace vifuse
