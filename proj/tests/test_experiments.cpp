#include <cmath>
#include <random>

#include "doctest.h"
#include "vifuse/experiments.hpp"

using namespace vifuse;

namespace {

SynthSpec small_spec(unsigned long long seed = 5) {
    SynthSpec s;
    s.count = 24;
    s.size = 24;
    s.seed = seed;
    return s;
}

PixelDataset linear_dataset(unsigned long long seed, int ntrain, int ntest) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto target = [](const std::array<double, 4>& px) {
        return 1.5 * px[0] - 0.8 * px[1] + 0.3 * px[2] - px[3];
    };
    PixelDataset d;
    for (int i = 0; i < ntrain + ntest; ++i) {
        const std::array<double, 4> px = {u(rng), u(rng), u(rng), u(rng)};
        if (i < ntrain) {
            d.x_train.push_back(px);
            d.t_train.push_back(target(px));
        } else {
            d.x_test.push_back(px);
            d.t_test.push_back(target(px));
        }
    }
    return d;
}

} // namespace

TEST_SUITE("experiments") {

TEST_CASE("synthetic datasets are deterministic and well-formed") {
    const SynthSpec spec = small_spec();
    const SynthDataset a = synth_dataset(spec);
    const SynthDataset b = synth_dataset(spec);

    REQUIRE(a.images.size() == 24);
    REQUIRE(a.labels.size() == 24);
    CHECK(a.num_classes == 3);
    for (std::size_t i = 0; i < a.images.size(); ++i) {
        validate(a.images[i]);
        validate(a.labels[i]);
        CHECK(a.images[i].planes == b.images[i].planes);
        CHECK(a.images[i].valid == b.images[i].valid);
        CHECK(a.labels[i].labels == b.labels[i].labels);
    }
}

TEST_CASE("every class appears and some labels overlap") {
    const SynthDataset d = synth_dataset(small_spec(9));
    std::vector<long long> counts(3, 0);
    long long overlapped = 0, invalid = 0, total = 0;
    for (const LabelGrid& g : d.labels) {
        for (int y = 0; y < g.height; ++y)
            for (int x = 0; x < g.width; ++x) {
                ++total;
                if (!g.is_valid(y, x)) {
                    ++invalid;
                    continue;
                }
                for (int c = 0; c < 3; ++c)
                    if (g.has_label(y, x, c)) ++counts[c];
                if (g.label_count(y, x) > 1) ++overlapped;
            }
    }
    for (int c = 0; c < 3; ++c) CHECK(counts[c] > 0);
    CHECK(overlapped > 0);
    // Roughly 3% of pixels are masked out.
    CHECK(invalid > total / 100);
    CHECK(invalid < total / 10);
}

TEST_CASE("the weed class tracks the NDVI signal") {
    const SynthDataset d = synth_dataset(small_spec(13));
    ViParams p;
    double sw = 0.0, sn = 0.0, sww = 0.0, snn = 0.0, swn = 0.0;
    long long n = 0;
    for (std::size_t i = 0; i < d.images.size(); ++i) {
        const ViRaster ndvi = compute_vi(ViKind::NDVI, d.images[i], p);
        const LabelGrid& g = d.labels[i];
        for (int y = 0; y < g.height; ++y)
            for (int x = 0; x < g.width; ++x) {
                if (!g.is_valid(y, x)) continue;
                const double w = g.has_label(y, x, 1) ? 1.0 : 0.0;
                const double v = ndvi.at(y, x);
                sw += w;
                sn += v;
                sww += w * w;
                snn += v * v;
                swn += w * v;
                ++n;
            }
    }
    const double cw = sww / n - (sw / n) * (sw / n);
    const double cn = snn / n - (sn / n) * (sn / n);
    const double cov = swn / n - (sw / n) * (sn / n);
    const double pearson = cov / std::sqrt(cw * cn);
    CHECK(pearson > 0.4);
}

TEST_CASE("threshold-rule labels follow the observed NIR channel") {
    SynthSpec spec = small_spec(21);
    spec.rule = LabelRule::NirThreshold;
    const SynthDataset d = synth_dataset(spec);
    CHECK(d.num_classes == 2);
    for (std::size_t i = 0; i < d.images.size(); ++i)
        for (int y = 0; y < spec.size; ++y)
            for (int x = 0; x < spec.size; ++x) {
                const bool bright = d.images[i].at(Plane::NIR, y, x) > 0.35;
                CHECK(d.labels[i].has_label(y, x, bright ? 1 : 0));
                CHECK(d.labels[i].label_count(y, x) == 1);
            }
}

TEST_CASE("bad synthesis parameters are rejected") {
    SynthSpec s = small_spec();
    s.count = 0;
    CHECK_THROWS_AS(synth_dataset(s), DataError);
    s = small_spec();
    s.size = 4;
    CHECK_THROWS_AS(synth_dataset(s), DataError);
    s = small_spec();
    s.illum_min = 0.0;
    CHECK_THROWS_AS(synth_dataset(s), DataError);
    s = small_spec();
    s.illum_min = 0.9;
    s.illum_max = 0.7;
    CHECK_THROWS_AS(synth_dataset(s), DataError);
    s = small_spec();
    s.invalid_frac = 0.6;
    CHECK_THROWS_AS(synth_dataset(s), DataError);
}

TEST_CASE("pixel datasets are deterministic and target the requested index") {
    const SynthSpec spec = small_spec(31);
    ViParams p;
    const PixelDataset a = make_pixel_dataset(ViKind::NDVI, p, spec, 256, 128);
    const PixelDataset b = make_pixel_dataset(ViKind::NDVI, p, spec, 256, 128);
    REQUIRE(a.x_train.size() == 256);
    REQUIRE(a.t_test.size() == 128);
    CHECK(a.x_train == b.x_train);
    CHECK(a.t_test == b.t_test);
    for (std::size_t i = 0; i < a.x_train.size(); ++i) {
        const auto& px = a.x_train[i];
        CHECK(a.t_train[i] ==
              vi_pixel(ViKind::NDVI, px[0], px[1], px[2], px[3], p));
    }
}

TEST_CASE("the VCI pixel dataset derives its own extrema") {
    const PixelDataset d =
        make_pixel_dataset(ViKind::VCI, ViParams{}, small_spec(37), 64, 32);
    for (double t : d.t_train) CHECK(std::isfinite(t));
}

TEST_CASE("a linear target is fit to within a few percent") {
    const PixelDataset data = linear_dataset(71, 2048, 512);
    FitConfig cfg;
    cfg.batch_size = 64;
    cfg.hidden_width = 32;
    cfg.epochs = 60;
    cfg.lr = 0.02;
    cfg.seed = 1;
    cfg.norm_mode = NormMode::BN;
    const double err = fit_vi_experiment(cfg, data);
    CHECK(err < 5.0);
}

TEST_CASE("fitting is deterministic") {
    const PixelDataset data = linear_dataset(72, 256, 128);
    FitConfig cfg;
    cfg.epochs = 6;
    const double a = fit_vi_experiment(cfg, data);
    const double b = fit_vi_experiment(cfg, data);
    CHECK(a == b);
}

TEST_CASE("the reported statistic matches a recomputation from predictions") {
    const PixelDataset data = linear_dataset(73, 256, 128);
    FitConfig cfg;
    cfg.epochs = 6;
    std::vector<double> preds;
    const double err = fit_vi_experiment(cfg, data, &preds);
    REQUIRE(preds.size() == data.t_test.size());

    double mean = 0.0;
    for (double t : data.t_test) mean += t;
    mean /= static_cast<double>(data.t_test.size());
    double var = 0.0, l1 = 0.0;
    for (std::size_t i = 0; i < data.t_test.size(); ++i) {
        var += (data.t_test[i] - mean) * (data.t_test[i] - mean);
        l1 += std::abs(preds[i] - data.t_test[i]);
    }
    var /= static_cast<double>(data.t_test.size());
    l1 /= static_cast<double>(data.t_test.size());
    CHECK(err == doctest::Approx(100.0 * l1 / std::sqrt(var)).epsilon(1e-12));
}

TEST_CASE("AGN fits NDVI at least as well as BN") {
    SynthSpec spec;
    spec.count = 40;
    const PixelDataset data =
        make_pixel_dataset(ViKind::NDVI, ViParams{}, spec, 2048, 1024);
    FitConfig cfg;
    cfg.norm_mode = NormMode::BN;
    const double bn = fit_vi_experiment(cfg, data);
    cfg.norm_mode = NormMode::AGN;
    const double agn = fit_vi_experiment(cfg, data);
    CHECK(agn <= bn);
}

TEST_CASE("degenerate fit inputs are rejected") {
    FitConfig cfg;
    CHECK_THROWS_AS(fit_vi_experiment(cfg, PixelDataset{}), DataError);

    PixelDataset constant = linear_dataset(74, 64, 32);
    for (double& t : constant.t_test) t = 0.5;
    CHECK_THROWS_AS(fit_vi_experiment(cfg, constant), DataError);

    cfg.norm_mode = NormMode::GN;
    CHECK_THROWS_AS(fit_vi_experiment(cfg, linear_dataset(75, 64, 32)),
                    DataError);
}

TEST_CASE("cosine schedule endpoints, midpoint, and restart") {
    TrainSchedule s; // 0.0001 to 0.01, cycle 10
    CHECK(cosine_lr(0, s) == doctest::Approx(0.01));
    CHECK(cosine_lr(5, s) == doctest::Approx(0.00505));
    CHECK(cosine_lr(10, s) == doctest::Approx(0.01));
    CHECK(cosine_lr(15, s) == doctest::Approx(0.00505));
    CHECK(cosine_lr(9, s) > s.min_lr);
    CHECK_THROWS_AS(cosine_lr(-1, s), DataError);
    TrainSchedule bad;
    bad.min_lr = bad.max_lr;
    CHECK_THROWS_AS(cosine_lr(0, bad), DataError);
}

TEST_CASE("early stopping watches a strict-improvement window") {
    CHECK_FALSE(early_stop({5, 4, 3, 2, 1}, 3));
    CHECK(early_stop({1, 2, 3, 4}, 3));
    CHECK_FALSE(early_stop({3, 2, 1, 1, 1}, 3)); // ties are not improvements
    CHECK(early_stop({3, 2, 1, 1, 1, 1}, 3));
    CHECK_FALSE(early_stop({}, 3));
    CHECK_FALSE(early_stop({7}, 1));
}

TEST_CASE("variant names round-trip") {
    for (SegVariant v : {SegVariant::Baseline, SegVariant::VI, SegVariant::GVI,
                         SegVariant::AGN})
        CHECK(seg_variant_from_name(seg_variant_name(v)) == v);
    CHECK(seg_variant_from_name("GVI") == SegVariant::GVI);
    CHECK_THROWS_AS(seg_variant_from_name("deeplab"), DataError);
}

TEST_CASE("variant input widths") {
    CHECK(seg_input_channels(SegVariant::Baseline) == 4);
    CHECK(seg_input_channels(SegVariant::VI) == 16);
    CHECK(seg_input_channels(SegVariant::GVI) == 16);
    CHECK(seg_input_channels(SegVariant::AGN) == 16);
    SegNetConfig cfg;
    cfg.gvi_channels = 6;
    CHECK(seg_input_channels(SegVariant::GVI, cfg) == 10);
}

TEST_CASE("the baseline solves a trivially separable task") {
    SynthSpec spec;
    spec.count = 60;
    spec.size = 32;
    spec.seed = 11;
    spec.rule = LabelRule::NirThreshold;
    spec.illum_min = 0.8;
    TrainSchedule sched;
    sched.max_epochs = 10;
    const SegResult r =
        toy_segmentation_experiment(SegVariant::Baseline, spec, sched, 1);
    CHECK(r.miou > 0.9);
    CHECK(r.epochs_run >= 1);
    CHECK(r.epochs_run <= 10);
    REQUIRE(r.class_iou.size() == 2);
    CHECK(r.epoch_train_loss.size() == static_cast<std::size_t>(r.epochs_run));
    CHECK(r.epoch_val_loss.size() == static_cast<std::size_t>(r.epochs_run));
}

TEST_CASE("segmentation runs are deterministic") {
    SynthSpec spec;
    spec.count = 12;
    spec.size = 16;
    spec.seed = 17;
    TrainSchedule sched;
    sched.max_epochs = 2;
    const SegResult a =
        toy_segmentation_experiment(SegVariant::VI, spec, sched, 4);
    const SegResult b =
        toy_segmentation_experiment(SegVariant::VI, spec, sched, 4);
    CHECK(a.miou == b.miou);
    CHECK(a.epoch_train_loss == b.epoch_train_loss);
    CHECK(a.epoch_val_loss == b.epoch_val_loss);
}

TEST_CASE("the fusion layer receives gradient signal") {
    SynthSpec spec;
    spec.count = 12;
    spec.size = 16;
    spec.seed = 19;
    TrainSchedule sched;
    sched.max_epochs = 2;
    const SegResult r =
        toy_segmentation_experiment(SegVariant::GVI, spec, sched, 5);
    CHECK(r.gvi_grad_norm > 0.0);
}

TEST_CASE("the AGN variant upgrades mid-run and the gate moves") {
    SynthSpec spec;
    spec.count = 12;
    spec.size = 16;
    spec.seed = 23;
    TrainSchedule sched;
    sched.max_epochs = 4; // upgrade lands after epoch 1
    const SegResult r =
        toy_segmentation_experiment(SegVariant::AGN, spec, sched, 6);
    CHECK(std::isfinite(r.final_rho));
    CHECK(r.final_rho != -2.0); // the gate moved off its warm-start value
}

TEST_CASE("schedules and datasets too small to split are rejected") {
    SynthSpec spec;
    spec.count = 1;
    spec.size = 16;
    TrainSchedule sched;
    CHECK_THROWS_AS(
        toy_segmentation_experiment(SegVariant::Baseline, spec, sched, 1),
        DataError);
    SynthSpec ok = small_spec();
    TrainSchedule bad;
    bad.max_epochs = 0;
    CHECK_THROWS_AS(
        toy_segmentation_experiment(SegVariant::Baseline, ok, bad, 1),
        DataError);
}

} // TEST_SUITE
