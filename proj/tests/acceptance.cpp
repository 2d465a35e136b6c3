// Acceptance gate: exercises the end-to-end guarantees and prints one
// pass/fail line per criterion. Exit status is the number of failures.
// argv[1] must be the path to the command-line binary.
#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "vifuse/experiments.hpp"
#include "vifuse/gradsuite.hpp"
#include "vifuse/gvi.hpp"
#include "vifuse/indices.hpp"
#include "vifuse/losses.hpp"
#include "vifuse/norm.hpp"
#include "vifuse/raster.hpp"

namespace fs = std::filesystem;
using namespace vifuse;

namespace {

std::string g_cli;
int g_failures = 0;

void report(int criterion, bool ok, const std::string& detail) {
    std::cout << "criterion " << criterion << ": " << (ok ? "PASS" : "FAIL");
    if (!detail.empty()) std::cout << " (" << detail << ")";
    std::cout << std::endl;
    if (!ok) ++g_failures;
}

struct Timer {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                             t0)
            .count();
    }
};

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(4);
    os << v;
    return os.str();
}

// --------------------------------------------------------------- criterion 1

void criterion_gradients() {
    Timer timer;
    const auto results = run_gradient_suite(1, 100);
    double worst = 0.0;
    std::string worst_op = "none";
    for (const auto& r : results)
        if (r.max_rel_err > worst) {
            worst = r.max_rel_err;
            worst_op = r.op;
        }
    const double secs = timer.seconds();
    report(1, !results.empty() && worst < 1e-4 && secs < 60.0,
           std::to_string(results.size()) + " ops, worst " + fmt(worst) +
               " at " + worst_op + ", " + fmt(secs) + " s");
}

// --------------------------------------------------------------- criterion 2

// Independent transliteration of the closed forms, sharing only the
// denominator policy sign(d) * max(|d|, eps) with zero counting as positive.
double ref_guard(double d, double eps) {
    const double mag = std::max(std::abs(d), eps);
    return d < 0.0 ? -mag : mag;
}

double ref_vi(ViKind kind, double n, double r, double g, double b,
              const ViParams& p) {
    const double eps = p.clip_eps;
    switch (kind) {
        case ViKind::NDVI:
            return (n - r) / ref_guard(n + r, eps);
        case ViKind::IAVI: {
            const double ra = r - p.gamma * (b - r);
            return (n - ra) / ref_guard(n + ra, eps);
        }
        case ViKind::MSAVI2:
            return 0.5 * ((2.0 * n + 1.0) -
                          std::sqrt((2.0 * n + 1.0) * (2.0 * n + 1.0) -
                                    8.0 * (n - r)));
        case ViKind::EVI:
            return 2.5 * (n - r) / ref_guard(n + 6.0 * r - 7.5 * b + 1.0, eps);
        case ViKind::VDVI:
            return 2.0 * (2.0 * g - r - b) / ref_guard(2.0 * g + r + b, eps);
        case ViKind::WDRVI:
            return (0.2 * n - r) / ref_guard(0.2 * n + r, eps);
        case ViKind::MCARI:
            return 1.5 * (2.5 * (n - r) - 1.3 * (n - g)) /
                   ref_guard(std::sqrt((2.0 * n + 1.0) * (2.0 * n + 1.0) -
                                       (6.0 * n - 5.0 * r) - 0.5),
                             eps);
        case ViKind::GDVI:
            return n - g;
        case ViKind::SAVI:
            return (1.0 + p.savi_l) * (n - r) / ref_guard(n + r + p.savi_l, eps);
        case ViKind::RVI:
            return r / ref_guard(n, eps);
        case ViKind::VCI: {
            const double ndvi = (n - r) / ref_guard(n + r, eps);
            return (ndvi - *p.ndvi_min) /
                   ref_guard(*p.ndvi_max + *p.ndvi_min, eps);
        }
        case ViKind::GRVI:
            return n / ref_guard(g, eps);
        case ViKind::NDGI:
            return (g - r) / ref_guard(g + r, eps);
    }
    return 0.0;
}

void criterion_vi_oracle() {
    ViParams p;
    p.gamma = 0.9;
    p.savi_l = 0.5;
    p.ndvi_min = -0.2;
    p.ndvi_max = 0.8;
    std::mt19937_64 rng(42);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double worst = 0.0;
    bool finite = true;
    for (int i = 0; i < 1000; ++i) {
        const double n = u(rng), r = u(rng), g = u(rng), b = u(rng);
        for (ViKind k : all_vi_kinds()) {
            const double got = vi_pixel(k, n, r, g, b, p);
            const double want = ref_vi(k, n, r, g, b, p);
            finite = finite && std::isfinite(got);
            worst = std::max(worst,
                             std::abs(got - want) / std::max(1.0, std::abs(want)));
        }
    }
    report(2, finite && worst < 1e-12,
           "1000 pixels x 13 indices, worst rel err " + fmt(worst));
}

// --------------------------------------------------------------- criterion 3

void criterion_expressivity() {
    const std::array<ViKind, 10> expressible = {
        ViKind::NDVI, ViKind::IAVI, ViKind::EVI,  ViKind::VDVI, ViKind::WDRVI,
        ViKind::GDVI, ViKind::SAVI, ViKind::RVI,  ViKind::GRVI, ViKind::NDGI};
    ViParams p;
    p.gamma = 0.9;
    p.savi_l = 0.5;

    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(0.05, 0.95);
    const int npix = 256;
    Tensor4 x(npix, 4, 1, 1);
    for (double& v : x.v) v = u(rng);

    double worst = 0.0;
    for (ViKind k : expressible) {
        const GviLayer layer = express_vi(k, p);
        const Tensor4 y = gvi_forward(layer, x);
        for (int i = 0; i < npix; ++i) {
            const double want =
                vi_pixel(k, x.at(i, 0, 0, 0), x.at(i, 1, 0, 0),
                         x.at(i, 2, 0, 0), x.at(i, 3, 0, 0), p);
            worst = std::max(worst, std::abs(y.at(i, 0, 0, 0) - want) /
                                        std::max(1.0, std::abs(want)));
        }
    }

    int rejected = 0;
    for (ViKind k : {ViKind::MSAVI2, ViKind::MCARI, ViKind::VCI}) {
        try {
            express_vi(k, p);
        } catch (const NotExpressibleError&) {
            ++rejected;
        }
    }
    report(3, worst < 1e-10 && rejected == 3,
           "10 indices, worst rel err " + fmt(worst) + ", " +
               std::to_string(rejected) + "/3 rejected");
}

// --------------------------------------------------------------- criterion 4

double max_abs_diff(const Tensor4& a, const Tensor4& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.v.size(); ++i)
        worst = std::max(worst, std::abs(a.v[i] - b.v[i]));
    return worst;
}

void criterion_norm_equivalences() {
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    const int C = 8;
    Tensor4 x(3, C, 5, 4);
    for (double& v : x.v) v = u(rng);

    NormState gn_full = make_norm_state(NormMode::GN, C, C);
    NormState in_state = make_norm_state(NormMode::IN, C);
    const double d_in = max_abs_diff(norm_forward(x, gn_full),
                                     norm_forward(x, in_state));

    NormState gn_one = make_norm_state(NormMode::GN, C, 1);
    NormState ln_state = make_norm_state(NormMode::LN, C);
    const double d_ln = max_abs_diff(norm_forward(x, gn_one),
                                     norm_forward(x, ln_state));

    NormState bn = make_norm_state(NormMode::BN, C);
    NormState ag = make_norm_state(NormMode::AGN, C, 4);
    ag.rho = -10.0;
    bn.training = ag.training = true;
    const double d_train = max_abs_diff(norm_forward(x, bn),
                                        norm_forward(x, ag));
    bn.training = ag.training = false;
    const double d_eval = max_abs_diff(norm_forward(x, bn),
                                       norm_forward(x, ag));

    // A trained BN layer upgraded in place must keep its eval behaviour.
    NormState base = make_norm_state(NormMode::BN, C);
    for (int i = 0; i < C; ++i) {
        base.scale[i] = 0.5 + 0.1 * i;
        base.shift[i] = 0.05 * i - 0.2;
    }
    base.training = true;
    for (int pass = 0; pass < 3; ++pass) {
        Tensor4 xb(2, C, 4, 4);
        for (double& v : xb.v) v = u(rng);
        norm_forward(xb, base);
    }
    base.training = false;
    NormState upgraded = bn_to_agn_upgrade(base, 4, -10.0);
    upgraded.training = false;
    const double d_up = max_abs_diff(norm_forward(x, base),
                                     norm_forward(x, upgraded));

    report(4,
           d_in < 1e-12 && d_ln < 1e-12 && d_train < 5e-4 && d_eval < 5e-4 &&
               d_up < 5e-4,
           "GN=IN " + fmt(d_in) + ", GN=LN " + fmt(d_ln) + ", AGN~BN train " +
               fmt(d_train) + " eval " + fmt(d_eval) + ", upgrade " + fmt(d_up));
}

// --------------------------------------------------------------- criterion 5

void criterion_miou() {
    // The frozen example: targets {A}, {A,B}, {B}; predictions A, B, A.
    LabelGrid g(3, 1, 2);
    g.add_label(0, 0, 0);
    g.add_label(0, 1, 0);
    g.add_label(0, 1, 1);
    g.add_label(0, 2, 1);
    PredGrid pr(3, 1);
    pr.cls = {0, 1, 0};
    const IouReport rep = miou_overlapped(std::vector<PredGrid>{pr},
                                          std::vector<LabelGrid>{g}, 2);
    const bool example_ok = rep.tp == std::vector<long long>{1, 1} &&
                            rep.fp == std::vector<long long>{1, 0} &&
                            rep.fn == std::vector<long long>{0, 1} &&
                            std::abs(rep.iou[0] - 0.5) < 1e-15 &&
                            std::abs(rep.iou[1] - 0.5) < 1e-15 &&
                            std::abs(rep.miou - 0.5) < 1e-15;

    // On single-label grids the metric must agree with a plain confusion
    // matrix computed from scratch.
    std::mt19937_64 rng(123);
    bool random_ok = true;
    for (int t = 0; t < 50 && random_ok; ++t) {
        const int w = 3 + static_cast<int>(rng() % 7);
        const int h = 3 + static_cast<int>(rng() % 7);
        const int classes = 2 + static_cast<int>(rng() % 4);
        LabelGrid grid(w, h, classes);
        PredGrid pred(w, h);
        std::vector<int> truth(static_cast<std::size_t>(w) * h);
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                const std::size_t i = grid.idx(y, xx);
                truth[i] = static_cast<int>(rng() % classes);
                grid.add_label(y, xx, truth[i]);
                pred.cls[i] = static_cast<int>(rng() % classes);
                if (rng() % 10 == 0) grid.valid[i] = 0;
            }
        const IouReport got = miou_overlapped(std::vector<PredGrid>{pred},
                                              std::vector<LabelGrid>{grid},
                                              classes);
        std::vector<long long> tp(classes, 0), fp(classes, 0), fn(classes, 0);
        for (std::size_t i = 0; i < truth.size(); ++i) {
            if (!grid.valid[i]) continue;
            if (pred.cls[i] == truth[i]) {
                ++tp[pred.cls[i]];
            } else {
                ++fp[pred.cls[i]];
                ++fn[truth[i]];
            }
        }
        double sum = 0.0;
        int denom_classes = 0;
        for (int c = 0; c < classes; ++c) {
            const long long d = tp[c] + fp[c] + fn[c];
            if (got.tp[c] != tp[c] || got.fp[c] != fp[c] || got.fn[c] != fn[c])
                random_ok = false;
            if (d == 0) {
                if (!std::isnan(got.iou[c])) random_ok = false;
                continue;
            }
            const double iou = static_cast<double>(tp[c]) / d;
            if (std::abs(got.iou[c] - iou) > 1e-12) random_ok = false;
            sum += iou;
            ++denom_classes;
        }
        if (denom_classes == 0 ||
            std::abs(got.miou - sum / denom_classes) > 1e-12)
            random_ok = false;
    }
    report(5, example_ok && random_ok,
           std::string("example ") + (example_ok ? "ok" : "wrong") +
               ", 50 grids vs confusion matrix " +
               (random_ok ? "ok" : "wrong"));
}

// --------------------------------------------------------------- criterion 6

void criterion_fit_bn_vs_agn() {
    Timer timer;
    SynthSpec spec;
    spec.count = 40;
    int wins = 0;
    for (ViKind k : network_vi_kinds()) {
        const PixelDataset data =
            make_pixel_dataset(k, ViParams{}, spec, 2048, 1024);
        double bn_sum = 0.0, agn_sum = 0.0;
        for (unsigned long long seed = 1; seed <= 3; ++seed) {
            FitConfig cfg;
            cfg.seed = seed;
            cfg.norm_mode = NormMode::BN;
            bn_sum += fit_vi_experiment(cfg, data);
            cfg.norm_mode = NormMode::AGN;
            agn_sum += fit_vi_experiment(cfg, data);
        }
        if (agn_sum <= bn_sum) ++wins;
    }
    const double secs = timer.seconds();
    report(6, wins >= 9 && secs < 300.0,
           "AGN at or below BN on " + std::to_string(wins) +
               "/12 indices over 3 paired seeds, " + fmt(secs) + " s");
}

// --------------------------------------------------------------- criterion 7

void criterion_segmentation_study() {
    Timer timer;
    SynthSpec spec; // 220 images, 64 x 64
    TrainSchedule schedule;
    const std::array<SegVariant, 3> variants = {
        SegVariant::Baseline, SegVariant::GVI, SegVariant::AGN};
    std::array<double, 3> mean = {0.0, 0.0, 0.0};
    for (std::size_t v = 0; v < variants.size(); ++v) {
        for (unsigned long long seed = 1; seed <= 3; ++seed)
            mean[v] +=
                toy_segmentation_experiment(variants[v], spec, schedule, seed)
                    .miou;
        mean[v] /= 3.0;
    }
    const double secs = timer.seconds();
    report(7, mean[1] > mean[0] && mean[2] >= mean[1] && secs < 1800.0,
           "mean mIoU over 3 seeds: baseline " + fmt(mean[0]) + ", learnable-index " +
               fmt(mean[1]) + ", +AGN " + fmt(mean[2]) + ", " + fmt(secs) + " s");
}

// --------------------------------------------------------------- criterion 8

void criterion_correlations() {
    SynthSpec spec;
    spec.count = 12;
    spec.size = 32;
    spec.seed = 7;
    const SynthDataset data = synth_dataset(spec);
    ViParams p;
    const auto [lo, hi] = vci_stats(data.images, p);
    p.ndvi_min = lo;
    p.ndvi_max = hi;

    std::vector<ViRaster> pooled(network_vi_kinds().size());
    for (std::size_t k = 0; k < pooled.size(); ++k) {
        pooled[k].kind = network_vi_kinds()[k];
        pooled[k].height = 1;
    }
    for (const NrgbImage& img : data.images) {
        const std::vector<ViRaster> rs = compute_all(img, p);
        for (std::size_t k = 0; k < pooled.size(); ++k) {
            pooled[k].values.insert(pooled[k].values.end(),
                                    rs[k].values.begin(), rs[k].values.end());
            pooled[k].valid.insert(pooled[k].valid.end(), rs[k].valid.begin(),
                                   rs[k].valid.end());
        }
    }
    for (auto& r : pooled) r.width = static_cast<int>(r.values.size());

    const auto corr = correlation_matrix(pooled);
    bool shape_ok = corr.size() == 12;
    bool sym_ok = true, diag_ok = true, range_ok = true;
    for (std::size_t i = 0; i < corr.size(); ++i) {
        shape_ok = shape_ok && corr[i].size() == 12;
        diag_ok = diag_ok && corr[i][i] == 1.0;
        for (std::size_t j = 0; j < corr[i].size(); ++j) {
            sym_ok = sym_ok && corr[i][j] == corr[j][i];
            range_ok = range_ok && std::isfinite(corr[i][j]) &&
                       std::abs(corr[i][j]) <= 1.0;
        }
    }

    std::size_t savi = 0;
    for (std::size_t k = 0; k < network_vi_kinds().size(); ++k)
        if (network_vi_kinds()[k] == ViKind::SAVI) savi = k;
    const double ndvi_savi = corr[0][savi];
    report(8,
           shape_ok && sym_ok && diag_ok && range_ok && ndvi_savi > 0.9,
           "12x12, corr(NDVI,SAVI) = " + fmt(ndvi_savi));
}

// --------------------------------------------------------------- criterion 9

std::string slurp(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

bool shell(const std::string& args) {
    const std::string cmd = g_cli + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) && WEXITSTATUS(rc) == 0;
}

void criterion_cli_determinism() {
    const fs::path dir =
        fs::temp_directory_path() /
        ("vifuse_accept_" + std::to_string(getpid()));
    fs::create_directories(dir);

    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> u(0, 255);
    for (const char* base : {"a", "b"}) {
        cv::Mat rgb(24, 24, CV_8UC3), nir(24, 24, CV_8UC1);
        for (int y = 0; y < 24; ++y)
            for (int x = 0; x < 24; ++x) {
                rgb.at<cv::Vec3b>(y, x) =
                    cv::Vec3b(static_cast<unsigned char>(u(rng)),
                              static_cast<unsigned char>(u(rng)),
                              static_cast<unsigned char>(u(rng)));
                nir.at<unsigned char>(y, x) =
                    static_cast<unsigned char>(u(rng));
            }
        cv::imwrite((dir / (std::string(base) + "_rgb.png")).string(), rgb);
        cv::imwrite((dir / (std::string(base) + "_nir.png")).string(), nir);
    }
    const std::string rgb = (dir / "a_rgb.png").string();
    const std::string nir = (dir / "a_nir.png").string();

    bool ok = true;
    std::string what;

    const std::string compute = "vi compute --rgb " + rgb + " --nir " + nir +
                                " --kind all --vci-stats-from-input --out ";
    ok = shell(compute + (dir / "c1").string()) &&
         shell(compute + (dir / "c2").string());
    if (ok) {
        int compared = 0;
        for (const auto& e : fs::directory_iterator(dir / "c1")) {
            const fs::path twin = dir / "c2" / e.path().filename();
            if (slurp(e.path()) != slurp(twin)) ok = false;
            ++compared;
        }
        ok = ok && compared == 12;
        if (!ok) what = "index rasters differ between reruns";
    } else {
        what = "vi compute failed";
    }

    if (ok) {
        const std::string corr = "vi corr --dir " + dir.string() + " --out ";
        ok = shell(corr + (dir / "m1.csv").string()) &&
             shell(corr + (dir / "m2.csv").string()) &&
             slurp(dir / "m1.csv") == slurp(dir / "m2.csv");
        if (!ok) what = "correlation matrices differ between reruns";
    }

    if (ok) {
        const std::string png = "vi compute --rgb " + rgb + " --nir " + nir +
                                " --kind NDVI --format png16 --out ";
        ok = shell(png + (dir / "p1.png").string()) &&
             shell(png + (dir / "p2.png").string()) &&
             slurp(dir / "p1.png") == slurp(dir / "p2.png") &&
             slurp(dir / "p1.png.range.txt") == slurp(dir / "p2.png.range.txt");
        if (!ok) what = "16-bit exports differ between reruns";
    }

    std::error_code ec;
    fs::remove_all(dir, ec);
    report(9, ok, ok ? "3 commands rerun byte-identical" : what);
}

} // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::cerr << "usage: acceptance <path-to-vifuse>\n";
        return 2;
    }
    g_cli = argv[1];

    const std::vector<std::pair<int, void (*)()>> criteria = {
        {1, criterion_gradients},     {2, criterion_vi_oracle},
        {3, criterion_expressivity},  {4, criterion_norm_equivalences},
        {5, criterion_miou},          {6, criterion_fit_bn_vs_agn},
        {7, criterion_segmentation_study}, {8, criterion_correlations},
        {9, criterion_cli_determinism}};
    for (const auto& [n, fn] : criteria) {
        try {
            fn();
        } catch (const std::exception& e) {
            report(n, false, std::string("exception: ") + e.what());
        }
    }
    return g_failures;
}
