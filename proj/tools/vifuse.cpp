// Command-line front end: vegetation-index rasters and correlation matrices,
// gradient checks, the index-fitting and toy segmentation experiments, and
// parameter-file round trips. All file outputs are written atomically and are
// byte-identical across runs with the same flags and seeds.
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "CLI11.hpp"
#include "vifuse/csvio.hpp"
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

int thread_count() {
    if (const char* env = std::getenv("VIFUSE_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    const unsigned hc = std::thread::hardware_concurrency();
    return hc ? static_cast<int>(hc) : 1;
}

// Runs fn(0..count-1) on up to VIFUSE_THREADS workers. Tasks must be
// independent; the first captured exception is rethrown after the join.
template <class F>
void parallel_tasks(int count, F&& fn) {
    const int workers = std::min(thread_count(), count);
    if (workers <= 1) {
        for (int i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int k = 0; k < workers; ++k) {
        pool.emplace_back([&, k] {
            try {
                for (int i; (i = next.fetch_add(1)) < count;) fn(i);
            } catch (...) {
                errors[k] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

struct ViParamFlags {
    double gamma = 0.9;
    double savi_l = 0.5;
    double clip_eps = 1e-6;
    std::optional<double> ndvi_min, ndvi_max;
    bool vci_from_input = false;

    ViParams to_params() const {
        ViParams p;
        p.gamma = gamma;
        p.savi_l = savi_l;
        p.clip_eps = clip_eps;
        p.ndvi_min = ndvi_min;
        p.ndvi_max = ndvi_max;
        return p;
    }
};

void add_vi_param_flags(CLI::App* cmd, ViParamFlags& f) {
    cmd->add_option("--gamma", f.gamma, "IAVI blue-red weighting, in (0.65, 1.12)");
    cmd->add_option("--savi-l", f.savi_l, "SAVI soil factor: 0, 0.5 or 1");
    cmd->add_option("--clip-eps", f.clip_eps, "denominator guard");
    cmd->add_option("--ndvi-min", f.ndvi_min, "dataset NDVI minimum (VCI)");
    cmd->add_option("--ndvi-max", f.ndvi_max, "dataset NDVI maximum (VCI)");
    cmd->add_flag("--vci-stats-from-input", f.vci_from_input,
                  "derive the VCI extrema from the input image(s)");
}

std::string raster_csv(const ViRaster& r) {
    std::ostringstream os;
    for (int y = 0; y < r.height; ++y) {
        for (int x = 0; x < r.width; ++x) {
            if (x) os << ',';
            os << format_double(r.at(y, x));
        }
        os << '\n';
    }
    return os.str();
}

// 16-bit grayscale export. Bounded meaningful ranges map [lo,hi] -> [0,65535];
// unbounded ranges use the observed valid-pixel extrema. The applied mapping
// goes to a sidecar text file next to the image.
void write_png16(const ViRaster& r, const std::string& path) {
    const ViRange range = meaningful_range(r.kind);
    double lo, hi;
    if (range.bounded()) {
        lo = range.lo;
        hi = range.hi;
    } else {
        lo = std::numeric_limits<double>::infinity();
        hi = -lo;
        for (std::size_t i = 0; i < r.values.size(); ++i) {
            if (!r.valid[i]) continue;
            lo = std::min(lo, r.values[i]);
            hi = std::max(hi, r.values[i]);
        }
        if (!(lo <= hi)) throw DataError("png export: no valid pixels");
    }
    cv::Mat m(r.height, r.width, CV_16UC1);
    const double span = hi > lo ? hi - lo : 1.0;
    for (int y = 0; y < r.height; ++y) {
        auto* row = m.ptr<std::uint16_t>(y);
        for (int x = 0; x < r.width; ++x) {
            const double t = std::clamp((r.at(y, x) - lo) / span, 0.0, 1.0);
            row[x] = static_cast<std::uint16_t>(std::lround(t * 65535.0));
        }
    }
    const std::string tmp = path + ".tmp.png";
    if (!cv::imwrite(tmp, m)) throw DataError("cannot write image: " + path);
    fs::rename(tmp, path);
    atomic_write(path + ".range.txt", vi_name(r.kind) + "," + format_double(lo) +
                                          "," + format_double(hi) + "\n");
}

// ---------------------------------------------------------------------------
// vi compute
// ---------------------------------------------------------------------------

struct ComputeArgs {
    std::string rgb, nir, mask, kind = "ndvi", out, format = "csv";
    ViParamFlags params;
};

int run_vi_compute(const ComputeArgs& a) {
    NrgbImage img = load_image(a.rgb, a.nir, a.mask);
    ViParams p = a.params.to_params();

    std::vector<ViKind> kinds;
    if (a.kind == "all") {
        kinds.assign(network_vi_kinds().begin(), network_vi_kinds().end());
    } else {
        kinds.push_back(vi_from_name(a.kind));
    }
    const bool wants_vci =
        std::find(kinds.begin(), kinds.end(), ViKind::VCI) != kinds.end();
    if (wants_vci && (!p.ndvi_min || !p.ndvi_max)) {
        if (!a.params.vci_from_input)
            throw DataError("VCI needs --ndvi-min/--ndvi-max or --vci-stats-from-input");
        const auto [lo, hi] = vci_stats({img}, p);
        p.ndvi_min = lo;
        p.ndvi_max = hi;
    }

    if (kinds.size() > 1) fs::create_directories(a.out);
    for (ViKind k : kinds) {
        const ViRaster r = compute_vi(k, img, p);
        std::string path = a.out;
        if (kinds.size() > 1) {
            std::string name = vi_name(k);
            std::transform(name.begin(), name.end(), name.begin(),
                           [](unsigned char c) { return std::tolower(c); });
            path = (fs::path(a.out) / (name + (a.format == "csv" ? ".csv" : ".png")))
                       .string();
        }
        if (a.format == "csv") {
            atomic_write(path, raster_csv(r));
        } else if (a.format == "png16") {
            write_png16(r, path);
        } else {
            throw DataError("unknown output format: " + a.format);
        }
    }
    return 0;
}

// ---------------------------------------------------------------------------
// vi corr
// ---------------------------------------------------------------------------

struct CorrArgs {
    std::vector<std::string> images; // rgb:nir[:mask]
    std::string dir, out;
    ViParamFlags params;
};

std::vector<NrgbImage> load_corr_images(const CorrArgs& a) {
    std::vector<NrgbImage> out;
    for (const std::string& spec : a.images) {
        std::vector<std::string> parts;
        std::stringstream ss(spec);
        std::string part;
        while (std::getline(ss, part, ':')) parts.push_back(part);
        if (parts.size() < 2 || parts.size() > 3)
            throw DataError("--image expects rgb:nir[:mask], got: " + spec);
        out.push_back(load_image(parts[0], parts[1],
                                 parts.size() == 3 ? parts[2] : ""));
    }
    if (!a.dir.empty()) {
        if (!fs::is_directory(a.dir))
            throw DataError("not a directory: " + a.dir);
        std::vector<fs::path> rgbs;
        for (const auto& entry : fs::directory_iterator(a.dir)) {
            const std::string stem = entry.path().stem().string();
            if (entry.is_regular_file() && stem.ends_with("_rgb"))
                rgbs.push_back(entry.path());
        }
        std::sort(rgbs.begin(), rgbs.end());
        for (const fs::path& rgb : rgbs) {
            const std::string stem = rgb.stem().string();
            const std::string base = stem.substr(0, stem.size() - 4);
            const std::string ext = rgb.extension().string();
            const fs::path nir = rgb.parent_path() / (base + "_nir" + ext);
            const fs::path mask = rgb.parent_path() / (base + "_mask" + ext);
            if (!fs::exists(nir))
                throw DataError("missing NIR companion for " + rgb.string());
            out.push_back(load_image(rgb.string(), nir.string(),
                                     fs::exists(mask) ? mask.string() : ""));
        }
    }
    if (out.empty()) throw DataError("no input images");
    return out;
}

int run_vi_corr(const CorrArgs& a) {
    const std::vector<NrgbImage> images = load_corr_images(a);
    ViParams p = a.params.to_params();
    if (!p.ndvi_min || !p.ndvi_max) {
        const auto [lo, hi] = vci_stats(images, p);
        p.ndvi_min = lo;
        p.ndvi_max = hi;
    }

    // Stitch all images into one long pixel row per index so the correlation
    // runs over the pooled valid pixels.
    std::vector<ViRaster> pooled(network_vi_kinds().size());
    for (std::size_t k = 0; k < pooled.size(); ++k) {
        pooled[k].kind = network_vi_kinds()[k];
        pooled[k].height = 1;
    }
    for (const NrgbImage& img : images) {
        const std::vector<ViRaster> rs = compute_all(img, p);
        for (std::size_t k = 0; k < pooled.size(); ++k) {
            pooled[k].values.insert(pooled[k].values.end(), rs[k].values.begin(),
                                    rs[k].values.end());
            pooled[k].valid.insert(pooled[k].valid.end(), rs[k].valid.begin(),
                                   rs[k].valid.end());
        }
    }
    for (auto& r : pooled) r.width = static_cast<int>(r.values.size());

    const auto corr = correlation_matrix(pooled);
    std::ostringstream os;
    for (ViKind k : network_vi_kinds()) os << ',' << vi_name(k);
    os << '\n';
    for (std::size_t i = 0; i < corr.size(); ++i) {
        os << vi_name(network_vi_kinds()[i]);
        for (double v : corr[i]) os << ',' << format_double(v);
        os << '\n';
    }
    atomic_write(a.out, os.str());
    return 0;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

struct GradArgs {
    unsigned long long seed = 1;
    int points = 100;
    std::string out;
};

int run_gradcheck(const GradArgs& a) {
    const auto results = run_gradient_suite(a.seed, a.points);
    std::ostringstream os;
    os << "op,max_rel_err\n";
    bool ok = true;
    for (const auto& r : results) {
        os << r.op << ',' << format_double(r.max_rel_err) << '\n';
        ok = ok && r.max_rel_err < 1e-4;
    }
    std::cout << os.str();
    if (!a.out.empty()) atomic_write(a.out, os.str());
    if (!ok) {
        std::cerr << "gradient check failed\n";
        return 3;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// fit-experiment
// ---------------------------------------------------------------------------

struct FitArgs {
    std::string norm = "bn", vi = "all", out;
    unsigned long long seed = 1, data_seed = 1;
    int epochs = 30, hidden = 16, batch = 16;
    int images = 40, image_size = 64;
    int train_pixels = 2048, test_pixels = 1024;
};

int run_fit_experiment(const FitArgs& a) {
    const NormMode mode = norm_mode_from_name(a.norm);
    if (mode != NormMode::BN && mode != NormMode::AGN)
        throw DataError("fit-experiment supports --norm bn or agn");

    std::vector<ViKind> kinds;
    if (a.vi == "all")
        kinds.assign(network_vi_kinds().begin(), network_vi_kinds().end());
    else
        kinds.push_back(vi_from_name(a.vi));

    SynthSpec spec;
    spec.count = a.images;
    spec.size = a.image_size;
    spec.seed = a.data_seed;

    std::vector<double> errors(kinds.size());
    parallel_tasks(static_cast<int>(kinds.size()), [&](int i) {
        const PixelDataset data = make_pixel_dataset(
            kinds[i], ViParams{}, spec, a.train_pixels, a.test_pixels);
        FitConfig cfg;
        cfg.batch_size = a.batch;
        cfg.hidden_width = a.hidden;
        cfg.epochs = a.epochs;
        cfg.seed = a.seed;
        cfg.norm_mode = mode;
        errors[i] = fit_vi_experiment(cfg, data);
    });

    std::ostringstream os;
    os << "vi,norm,seed,relative_error_pct\n";
    for (std::size_t i = 0; i < kinds.size(); ++i)
        os << vi_name(kinds[i]) << ',' << norm_mode_name(mode) << ',' << a.seed
           << ',' << format_double(errors[i]) << '\n';
    atomic_write(a.out, os.str());
    return 0;
}

// ---------------------------------------------------------------------------
// toy-seg
// ---------------------------------------------------------------------------

struct ToySegArgs {
    std::string variant = "all", out;
    int seeds = 3;
    unsigned long long seed_base = 1, data_seed = 1;
    int images = 220, image_size = 64, epochs = 18;
};

int run_toy_seg(const ToySegArgs& a) {
    std::vector<SegVariant> variants;
    if (a.variant == "all")
        variants = {SegVariant::Baseline, SegVariant::VI, SegVariant::GVI,
                    SegVariant::AGN};
    else
        variants.push_back(seg_variant_from_name(a.variant));
    if (a.seeds < 1) throw DataError("--seeds must be at least 1");

    SynthSpec spec;
    spec.count = a.images;
    spec.size = a.image_size;
    spec.seed = a.data_seed;
    TrainSchedule schedule;
    schedule.max_epochs = a.epochs;

    struct Run {
        SegVariant variant;
        unsigned long long seed;
        SegResult result;
    };
    std::vector<Run> runs;
    for (SegVariant v : variants)
        for (int s = 0; s < a.seeds; ++s)
            runs.push_back({v, a.seed_base + static_cast<unsigned long long>(s), {}});

    parallel_tasks(static_cast<int>(runs.size()), [&](int i) {
        runs[i].result = toy_segmentation_experiment(runs[i].variant, spec,
                                                     schedule, runs[i].seed);
    });

    const std::vector<std::string> class_names = synth_class_names(spec.rule);
    std::ostringstream os;
    os << "variant,seed,epoch,train_loss,val_loss,lr,miou";
    for (const std::string& c : class_names) os << ",iou_" << c;
    os << '\n';
    for (const Run& r : runs) {
        const SegResult& res = r.result;
        for (int e = 0; e < res.epochs_run; ++e) {
            os << seg_variant_name(r.variant) << ',' << r.seed << ',' << e << ','
               << format_double(res.epoch_train_loss[e]) << ','
               << format_double(res.epoch_val_loss[e]) << ','
               << format_double(res.epoch_lr[e]);
            if (e == res.epochs_run - 1) {
                os << ',' << format_double(res.miou);
                for (double iou : res.class_iou) os << ',' << format_double(iou);
            } else {
                os << ',';
                for (std::size_t c = 0; c < class_names.size(); ++c) os << ',';
            }
            os << '\n';
        }
    }
    atomic_write(a.out, os.str());

    // Summary in fixed variant order: mean and stdev of mIoU across seeds.
    std::ostringstream sum;
    sum << "variant,mean_miou,std_miou,seeds\n";
    for (SegVariant v : variants) {
        std::vector<double> mious;
        for (const Run& r : runs)
            if (r.variant == v) mious.push_back(r.result.miou);
        double mean = 0.0;
        for (double m : mious) mean += m;
        mean /= static_cast<double>(mious.size());
        double var = 0.0;
        for (double m : mious) var += (m - mean) * (m - mean);
        var /= static_cast<double>(mious.size());
        sum << seg_variant_name(v) << ',' << format_double(mean) << ','
            << format_double(std::sqrt(var)) << ',' << mious.size() << '\n';
    }
    fs::path sum_path(a.out);
    sum_path.replace_extension();
    sum_path += ".summary.csv";
    atomic_write(sum_path.string(), sum.str());
    return 0;
}

// ---------------------------------------------------------------------------
// params save / load
// ---------------------------------------------------------------------------

struct ParamsSaveArgs {
    std::string out, kind = "gvi";
    // gvi
    std::string express;
    int channels = 12, kernel = 1;
    unsigned long long seed = 1;
    bool ndvi_seed = false;
    // norm
    std::string mode = "bn";
    int norm_channels = 16, groups = 4;
    double rho = -10.0;
};

int run_params_save(const ParamsSaveArgs& a) {
    if (a.kind == "gvi") {
        GviLayer layer = a.express.empty()
                             ? gvi_init(a.channels, a.kernel, a.seed, a.ndvi_seed)
                             : express_vi(vi_from_name(a.express));
        save_gvi(layer, a.out);
    } else if (a.kind == "norm") {
        NormState s = make_norm_state(norm_mode_from_name(a.mode),
                                      a.norm_channels, a.groups);
        s.rho = a.rho;
        save_norm(s, a.out);
    } else {
        throw DataError("--kind must be gvi or norm");
    }
    return 0;
}

struct ParamsLoadArgs {
    std::string in, out;
};

int run_params_load(const ParamsLoadArgs& a) {
    std::ifstream is(a.in);
    if (!is) throw DataError("cannot open parameter file: " + a.in);
    std::string tag;
    is >> tag;
    is.close();
    if (tag == "gvi") {
        const GviLayer layer = load_gvi(a.in);
        std::cout << "gvi channels=" << layer.channels()
                  << " kernel=" << layer.kernel() << '\n';
        if (!a.out.empty()) save_gvi(layer, a.out);
    } else if (tag == "norm") {
        const NormState s = load_norm(a.in);
        std::cout << "norm mode=" << norm_mode_name(s.mode)
                  << " channels=" << s.channels << " groups=" << s.groups << '\n';
        if (!a.out.empty()) save_norm(s, a.out);
    } else {
        throw DataError("unrecognized parameter file: " + a.in);
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"vegetation-index fusion toolkit"};
    app.require_subcommand(1);

    // vi compute / vi corr
    auto* vi = app.add_subcommand("vi", "index rasters and statistics");
    vi->require_subcommand(1);

    ComputeArgs ca;
    auto* compute = vi->add_subcommand("compute", "compute index rasters");
    compute->add_option("--rgb", ca.rgb, "8-bit RGB image")->required();
    compute->add_option("--nir", ca.nir, "8-bit grayscale NIR image")->required();
    compute->add_option("--mask", ca.mask, "8-bit validity mask (nonzero = valid)");
    compute->add_option("--kind", ca.kind, "index name, or 'all' for the 12 network indices");
    compute->add_option("--out", ca.out, "output file (or directory for 'all')")->required();
    compute->add_option("--format", ca.format, "csv or png16");
    add_vi_param_flags(compute, ca.params);

    CorrArgs ra;
    auto* corr = vi->add_subcommand("corr", "pairwise index correlation matrix");
    corr->add_option("--image", ra.images, "input as rgb:nir[:mask]; repeatable");
    corr->add_option("--dir", ra.dir, "directory of *_rgb/*_nir/*_mask images");
    corr->add_option("--out", ra.out, "output CSV")->required();
    add_vi_param_flags(corr, ra.params);

    GradArgs ga;
    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    grad->add_option("--seed", ga.seed, "random seed");
    grad->add_option("--points", ga.points, "smooth points per operation");
    grad->add_option("--out", ga.out, "also write the report CSV here");

    FitArgs fa;
    auto* fit = app.add_subcommand("fit-experiment",
                                   "dense-net index fitting, BN vs AGN");
    fit->add_option("--norm", fa.norm, "bn or agn")->required();
    fit->add_option("--vi", fa.vi, "index name or 'all'");
    fit->add_option("--out", fa.out, "output CSV")->required();
    fit->add_option("--seed", fa.seed, "training seed");
    fit->add_option("--data-seed", fa.data_seed, "synthetic dataset seed");
    fit->add_option("--epochs", fa.epochs, "training epochs");
    fit->add_option("--hidden", fa.hidden, "hidden width");
    fit->add_option("--batch", fa.batch, "batch size");
    fit->add_option("--images", fa.images, "synthetic image count");
    fit->add_option("--size", fa.image_size, "synthetic image size");
    fit->add_option("--train-pixels", fa.train_pixels, "training pixels");
    fit->add_option("--test-pixels", fa.test_pixels, "held-out pixels");

    ToySegArgs ta;
    auto* toy = app.add_subcommand("toy-seg", "synthetic segmentation study");
    toy->add_option("--variant", ta.variant, "baseline, vi, gvi, agn or all");
    toy->add_option("--seeds", ta.seeds, "number of seeds per variant");
    toy->add_option("--seed-base", ta.seed_base, "first seed value");
    toy->add_option("--data-seed", ta.data_seed, "synthetic dataset seed");
    toy->add_option("--out", ta.out, "per-run CSV (summary written alongside)")->required();
    toy->add_option("--images", ta.images, "synthetic image count");
    toy->add_option("--size", ta.image_size, "synthetic image size");
    toy->add_option("--epochs", ta.epochs, "maximum epochs");

    auto* params = app.add_subcommand("params", "parameter file round trips");
    params->require_subcommand(1);
    ParamsSaveArgs pa;
    auto* save = params->add_subcommand("save", "create and save parameters");
    save->add_option("--out", pa.out, "output file")->required();
    save->add_option("--kind", pa.kind, "gvi or norm");
    save->add_option("--express", pa.express, "fixed index weights instead of random init");
    save->add_option("--channels", pa.channels, "GVI output channels");
    save->add_option("--kernel", pa.kernel, "GVI kernel size (odd)");
    save->add_option("--seed", pa.seed, "init seed");
    save->add_flag("--ndvi-seed", pa.ndvi_seed, "seed channel 0 with NDVI weights");
    save->add_option("--mode", pa.mode, "normalization mode");
    save->add_option("--norm-channels", pa.norm_channels, "normalized channels");
    save->add_option("--groups", pa.groups, "group count");
    save->add_option("--rho", pa.rho, "AGN gate logit");
    ParamsLoadArgs la;
    auto* load = params->add_subcommand("load", "load, summarize, optionally re-save");
    load->add_option("--in", la.in, "input file")->required();
    load->add_option("--out", la.out, "re-serialize here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (compute->parsed()) return run_vi_compute(ca);
        if (corr->parsed()) return run_vi_corr(ra);
        if (grad->parsed()) return run_gradcheck(ga);
        if (fit->parsed()) return run_fit_experiment(fa);
        if (toy->parsed()) return run_toy_seg(ta);
        if (save->parsed()) return run_params_save(pa);
        if (load->parsed()) return run_params_load(la);
        std::cerr << "no subcommand\n";
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return 3;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}
