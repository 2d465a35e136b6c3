#pragma once

#include <array>
#include <string>
#include <vector>

#include "vifuse/indices.hpp"
#include "vifuse/losses.hpp"
#include "vifuse/norm.hpp"
#include "vifuse/raster.hpp"

namespace vifuse {

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

enum class LabelRule {
    Vegetation,   // weed/waterway classes driven by latent vegetation fields
    NirThreshold, // trivially separable: label = thresholded NIR channel
};

// Desk-scale stand-in for aerial farmland imagery. Smooth latent fields drive
// both the reflectances and the labels, so index channels carry real signal.
// Images get a per-image illumination factor and per-pixel noise; label rules
// fire on the clean reflectances. Deterministic per seed.
struct SynthSpec {
    int count = 220;
    int size = 64;
    unsigned long long seed = 1;
    double illum_min = 0.4; // per-capture exposure range; a patchy field
    double illum_max = 1.0; // inside each capture dims to 60% of exposure
    double noise_sigma = 0.02;
    double invalid_frac = 0.03; // approximate fraction of invalid pixels
    LabelRule rule = LabelRule::Vegetation;
};

// Classes for LabelRule::Vegetation: 0 background, 1 weed cluster, 2 waterway.
// Weed and waterway regions may overlap. NirThreshold uses classes {0, 1}.
struct SynthDataset {
    std::vector<NrgbImage> images;
    std::vector<LabelGrid> labels;
    int num_classes = 0;
};

SynthDataset synth_dataset(const SynthSpec& spec);

std::vector<std::string> synth_class_names(LabelRule rule);

// ---------------------------------------------------------------------------
// Index-fitting experiment (dense net, BN vs AGN)
// ---------------------------------------------------------------------------

// Pixel regression set: NRGB pixel -> target index value.
struct PixelDataset {
    std::vector<std::array<double, 4>> x_train, x_test;
    std::vector<double> t_train, t_test;
};

// Training pixels are grouped into tiles of this many consecutive entries,
// all drawn from one image, so a sequential batch of the default size shares
// a single capture's illumination.
inline constexpr int kPixelTile = 16;

// Samples pixels from a synthetic image set and evaluates `kind` at each of
// them. VCI statistics are taken over the same images. Training pixels come
// tile-wise (see kPixelTile); held-out pixels are independent draws.
PixelDataset make_pixel_dataset(ViKind kind, const ViParams& params,
                                const SynthSpec& spec, int train_pixels,
                                int test_pixels);

struct FitConfig {
    int batch_size = 16;
    int hidden_width = 16;
    int epochs = 30;
    double lr = 0.01;
    double weight_decay = 5e-4;
    unsigned long long seed = 1;
    NormMode norm_mode = NormMode::BN; // BN or AGN after the hidden layer
    int groups = 4;                    // AGN group count (divides hidden_width)
    double rho_init = 0.0;             // AGN gate logit when training from scratch
};

// Trains a two-layer dense net (4 -> hidden -> 1) with the configured
// normalization after the hidden layer and L1 loss, the learning rate
// cosine-annealed from lr down to lr/100 across the run. Returns
// 100 * mean L1 error / std of the target on the held-out pixels.
// Throws NumericError on divergence. When `predictions` is given, the raw
// held-out predictions are written to it (for recomputing the statistic).
double fit_vi_experiment(const FitConfig& config, const PixelDataset& data,
                         std::vector<double>* predictions = nullptr);

// ---------------------------------------------------------------------------
// Training schedule
// ---------------------------------------------------------------------------

struct TrainSchedule {
    double base_lr = 0.01;
    double weight_decay = 5e-4;
    double min_lr = 1e-4; // cosine range
    double max_lr = 0.01;
    int cycle_epochs = 10;
    int patience = 10;
    int max_epochs = 18;
    int batch_images = 2;
};

// Cosine annealing with restarts: max_lr at each cycle start, min_lr at the
// cycle end, period `cycle_epochs`.
double cosine_lr(int epoch, const TrainSchedule& schedule);

// True iff the best loss so far has not improved within the last `patience`
// entries (ties do not count as improvement).
bool early_stop(const std::vector<double>& loss_history, int patience = 10);

// ---------------------------------------------------------------------------
// Toy segmentation experiment
// ---------------------------------------------------------------------------

enum class SegVariant { Baseline, VI, GVI, AGN };

std::string seg_variant_name(SegVariant v);
SegVariant seg_variant_from_name(const std::string& name);

struct SegNetConfig {
    int filters = 8;        // width of the three conv blocks (divisible by agn_groups)
    int gvi_channels = 12;  // GVI output channels, matching the 12-index variant
    int gvi_kernel = 1;
    bool gvi_ndvi_seed = true; // seed GVI channel 0 with NDVI weights
    int agn_groups = 4;
    // Gate logit right after the BN upgrade. -2 keeps most of the trained BN
    // behaviour while giving the group branch enough weight to train; colder
    // starts leave the gate without a usable gradient.
    double agn_rho_init = -2.0;
};

// Backbone input width for a variant: NRGB plus any appended index channels.
int seg_input_channels(SegVariant variant, const SegNetConfig& net = {});

struct SegResult {
    double miou = 0.0;
    std::vector<double> class_iou;
    std::vector<double> epoch_train_loss;
    std::vector<double> epoch_val_loss;
    std::vector<double> epoch_lr;
    int epochs_run = 0;
    double gvi_grad_norm = 0.0; // L2 norm of GVI gradients in the last epoch
    double final_rho = 0.0;     // AGN gate logit at the end of training
};

// Trains a small conv segmentation net on synthetic data and reports the
// overlapped-annotation mIoU on a held-out 20% split (by image, fixed per
// seed), taking the best validation mIoU across epochs. Baseline
// consumes NRGB; VI appends the 12 computed index channels; GVI appends
// learnable ratio channels; AGN additionally upgrades every BN layer to AGN
// (rho = -10) after the first third of the epochs.
SegResult toy_segmentation_experiment(SegVariant variant, const SynthSpec& spec,
                                      const TrainSchedule& schedule,
                                      unsigned long long seed,
                                      const SegNetConfig& net = {});

} // namespace vifuse
