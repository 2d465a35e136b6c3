#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vifuse/common.hpp"
#include "vifuse/tensor.hpp"

namespace vifuse {

// Per-pixel ground-truth label sets (annotations may overlap) with a validity
// mask. Labels are a bitmask over a fixed class list of at most 32 classes.
struct LabelGrid {
    int width = 0, height = 0, num_classes = 0;
    std::vector<std::uint32_t> labels; // bitmask per pixel
    std::vector<std::uint8_t> valid;

    LabelGrid() = default;
    LabelGrid(int width_, int height_, int num_classes_);

    std::size_t idx(int y, int x) const {
        return static_cast<std::size_t>(y) * width + x;
    }
    void add_label(int y, int x, int cls) { labels[idx(y, x)] |= 1u << cls; }
    bool has_label(int y, int x, int cls) const {
        return (labels[idx(y, x)] >> cls) & 1u;
    }
    bool is_valid(int y, int x) const { return valid[idx(y, x)] != 0; }
    int label_count(int y, int x) const;
};

// Checks that every valid pixel carries at least one label within range.
void validate(const LabelGrid& grid);

// One predicted class per pixel.
struct PredGrid {
    int width = 0, height = 0;
    std::vector<int> cls;

    PredGrid() = default;
    PredGrid(int width_, int height_) : width(width_), height(height_) {
        cls.assign(static_cast<std::size_t>(width_) * height_, 0);
    }
    std::size_t idx(int y, int x) const {
        return static_cast<std::size_t>(y) * width + x;
    }
};

// Numerically stable softmax over the channel dimension, per pixel.
Tensor4 softmax_channel(const Tensor4& logits);
// Gradient through softmax given probs = softmax(logits).
Tensor4 softmax_backward(const Tensor4& probs, const Tensor4& upstream);

// Focal loss, mean over valid pixels of -(1-p_t)^gamma * log(p_t), where p_t
// is the highest predicted probability among the pixel's target classes.
// Throws NumericError when some p_t is exactly zero.
double focal_loss(const Tensor4& probs, std::span<const LabelGrid> targets,
                  double gamma = 2.0);
Tensor4 focal_backward(const Tensor4& probs, std::span<const LabelGrid> targets,
                       double gamma = 2.0);

// Soft Dice loss with multi-hot targets, macro-averaged over classes,
// smooth constant 1, valid pixels only.
double dice_loss(const Tensor4& probs, std::span<const LabelGrid> targets);
Tensor4 dice_backward(const Tensor4& probs, std::span<const LabelGrid> targets);

inline constexpr double kFocalWeight = 0.75;
inline constexpr double kDiceWeight = 0.25;

double combined_loss(const Tensor4& probs, std::span<const LabelGrid> targets,
                     double focal_weight = kFocalWeight,
                     double dice_weight = kDiceWeight, double gamma = 2.0);
Tensor4 combined_backward(const Tensor4& probs, std::span<const LabelGrid> targets,
                          double focal_weight = kFocalWeight,
                          double dice_weight = kDiceWeight, double gamma = 2.0);

// Per-class intersection-over-union tallies under the overlapped-annotation
// protocol, plus the mean over classes that appear at all.
struct IouReport {
    std::vector<long long> tp, fp, fn;
    std::vector<double> iou; // NaN for classes with an empty denominator
    double miou = 0.0;
};

// Overlapped-annotation IoU. Per valid pixel with prediction q and target set
// T: if q is in T, one TP for q and nothing for the co-labels; otherwise one
// FP for q and one FN for every class in T. Invalid pixels are ignored.
IouReport miou_overlapped(std::span<const PredGrid> preds,
                          std::span<const LabelGrid> targets, int num_classes);

// CSV report: class, TP, FP, FN, IoU rows, then a final mIoU row.
std::string iou_report_csv(const IouReport& report,
                           const std::vector<std::string>& class_names);

} // namespace vifuse
