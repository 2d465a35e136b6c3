#include "vifuse/losses.hpp"

#include <bit>
#include <cmath>
#include <limits>
#include <sstream>

#include "vifuse/csvio.hpp"

namespace vifuse {

LabelGrid::LabelGrid(int width_, int height_, int num_classes_)
    : width(width_), height(height_), num_classes(num_classes_) {
    if (width_ <= 0 || height_ <= 0)
        throw DataError("LabelGrid: dimensions must be positive");
    if (num_classes_ < 1 || num_classes_ > 32)
        throw DataError("LabelGrid: class count must be in [1, 32]");
    labels.assign(static_cast<std::size_t>(width_) * height_, 0u);
    valid.assign(labels.size(), 1);
}

int LabelGrid::label_count(int y, int x) const {
    return std::popcount(labels[idx(y, x)]);
}

void validate(const LabelGrid& grid) {
    if (grid.width <= 0 || grid.height <= 0)
        throw DataError("LabelGrid: dimensions must be positive");
    if (grid.num_classes < 1 || grid.num_classes > 32)
        throw DataError("LabelGrid: class count must be in [1, 32]");
    const std::size_t count = static_cast<std::size_t>(grid.width) * grid.height;
    if (grid.labels.size() != count || grid.valid.size() != count)
        throw DataError("LabelGrid: buffer sizes do not match dimensions");
    const std::uint32_t in_range =
        grid.num_classes == 32 ? ~0u : (1u << grid.num_classes) - 1u;
    for (std::size_t i = 0; i < count; ++i) {
        if (!grid.valid[i]) continue;
        if (grid.labels[i] == 0)
            throw DataError("LabelGrid: valid pixel with no label");
        if (grid.labels[i] & ~in_range)
            throw DataError("LabelGrid: label outside the class list");
    }
}

namespace {

void check_batch(const Tensor4& probs, std::span<const LabelGrid> targets) {
    if (static_cast<std::size_t>(probs.n) != targets.size())
        throw DataError("loss: batch size does not match target count");
    for (const LabelGrid& t : targets) {
        if (t.width != probs.w || t.height != probs.h)
            throw DataError("loss: target dimensions do not match probabilities");
        if (t.num_classes != probs.c)
            throw DataError("loss: target class count does not match probabilities");
    }
}

std::size_t count_valid(std::span<const LabelGrid> targets) {
    std::size_t n = 0;
    for (const LabelGrid& t : targets)
        for (std::uint8_t v : t.valid) n += v != 0;
    return n;
}

// Highest probability among the pixel's target classes, and that class.
std::pair<double, int> target_prob(const Tensor4& probs, int n, int y, int x,
                                   std::uint32_t mask) {
    double best = -1.0;
    int best_c = -1;
    for (std::uint32_t m = mask; m != 0; m &= m - 1) {
        const int c = std::countr_zero(m);
        const double p = probs.at(n, c, y, x);
        if (p > best) {
            best = p;
            best_c = c;
        }
    }
    return {best, best_c};
}

} // namespace

Tensor4 softmax_channel(const Tensor4& logits) {
    Tensor4 out(logits.n, logits.c, logits.h, logits.w);
    for (int n = 0; n < logits.n; ++n) {
        for (int y = 0; y < logits.h; ++y) {
            for (int x = 0; x < logits.w; ++x) {
                double hi = logits.at(n, 0, y, x);
                for (int c = 1; c < logits.c; ++c)
                    hi = std::max(hi, logits.at(n, c, y, x));
                double sum = 0.0;
                for (int c = 0; c < logits.c; ++c) {
                    const double e = std::exp(logits.at(n, c, y, x) - hi);
                    out.at(n, c, y, x) = e;
                    sum += e;
                }
                for (int c = 0; c < logits.c; ++c) out.at(n, c, y, x) /= sum;
            }
        }
    }
    return out;
}

Tensor4 softmax_backward(const Tensor4& probs, const Tensor4& upstream) {
    if (!probs.same_shape(upstream))
        throw DataError("softmax_backward: shape mismatch");
    Tensor4 gx(probs.n, probs.c, probs.h, probs.w);
    for (int n = 0; n < probs.n; ++n) {
        for (int y = 0; y < probs.h; ++y) {
            for (int x = 0; x < probs.w; ++x) {
                double dot = 0.0;
                for (int c = 0; c < probs.c; ++c)
                    dot += upstream.at(n, c, y, x) * probs.at(n, c, y, x);
                for (int c = 0; c < probs.c; ++c)
                    gx.at(n, c, y, x) =
                        probs.at(n, c, y, x) * (upstream.at(n, c, y, x) - dot);
            }
        }
    }
    return gx;
}

double focal_loss(const Tensor4& probs, std::span<const LabelGrid> targets,
                  double gamma) {
    check_batch(probs, targets);
    if (gamma < 0.0) throw DataError("focal_loss: gamma must be nonnegative");
    const std::size_t valid = count_valid(targets);
    if (valid == 0) throw DataError("focal_loss: no valid pixels");
    double sum = 0.0;
    for (int n = 0; n < probs.n; ++n) {
        const LabelGrid& t = targets[n];
        for (int y = 0; y < probs.h; ++y) {
            for (int x = 0; x < probs.w; ++x) {
                if (!t.is_valid(y, x)) continue;
                const auto [pt, cls] = target_prob(probs, n, y, x, t.labels[t.idx(y, x)]);
                (void)cls;
                if (pt <= 0.0)
                    throw NumericError("focal_loss: zero probability at a target");
                sum += -std::pow(1.0 - pt, gamma) * std::log(pt);
            }
        }
    }
    return sum / static_cast<double>(valid);
}

Tensor4 focal_backward(const Tensor4& probs, std::span<const LabelGrid> targets,
                       double gamma) {
    check_batch(probs, targets);
    if (gamma < 0.0) throw DataError("focal_loss: gamma must be nonnegative");
    const std::size_t valid = count_valid(targets);
    if (valid == 0) throw DataError("focal_loss: no valid pixels");
    Tensor4 gx(probs.n, probs.c, probs.h, probs.w);
    const double inv = 1.0 / static_cast<double>(valid);
    for (int n = 0; n < probs.n; ++n) {
        const LabelGrid& t = targets[n];
        for (int y = 0; y < probs.h; ++y) {
            for (int x = 0; x < probs.w; ++x) {
                if (!t.is_valid(y, x)) continue;
                const auto [pt, cls] = target_prob(probs, n, y, x, t.labels[t.idx(y, x)]);
                if (pt <= 0.0)
                    throw NumericError("focal_loss: zero probability at a target");
                double d;
                if (pt >= 1.0 && gamma > 0.0) {
                    d = 0.0;
                } else {
                    const double q = 1.0 - pt;
                    d = gamma * std::pow(q, gamma - 1.0) * std::log(pt) -
                        std::pow(q, gamma) / pt;
                }
                gx.at(n, cls, y, x) += inv * d;
            }
        }
    }
    return gx;
}

namespace {

struct DiceSums {
    std::vector<double> inter, psum, tsum; // per class, valid pixels only
};

DiceSums dice_sums(const Tensor4& probs, std::span<const LabelGrid> targets) {
    DiceSums s;
    s.inter.assign(probs.c, 0.0);
    s.psum.assign(probs.c, 0.0);
    s.tsum.assign(probs.c, 0.0);
    for (int n = 0; n < probs.n; ++n) {
        const LabelGrid& t = targets[n];
        for (int y = 0; y < probs.h; ++y) {
            for (int x = 0; x < probs.w; ++x) {
                if (!t.is_valid(y, x)) continue;
                const std::uint32_t mask = t.labels[t.idx(y, x)];
                for (int c = 0; c < probs.c; ++c) {
                    const double p = probs.at(n, c, y, x);
                    s.psum[c] += p;
                    if ((mask >> c) & 1u) {
                        s.inter[c] += p;
                        s.tsum[c] += 1.0;
                    }
                }
            }
        }
    }
    return s;
}

constexpr double kDiceSmooth = 1.0;

} // namespace

double dice_loss(const Tensor4& probs, std::span<const LabelGrid> targets) {
    check_batch(probs, targets);
    const DiceSums s = dice_sums(probs, targets);
    double mean = 0.0;
    for (int c = 0; c < probs.c; ++c)
        mean += (2.0 * s.inter[c] + kDiceSmooth) /
                (s.psum[c] + s.tsum[c] + kDiceSmooth);
    return 1.0 - mean / probs.c;
}

Tensor4 dice_backward(const Tensor4& probs, std::span<const LabelGrid> targets) {
    check_batch(probs, targets);
    const DiceSums s = dice_sums(probs, targets);
    std::vector<double> num(probs.c), den(probs.c);
    for (int c = 0; c < probs.c; ++c) {
        num[c] = 2.0 * s.inter[c] + kDiceSmooth;
        den[c] = s.psum[c] + s.tsum[c] + kDiceSmooth;
    }
    Tensor4 gx(probs.n, probs.c, probs.h, probs.w);
    const double inv_c = 1.0 / probs.c;
    for (int n = 0; n < probs.n; ++n) {
        const LabelGrid& t = targets[n];
        for (int y = 0; y < probs.h; ++y) {
            for (int x = 0; x < probs.w; ++x) {
                if (!t.is_valid(y, x)) continue;
                const std::uint32_t mask = t.labels[t.idx(y, x)];
                for (int c = 0; c < probs.c; ++c) {
                    const double tc = (mask >> c) & 1u ? 1.0 : 0.0;
                    // d dice_c / dp = (2t*den - num) / den^2
                    gx.at(n, c, y, x) =
                        -inv_c * (2.0 * tc * den[c] - num[c]) / (den[c] * den[c]);
                }
            }
        }
    }
    return gx;
}

double combined_loss(const Tensor4& probs, std::span<const LabelGrid> targets,
                     double focal_weight, double dice_weight, double gamma) {
    return focal_weight * focal_loss(probs, targets, gamma) +
           dice_weight * dice_loss(probs, targets);
}

Tensor4 combined_backward(const Tensor4& probs, std::span<const LabelGrid> targets,
                          double focal_weight, double dice_weight, double gamma) {
    Tensor4 gx = focal_backward(probs, targets, gamma);
    const Tensor4 gd = dice_backward(probs, targets);
    for (std::size_t i = 0; i < gx.size(); ++i)
        gx.v[i] = focal_weight * gx.v[i] + dice_weight * gd.v[i];
    return gx;
}

IouReport miou_overlapped(std::span<const PredGrid> preds,
                          std::span<const LabelGrid> targets, int num_classes) {
    if (preds.size() != targets.size())
        throw DataError("miou: prediction/target count mismatch");
    if (num_classes < 1) throw DataError("miou: class count must be positive");
    IouReport rep;
    rep.tp.assign(num_classes, 0);
    rep.fp.assign(num_classes, 0);
    rep.fn.assign(num_classes, 0);

    std::size_t seen_valid = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const PredGrid& p = preds[i];
        const LabelGrid& t = targets[i];
        if (p.width != t.width || p.height != t.height)
            throw DataError("miou: prediction/target dimensions mismatch");
        for (int y = 0; y < t.height; ++y) {
            for (int x = 0; x < t.width; ++x) {
                if (!t.is_valid(y, x)) continue;
                ++seen_valid;
                const int q = p.cls[p.idx(y, x)];
                if (q < 0 || q >= num_classes)
                    throw DataError("miou: prediction outside the class list");
                const std::uint32_t mask = t.labels[t.idx(y, x)];
                if ((mask >> q) & 1u) {
                    ++rep.tp[q];
                } else {
                    ++rep.fp[q];
                    for (std::uint32_t m = mask; m != 0; m &= m - 1)
                        ++rep.fn[std::countr_zero(m)];
                }
            }
        }
    }
    if (seen_valid == 0) throw DataError("miou: empty valid region");

    rep.iou.assign(num_classes, std::numeric_limits<double>::quiet_NaN());
    double sum = 0.0;
    int present = 0;
    for (int c = 0; c < num_classes; ++c) {
        const long long den = rep.tp[c] + rep.fp[c] + rep.fn[c];
        if (den == 0) continue;
        rep.iou[c] = static_cast<double>(rep.tp[c]) / static_cast<double>(den);
        sum += rep.iou[c];
        ++present;
    }
    rep.miou = present > 0 ? sum / present
                           : std::numeric_limits<double>::quiet_NaN();
    return rep;
}

std::string iou_report_csv(const IouReport& report,
                           const std::vector<std::string>& class_names) {
    if (class_names.size() != report.tp.size())
        throw DataError("iou_report_csv: class name count mismatch");
    std::ostringstream os;
    os << "class,tp,fp,fn,iou\n";
    for (std::size_t c = 0; c < class_names.size(); ++c) {
        os << class_names[c] << ',' << report.tp[c] << ',' << report.fp[c]
           << ',' << report.fn[c] << ',' << format_double(report.iou[c]) << '\n';
    }
    os << "miou,,,," << format_double(report.miou) << '\n';
    return os.str();
}

} // namespace vifuse
