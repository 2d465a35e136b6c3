#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "vifuse/losses.hpp"

using namespace vifuse;

namespace {

// One 1x3 image with per-pixel probabilities given per class.
Tensor4 probs_1x3(const std::vector<std::vector<double>>& per_pixel) {
    const int c = static_cast<int>(per_pixel[0].size());
    Tensor4 t(1, c, 1, 3);
    for (int x = 0; x < 3; ++x)
        for (int ic = 0; ic < c; ++ic) t.at(0, ic, 0, x) = per_pixel[x][ic];
    return t;
}

LabelGrid grid_1x3(int classes, const std::vector<std::vector<int>>& labels) {
    LabelGrid g(3, 1, classes);
    for (int x = 0; x < 3; ++x)
        for (int cls : labels[x]) g.add_label(0, x, cls);
    return g;
}

} // namespace

TEST_SUITE("losses") {

TEST_CASE("label grids validate class counts and label ranges") {
    CHECK_THROWS_AS(LabelGrid(2, 2, 0), DataError);
    CHECK_THROWS_AS(LabelGrid(2, 2, 33), DataError);
    LabelGrid(2, 2, 32); // the ceiling itself is allowed

    LabelGrid g(2, 1, 3);
    g.add_label(0, 0, 1);
    g.add_label(0, 1, 5); // out of range for 3 classes
    CHECK_THROWS_AS(validate(g), DataError);

    LabelGrid empty(2, 1, 3);
    empty.add_label(0, 0, 0);
    // Pixel (0,1) is valid but carries no label.
    CHECK_THROWS_AS(validate(empty), DataError);
    empty.valid[1] = 0;
    validate(empty);
}

TEST_CASE("label counting") {
    LabelGrid g(1, 1, 4);
    CHECK(g.label_count(0, 0) == 0);
    g.add_label(0, 0, 0);
    g.add_label(0, 0, 3);
    CHECK(g.label_count(0, 0) == 2);
    CHECK(g.has_label(0, 0, 3));
    CHECK_FALSE(g.has_label(0, 0, 1));
}

TEST_CASE("softmax sums to one and keeps order") {
    Tensor4 logits(1, 3, 1, 2);
    logits.v = {5.0, 1000.0, 2.0, 999.0, -1.0, 998.0}; // large values: stability
    const Tensor4 p = softmax_channel(logits);
    for (int x = 0; x < 2; ++x) {
        double sum = 0.0;
        for (int c = 0; c < 3; ++c) sum += p.at(0, c, 0, x);
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
    CHECK(p.at(0, 0, 0, 0) > p.at(0, 1, 0, 0));
    CHECK(p.at(0, 1, 0, 0) > p.at(0, 2, 0, 0));
    for (double v : p.v) CHECK(std::isfinite(v));
}

TEST_CASE("focal loss on hand-computed pixels") {
    // Pixel 0: target 0 with p=0.7. Pixel 1: targets {0,1}, best is p=0.6.
    // Pixel 2: invalid, must not contribute.
    const Tensor4 p = probs_1x3({{0.7, 0.2, 0.1},
                                 {0.3, 0.6, 0.1},
                                 {0.1, 0.1, 0.8}});
    LabelGrid g = grid_1x3(3, {{0}, {0, 1}, {2}});
    g.valid[2] = 0;
    const std::vector<LabelGrid> t = {g};

    const double gamma = 2.0;
    const double want = (-std::pow(1.0 - 0.7, gamma) * std::log(0.7) +
                         -std::pow(1.0 - 0.6, gamma) * std::log(0.6)) /
                        2.0;
    CHECK(focal_loss(p, t, gamma) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("focal loss with gamma 0 is plain cross-entropy on the target prob") {
    const Tensor4 p = probs_1x3({{0.7, 0.2, 0.1},
                                 {0.3, 0.6, 0.1},
                                 {0.25, 0.25, 0.5}});
    const std::vector<LabelGrid> t = {grid_1x3(3, {{0}, {1}, {2}})};
    const double want = (-std::log(0.7) - std::log(0.6) - std::log(0.5)) / 3.0;
    CHECK(focal_loss(p, t, 0.0) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("focal loss flags zero target probability") {
    const Tensor4 p = probs_1x3({{0.0, 1.0, 0.0},
                                 {0.3, 0.6, 0.1},
                                 {0.25, 0.25, 0.5}});
    const std::vector<LabelGrid> t = {grid_1x3(3, {{0}, {1}, {2}})};
    CHECK_THROWS_AS(focal_loss(p, t), NumericError);
}

TEST_CASE("focal gradient flows only into the best target class") {
    const Tensor4 p = probs_1x3({{0.7, 0.2, 0.1},
                                 {0.3, 0.6, 0.1},
                                 {0.2, 0.3, 0.5}});
    const std::vector<LabelGrid> t = {grid_1x3(3, {{0}, {0, 1}, {2}})};
    const Tensor4 gp = focal_backward(p, t);
    // Pixel 1: class 1 holds the max target probability; class 0 gets nothing.
    CHECK(gp.at(0, 0, 0, 1) == 0.0);
    CHECK(gp.at(0, 1, 0, 1) != 0.0);
    // Non-target classes carry no focal gradient at all.
    CHECK(gp.at(0, 2, 0, 0) == 0.0);
    CHECK(gp.at(0, 2, 0, 1) == 0.0);
}

TEST_CASE("dice loss against a brute-force recomputation") {
    const Tensor4 p = probs_1x3({{0.7, 0.2, 0.1},
                                 {0.3, 0.6, 0.1},
                                 {0.2, 0.3, 0.5}});
    LabelGrid g = grid_1x3(3, {{0}, {0, 1}, {2}});
    g.valid[0] = 1;
    const std::vector<LabelGrid> t = {g};

    double mean_dice = 0.0;
    for (int c = 0; c < 3; ++c) {
        double inter = 0.0, total = 0.0;
        for (int x = 0; x < 3; ++x) {
            const double target = g.has_label(0, x, c) ? 1.0 : 0.0;
            inter += p.at(0, c, 0, x) * target;
            total += p.at(0, c, 0, x) + target;
        }
        mean_dice += (2.0 * inter + 1.0) / (total + 1.0);
    }
    mean_dice /= 3.0;
    CHECK(dice_loss(p, t) == doctest::Approx(1.0 - mean_dice).epsilon(1e-12));
}

TEST_CASE("a perfect hard prediction gives a near-zero dice loss") {
    const Tensor4 p = probs_1x3({{1.0, 0.0, 0.0},
                                 {0.0, 1.0, 0.0},
                                 {0.0, 0.0, 1.0}});
    const std::vector<LabelGrid> t = {grid_1x3(3, {{0}, {1}, {2}})};
    CHECK(dice_loss(p, t) < 0.2); // smoothing keeps it slightly above zero
    CHECK(dice_loss(p, t) >= 0.0);
}

TEST_CASE("invalid pixels do not contribute to either loss") {
    Tensor4 p = probs_1x3({{0.7, 0.2, 0.1},
                           {0.3, 0.6, 0.1},
                           {0.2, 0.3, 0.5}});
    LabelGrid g = grid_1x3(3, {{0}, {1}, {2}});
    g.valid[2] = 0;
    const std::vector<LabelGrid> t = {g};
    const double f0 = focal_loss(p, t);
    const double d0 = dice_loss(p, t);

    // Changing the invalid pixel's probabilities must change nothing.
    p.at(0, 0, 0, 2) = 0.05;
    p.at(0, 1, 0, 2) = 0.05;
    p.at(0, 2, 0, 2) = 0.9;
    CHECK(focal_loss(p, t) == f0);
    CHECK(dice_loss(p, t) == d0);

    const Tensor4 gp = combined_backward(p, t);
    for (int c = 0; c < 3; ++c) CHECK(gp.at(0, c, 0, 2) == 0.0);
}

TEST_CASE("combined loss is the documented weighted sum") {
    const Tensor4 p = probs_1x3({{0.7, 0.2, 0.1},
                                 {0.3, 0.6, 0.1},
                                 {0.2, 0.3, 0.5}});
    const std::vector<LabelGrid> t = {grid_1x3(3, {{0}, {0, 1}, {2}})};
    const double want = 0.75 * focal_loss(p, t) + 0.25 * dice_loss(p, t);
    CHECK(combined_loss(p, t) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("loss calls reject mismatched batches") {
    const Tensor4 p = probs_1x3({{0.7, 0.2, 0.1},
                                 {0.3, 0.6, 0.1},
                                 {0.2, 0.3, 0.5}});
    const std::vector<LabelGrid> wrong_size = {grid_1x3(3, {{0}, {0}, {0}}),
                                               grid_1x3(3, {{0}, {0}, {0}})};
    CHECK_THROWS_AS(focal_loss(p, wrong_size), DataError);
    const std::vector<LabelGrid> wrong_classes = {
        LabelGrid(3, 1, 4)};
    CHECK_THROWS_AS(dice_loss(p, wrong_classes), DataError);
}

TEST_CASE("the three-pixel overlapped-annotation example") {
    // Ground truth: {A}, {A,B}, {B}. Predictions: A, B, A.
    // Pixels 0 and 1 are hits. Pixel 2 predicts A against {B}: one false
    // positive for A and one false negative for B.
    LabelGrid g(3, 1, 2);
    g.add_label(0, 0, 0);
    g.add_label(0, 1, 0);
    g.add_label(0, 1, 1);
    g.add_label(0, 2, 1);
    PredGrid pr(3, 1);
    pr.cls = {0, 1, 0};

    const IouReport rep = miou_overlapped(std::vector<PredGrid>{pr},
                                          std::vector<LabelGrid>{g}, 2);
    CHECK(rep.tp == std::vector<long long>{1, 1});
    CHECK(rep.fp == std::vector<long long>{1, 0});
    CHECK(rep.fn == std::vector<long long>{0, 1});
    CHECK(rep.iou[0] == doctest::Approx(0.5));
    CHECK(rep.iou[1] == doctest::Approx(0.5));
    CHECK(rep.miou == doctest::Approx(0.5));
}

TEST_CASE("a prediction matching any of the overlapping labels is correct") {
    LabelGrid g(1, 1, 3);
    g.add_label(0, 0, 0);
    g.add_label(0, 0, 2);
    PredGrid pr(1, 1);
    pr.cls = {2};
    const IouReport rep = miou_overlapped(std::vector<PredGrid>{pr},
                                          std::vector<LabelGrid>{g}, 3);
    CHECK(rep.tp[2] == 1);
    CHECK(rep.fp[2] == 0);
    CHECK(rep.fn[0] == 0); // the co-label is not penalized on a hit
}

TEST_CASE("absent classes are excluded from the mean, not zeroed") {
    LabelGrid g(2, 1, 3); // class 2 never appears
    g.add_label(0, 0, 0);
    g.add_label(0, 1, 1);
    PredGrid pr(2, 1);
    pr.cls = {0, 1};
    const IouReport rep = miou_overlapped(std::vector<PredGrid>{pr},
                                          std::vector<LabelGrid>{g}, 3);
    CHECK(std::isnan(rep.iou[2]));
    CHECK(rep.miou == doctest::Approx(1.0));
}

TEST_CASE("invalid pixels are skipped by the metric") {
    LabelGrid g(2, 1, 2);
    g.add_label(0, 0, 0);
    g.add_label(0, 1, 1);
    g.valid[1] = 0;
    PredGrid pr(2, 1);
    pr.cls = {0, 0}; // the wrong prediction sits on the invalid pixel
    const IouReport rep = miou_overlapped(std::vector<PredGrid>{pr},
                                          std::vector<LabelGrid>{g}, 2);
    CHECK(rep.miou == doctest::Approx(1.0));
}

TEST_CASE("metric input mismatches are rejected") {
    PredGrid pr(2, 2);
    LabelGrid g(3, 2, 2);
    g.add_label(0, 0, 0);
    CHECK_THROWS_AS(miou_overlapped(std::vector<PredGrid>{pr},
                                    std::vector<LabelGrid>{g}, 2),
                    DataError);
    CHECK_THROWS_AS(miou_overlapped(std::vector<PredGrid>{pr},
                                    std::vector<LabelGrid>{}, 2),
                    DataError);
}

TEST_CASE("the CSV report lists classes then the mean") {
    LabelGrid g(3, 1, 2);
    g.add_label(0, 0, 0);
    g.add_label(0, 1, 0);
    g.add_label(0, 1, 1);
    g.add_label(0, 2, 1);
    PredGrid pr(3, 1);
    pr.cls = {0, 1, 0};
    const IouReport rep = miou_overlapped(std::vector<PredGrid>{pr},
                                          std::vector<LabelGrid>{g}, 2);
    const std::string csv = iou_report_csv(rep, {"a", "b"});
    CHECK(csv.find("class,tp,fp,fn,iou") != std::string::npos);
    CHECK(csv.find("a,1,1,0,") != std::string::npos);
    CHECK(csv.find("b,1,0,1,") != std::string::npos);
    CHECK(csv.find("miou") != std::string::npos);
}

} // TEST_SUITE
