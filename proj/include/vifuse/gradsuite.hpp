#pragma once

#include <string>
#include <vector>

namespace vifuse {

struct GradCheckResult {
    std::string op;
    double max_rel_err = 0.0;
};

// Central finite-difference verification of every differentiable operation
// (conv2d, safe_div, dense, relu, sigmoid, BN/GN/AGN in train and eval mode,
// the GVI composite, and the focal/dice/combined losses) at random smooth
// points. Returns the worst relative error per operation.
std::vector<GradCheckResult> run_gradient_suite(unsigned long long seed,
                                                int points_per_op = 100,
                                                double h = 1e-5);

} // namespace vifuse
