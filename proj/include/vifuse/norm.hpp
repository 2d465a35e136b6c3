#pragma once

#include <string>
#include <vector>

#include "vifuse/common.hpp"
#include "vifuse/tensor.hpp"

namespace vifuse {

enum class NormMode { BN, GN, IN, LN, AGN };

std::string norm_mode_name(NormMode mode);
NormMode norm_mode_from_name(const std::string& name);

// State of one normalization layer. IN and LN are GN with G=C and G=1; they
// share the group-statistics arithmetic path exactly.
//
// AGN computes sigmoid(rho) * GN(x) + BN(x), both branches without their own
// affine, followed by the single shared per-channel affine. Only rho is added
// on top of a BN layer (plus the running statistics BN already keeps), so an
// upgrade from BN introduces no extra affine parameters.
struct NormState {
    NormMode mode = NormMode::BN;
    int channels = 0;
    int groups = 1; // GN/AGN; must divide channels

    std::vector<double> running_mean; // BN/AGN only
    std::vector<double> running_var;
    std::vector<double> scale; // per-channel affine
    std::vector<double> shift;
    std::vector<double> gscale; // accumulated gradients
    std::vector<double> gshift;

    double rho = -10.0; // AGN gate logit, one per layer
    double grho = 0.0;

    double momentum = 0.1;
    double eps = 1e-5;
    bool training = true;
};

// Fresh state: scale 1, shift 0, running mean 0, running var 1.
// For IN/LN the group count is derived from the mode and `groups` is ignored.
NormState make_norm_state(NormMode mode, int channels, int groups = 1);

// Batch normalization. Training mode normalizes with per-channel batch
// statistics over (N,H,W) and updates the running statistics by exponential
// moving average; eval mode uses the running statistics. Affine applied last.
Tensor4 batch_norm(const Tensor4& x, NormState& s);

// Group normalization (also IN/LN via the group count). Per-sample, per-group
// statistics over (group channels, H, W); no running statistics.
Tensor4 group_norm(const Tensor4& x, NormState& s);

// Additive group normalization: sigmoid(rho)*GN(x) + BN(x), shared affine.
// Running statistics are updated from the BN branch exactly as batch_norm.
Tensor4 agn(const Tensor4& x, NormState& s);

// Dispatch on s.mode.
Tensor4 norm_forward(const Tensor4& x, NormState& s);

// Analytic gradients for the active mode, including the full batch-statistics
// chain in training mode. Accumulates gscale/gshift/grho and returns grad_x.
// Internals are recomputed from x, so this must see the same x and state mode
// as the forward pass of the same step.
Tensor4 norm_backward(const Tensor4& x, NormState& s, const Tensor4& upstream);

// Reuses the BN running statistics and affine bit-exactly; only the gate logit
// is added. rho_init = -10 keeps the upgraded layer within sigma(-10) of the
// original BN response.
NormState bn_to_agn_upgrade(const NormState& bn_state, int groups,
                            double rho_init = -10.0);

// Flat text serialization; exact round trip.
void save_norm(const NormState& s, const std::string& path);
NormState load_norm(const std::string& path);

} // namespace vifuse
