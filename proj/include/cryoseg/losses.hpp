#pragma once

#include <torch/torch.h>

#include "cryoseg/config.hpp"
#include "cryoseg/model.hpp"

namespace cryoseg::losses {

/// Mean binary cross-entropy with natural log; predictions clipped to
/// [1e-7, 1 - 1e-7].
torch::Tensor bce_loss(const torch::Tensor& pred, const torch::Tensor& target);

/// 1 - 2*sum(xy) / (sum(x^2) + sum(y^2) + 1e-6).
torch::Tensor soft_dice_loss(const torch::Tensor& pred, const torch::Tensor& target);

struct LossBreakdown {
    torch::Tensor total;
    torch::Tensor rgb;     // bce(rgb_prob, seg_target)
    torch::Tensor h;       // soft_dice(contour_prob, contour_target)
    torch::Tensor seg_st;  // bce (default) or soft_dice of seg_prob
    torch::Tensor seg_sd;  // soft_dice(seg_prob, seg_target)
};

LossBreakdown total_loss(const model::BranchOutputs& outputs, const torch::Tensor& seg_target,
                         const torch::Tensor& contour_target, const LossWeights& weights,
                         SegStMode seg_st_mode = SegStMode::Bce);

}  // namespace cryoseg::losses
