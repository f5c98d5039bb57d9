#include "cryoseg/losses.hpp"

#include <stdexcept>

namespace cryoseg::losses {

namespace {

constexpr double kClipEps = 1e-7;
constexpr double kDiceSmooth = 1e-6;

void check_shapes(const torch::Tensor& pred, const torch::Tensor& target) {
    if (!pred.defined() || !target.defined() || pred.sizes() != target.sizes())
        throw std::invalid_argument("prediction and target shapes mismatch");
}

}  // namespace

torch::Tensor bce_loss(const torch::Tensor& pred, const torch::Tensor& target) {
    check_shapes(pred, target);
    torch::Tensor x = pred.clamp(kClipEps, 1.0 - kClipEps);
    return -(target * torch::log(x) + (1.0 - target) * torch::log(1.0 - x)).mean();
}

torch::Tensor soft_dice_loss(const torch::Tensor& pred, const torch::Tensor& target) {
    check_shapes(pred, target);
    torch::Tensor num = 2.0 * (pred * target).sum();
    torch::Tensor den = (pred * pred).sum() + (target * target).sum() + kDiceSmooth;
    return 1.0 - num / den;
}

LossBreakdown total_loss(const model::BranchOutputs& outputs, const torch::Tensor& seg_target,
                         const torch::Tensor& contour_target, const LossWeights& weights,
                         SegStMode seg_st_mode) {
    weights.validate();
    LossBreakdown b;
    b.rgb = bce_loss(outputs.rgb_prob, seg_target);
    b.h = soft_dice_loss(outputs.contour_prob, contour_target);
    b.seg_st = seg_st_mode == SegStMode::Bce ? bce_loss(outputs.seg_prob, seg_target)
                                             : soft_dice_loss(outputs.seg_prob, seg_target);
    b.seg_sd = soft_dice_loss(outputs.seg_prob, seg_target);
    b.total = weights.lambda_rgb * b.rgb + weights.lambda_h * b.h +
              weights.lambda_seg_st * b.seg_st + weights.lambda_seg_sd * b.seg_sd;
    return b;
}

}  // namespace cryoseg::losses
