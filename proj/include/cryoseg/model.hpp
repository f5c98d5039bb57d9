#pragma once

#include <torch/torch.h>

#include <vector>

#include "cryoseg/config.hpp"

namespace cryoseg::model {

struct BranchOutputs {
    torch::Tensor rgb_prob;      // N x 1 x H x W, nucleus probability
    torch::Tensor contour_prob;  // N x 1 x H x W, contour probability
    torch::Tensor seg_prob;      // N x 1 x H x W, final nucleus probability
};

/// Progressive dense feature aggregation block. Every internal layer
/// consumes the concatenation of the block inputs and all previous
/// layers' outputs and emits growth_rate channels. Carried (skip)
/// features are injected one layer at a time instead of all at the
/// first layer: they are split into layer_count-1 chunks and chunk j
/// becomes visible from layer j+1 on. Output channels =
/// in_new + in_carried + layer_count * growth_rate.
class PdfaBlockImpl : public torch::nn::Module {
public:
    PdfaBlockImpl(int in_new, int in_carried, int layer_count, int growth_rate);

    torch::Tensor forward(const torch::Tensor& new_features,
                          const torch::Tensor& carried_features = {});

    int in_channels() const { return in_new_ + in_carried_; }
    int carried_channels() const { return in_carried_; }
    int out_channels() const { return in_new_ + in_carried_ + layer_count_ * growth_; }
    int layer_count() const { return layer_count_; }

private:
    int in_new_, in_carried_, layer_count_, growth_;
    std::vector<int> carried_prefix_;  // carried channels visible before layer i
    torch::nn::ModuleList layers_;
};
TORCH_MODULE(PdfaBlock);

struct BranchResult {
    std::vector<torch::Tensor> encoder_features;  // levels 0..depth, level l at 1/2^l
    std::vector<torch::Tensor> decoder_features;  // levels 0..depth-1, full res at index 0
    torch::Tensor head_logits;                    // N x 1 x H x W
};

/// One U-Net tower: PDFA blocks at every fusion point, 2x2 max pooling,
/// transpose-convolution upsampling, 1x1 transitions keeping level l at
/// base * 2^min(l,3) channels. carried_* give the channel counts of
/// partner-branch features fused at each level (0 where none).
class UNetBranchImpl : public torch::nn::Module {
public:
    UNetBranchImpl(int in_channels, const NetworkConfig& config,
                   std::vector<int> enc_carried = {}, std::vector<int> dec_carried = {});

    BranchResult forward(const torch::Tensor& input,
                         const std::vector<torch::Tensor>& enc_carried = {},
                         const std::vector<torch::Tensor>& dec_carried = {});

    int level_channels(int level) const;

private:
    NetworkConfig config_;
    std::vector<int> enc_carried_, dec_carried_;
    torch::nn::ModuleList enc_blocks_, enc_transitions_;
    torch::nn::ModuleList ups_, dec_blocks_, dec_transitions_;
    torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(UNetBranch);

/// RGB branch on the 3-channel patch, H branch on the 1-channel
/// hematoxylin map, segmentation branch fusing both towers' features at
/// every resolution level through PDFA blocks.
class TripleUNetImpl : public torch::nn::Module {
public:
    explicit TripleUNetImpl(const NetworkConfig& config);

    /// patch: N x 3 x H x W in [0,1]; hematoxylin: N x 1 x H x W.
    BranchOutputs forward(const torch::Tensor& patch, const torch::Tensor& hematoxylin);

    const NetworkConfig& config() const { return config_; }

    UNetBranch rgb_branch{nullptr}, h_branch{nullptr}, seg_branch{nullptr};

private:
    NetworkConfig config_;
};
TORCH_MODULE(TripleUNet);

/// (in_channels, out_channels, layer_count) for every PDFA block in a
/// module tree, for channel bookkeeping audits.
struct PdfaAudit {
    std::string name;
    int in_channels, carried_channels, out_channels, layer_count;
};
std::vector<PdfaAudit> audit_pdfa_blocks(const torch::nn::Module& root);

}  // namespace cryoseg::model
