#include "cryoseg/model.hpp"

#include <algorithm>
#include <stdexcept>

namespace cryoseg::model {

PdfaBlockImpl::PdfaBlockImpl(int in_new, int in_carried, int layer_count, int growth_rate)
    : in_new_(in_new), in_carried_(in_carried), layer_count_(layer_count), growth_(growth_rate) {
    if (layer_count_ < 2) throw std::invalid_argument("PDFA block needs at least 2 layers");

    // carried chunks: chunk j (1-based) becomes visible from layer j+1
    int chunks = layer_count_ - 1;
    carried_prefix_.assign(layer_count_ + 1, 0);
    for (int i = 1; i <= layer_count_; ++i) {
        int visible = std::min(i - 1, chunks);
        carried_prefix_[i] = in_carried_ > 0 ? (in_carried_ * visible) / chunks : 0;
    }

    for (int i = 1; i <= layer_count_; ++i) {
        int in_ch = in_new_ + (i - 1) * growth_ + carried_prefix_[i];
        layers_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch, growth_, 3).padding(1)));
    }
    register_module("layers", layers_);
}

torch::Tensor PdfaBlockImpl::forward(const torch::Tensor& new_features,
                                     const torch::Tensor& carried_features) {
    bool has_carried = carried_features.defined() && carried_features.numel() > 0;
    if ((in_carried_ > 0) != has_carried)
        throw std::invalid_argument("PDFA block carried-feature mismatch");
    if (has_carried && (carried_features.size(2) != new_features.size(2) ||
                        carried_features.size(3) != new_features.size(3)))
        throw std::invalid_argument("PDFA carried features have mismatched spatial size");

    std::vector<torch::Tensor> produced;
    produced.reserve(layer_count_);
    for (int i = 1; i <= layer_count_; ++i) {
        std::vector<torch::Tensor> inputs = {new_features};
        if (carried_prefix_[i] > 0)
            inputs.push_back(carried_features.narrow(1, 0, carried_prefix_[i]));
        for (const torch::Tensor& t : produced) inputs.push_back(t);
        torch::Tensor x = torch::cat(inputs, 1);
        auto conv = std::static_pointer_cast<torch::nn::Conv2dImpl>(layers_[i - 1]);
        produced.push_back(torch::relu(conv->forward(x)));
    }

    std::vector<torch::Tensor> outs = {new_features};
    if (has_carried) outs.push_back(carried_features);
    for (const torch::Tensor& t : produced) outs.push_back(t);
    return torch::cat(outs, 1);
}

UNetBranchImpl::UNetBranchImpl(int in_channels, const NetworkConfig& config,
                               std::vector<int> enc_carried, std::vector<int> dec_carried)
    : config_(config), enc_carried_(std::move(enc_carried)), dec_carried_(std::move(dec_carried)) {
    config_.validate();
    enc_carried_.resize(config_.depth + 1, 0);
    dec_carried_.resize(config_.depth, 0);

    int prev = in_channels;
    for (int l = 0; l <= config_.depth; ++l) {
        int carried = enc_carried_[l];
        int layer_count = carried > 0 ? 4 : 3;
        auto block = PdfaBlock(prev, carried, layer_count, config_.growth_rate);
        enc_blocks_->push_back(block);
        enc_transitions_->push_back(torch::nn::Conv2d(
            torch::nn::Conv2dOptions(block->out_channels(), level_channels(l), 1)));
        prev = level_channels(l);
    }
    for (int l = config_.depth - 1; l >= 0; --l) {
        ups_->push_back(torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(
            level_channels(l + 1), level_channels(l), 2).stride(2)));
        int carried = level_channels(l) + dec_carried_[l];  // skip + partner features
        auto block = PdfaBlock(level_channels(l), carried, 4, config_.growth_rate);
        dec_blocks_->push_back(block);
        dec_transitions_->push_back(torch::nn::Conv2d(
            torch::nn::Conv2dOptions(block->out_channels(), level_channels(l), 1)));
    }
    head_ = register_module(
        "head", torch::nn::Conv2d(torch::nn::Conv2dOptions(level_channels(0), 1, 1)));
    register_module("enc_blocks", enc_blocks_);
    register_module("enc_transitions", enc_transitions_);
    register_module("ups", ups_);
    register_module("dec_blocks", dec_blocks_);
    register_module("dec_transitions", dec_transitions_);
}

int UNetBranchImpl::level_channels(int level) const {
    return config_.base_channels * (1 << std::min(level, 3));
}

BranchResult UNetBranchImpl::forward(const torch::Tensor& input,
                                     const std::vector<torch::Tensor>& enc_carried,
                                     const std::vector<torch::Tensor>& dec_carried) {
    if (input.dim() != 4) throw std::invalid_argument("branch input must be N x C x H x W");
    long h = input.size(2), w = input.size(3);
    if (h % (1 << config_.depth) != 0 || w % (1 << config_.depth) != 0)
        throw std::invalid_argument("branch input size must be divisible by 2^depth");

    BranchResult r;
    torch::Tensor x = input;
    for (int l = 0; l <= config_.depth; ++l) {
        if (l > 0) x = torch::max_pool2d(x, 2);
        torch::Tensor carried;
        if (enc_carried_[l] > 0) carried = enc_carried.at(l);
        auto block = std::static_pointer_cast<PdfaBlockImpl>(enc_blocks_[l]);
        auto trans = std::static_pointer_cast<torch::nn::Conv2dImpl>(enc_transitions_[l]);
        x = torch::relu(trans->forward(block->forward(x, carried)));
        r.encoder_features.push_back(x);
    }

    r.decoder_features.resize(config_.depth);
    for (int i = 0; i < config_.depth; ++i) {
        int l = config_.depth - 1 - i;
        auto up = std::static_pointer_cast<torch::nn::ConvTranspose2dImpl>(ups_[i]);
        x = up->forward(x);
        torch::Tensor carried = r.encoder_features[l];
        if (dec_carried_[l] > 0) carried = torch::cat({carried, dec_carried.at(l)}, 1);
        auto block = std::static_pointer_cast<PdfaBlockImpl>(dec_blocks_[i]);
        auto trans = std::static_pointer_cast<torch::nn::Conv2dImpl>(dec_transitions_[i]);
        x = torch::relu(trans->forward(block->forward(x, carried)));
        r.decoder_features[l] = x;
    }
    r.head_logits = head_->forward(x);
    return r;
}

TripleUNetImpl::TripleUNetImpl(const NetworkConfig& config) : config_(config) {
    config_.validate();
    rgb_branch = register_module("rgb_branch", UNetBranch(3, config_));
    h_branch = register_module("h_branch", UNetBranch(1, config_));

    // the segmentation tower fuses both partners' features at every level
    std::vector<int> enc_carried(config_.depth + 1), dec_carried(config_.depth);
    for (int l = 1; l <= config_.depth; ++l)
        enc_carried[l] = 2 * rgb_branch->level_channels(l);
    for (int l = 0; l < config_.depth; ++l)
        dec_carried[l] = 2 * rgb_branch->level_channels(l);
    int seg_in = 2 * rgb_branch->level_channels(0) + (config_.seg_takes_raw_input ? 3 : 0);
    seg_branch = register_module(
        "seg_branch", UNetBranch(seg_in, config_, enc_carried, dec_carried));
}

BranchOutputs TripleUNetImpl::forward(const torch::Tensor& patch,
                                      const torch::Tensor& hematoxylin) {
    if (patch.dim() != 4 || hematoxylin.dim() != 4 || patch.size(2) != hematoxylin.size(2) ||
        patch.size(3) != hematoxylin.size(3) || patch.size(0) != hematoxylin.size(0))
        throw std::invalid_argument("patch and hematoxylin shapes mismatch");

    BranchResult rgb = rgb_branch->forward(patch);
    BranchResult hem = h_branch->forward(hematoxylin);

    std::vector<torch::Tensor> enc_carried(config_.depth + 1), dec_carried(config_.depth);
    for (int l = 1; l <= config_.depth; ++l)
        enc_carried[l] = torch::cat({rgb.encoder_features[l], hem.encoder_features[l]}, 1);
    for (int l = 0; l < config_.depth; ++l)
        dec_carried[l] = torch::cat({rgb.decoder_features[l], hem.decoder_features[l]}, 1);

    torch::Tensor seg_in = torch::cat({rgb.encoder_features[0], hem.encoder_features[0]}, 1);
    if (config_.seg_takes_raw_input) seg_in = torch::cat({seg_in, patch}, 1);
    BranchResult seg = seg_branch->forward(seg_in, enc_carried, dec_carried);

    return {torch::sigmoid(rgb.head_logits), torch::sigmoid(hem.head_logits),
            torch::sigmoid(seg.head_logits)};
}

std::vector<PdfaAudit> audit_pdfa_blocks(const torch::nn::Module& root) {
    std::vector<PdfaAudit> out;
    for (const auto& item : root.named_modules("", false)) {
        auto block = std::dynamic_pointer_cast<PdfaBlockImpl>(item.value());
        if (block)
            out.push_back({item.key(), block->in_channels(), block->carried_channels(),
                           block->out_channels(), block->layer_count()});
    }
    return out;
}

}  // namespace cryoseg::model
