#pragma once

#include <filesystem>

#include <torch/torch.h>

#include "cryoseg/config.hpp"
#include "cryoseg/model.hpp"

namespace cryoseg::pipeline {

/// Self-describing checkpoint container: format tag + version, config
/// text and epoch/seed header, parameter blobs, optimizer state.
void save_checkpoint(const std::filesystem::path& path, model::TripleUNet& net,
                     torch::optim::Adam* optimizer, const TrainConfig& config, int epoch);

struct LoadedCheckpoint {
    TrainConfig config;
    int epoch = 0;
    model::TripleUNet net{nullptr};
    std::string optimizer_blob;
};

/// Throws CheckpointError (with the format version in the message) on a
/// corrupt or foreign file.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace cryoseg::pipeline
