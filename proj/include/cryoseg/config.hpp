#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "cryoseg/data.hpp"
#include "cryoseg/postprocess.hpp"

namespace cryoseg {

struct NetworkConfig {
    int depth = 4;
    int base_channels = 32;
    int growth_rate = 32;
    int input_size = 256;
    bool seg_takes_raw_input = false;

    void validate() const;
};

struct LossWeights {
    double lambda_rgb = 1.0;
    double lambda_h = 1.0;
    double lambda_seg_st = 1.0;
    double lambda_seg_sd = 1.0;

    void validate() const;
};

enum class SchedulerKind { Exponential, ReduceOnPlateau, CosineAnnealing, CosineAnnealingRestarts };
enum class SegStMode { Bce, SoftDice };

SchedulerKind scheduler_from_string(const std::string& s);
std::string to_string(SchedulerKind k);

struct TrainConfig {
    int batch_size = 10;
    double lr_min = 0.001;
    double lr_max = 0.002;
    SchedulerKind scheduler = SchedulerKind::CosineAnnealing;
    int epochs = 100;
    int early_stop_patience = 20;
    std::uint64_t seed = 0;
    int max_batches_per_epoch = 0;  // 0 = no cap
    bool rescale_hematoxylin = true;
    SegStMode seg_st_mode = SegStMode::Bce;

    NetworkConfig network;
    LossWeights loss_weights;
    data::AugmentConfig augment;
    bool augment_enabled = true;
    post::PostprocessParams postprocess;

    void validate() const;

    /// Flat key=value serialization; every default appears explicitly.
    std::string to_text() const;
    static TrainConfig from_text(const std::string& text);

    static TrainConfig load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    /// FNV-1a hash of the canonical serialization.
    std::uint64_t hash() const;
};

}  // namespace cryoseg
