#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "cryoseg/config.hpp"
#include "cryoseg/data.hpp"
#include "cryoseg/metrics.hpp"

namespace cryoseg::pipeline {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct EpochRecord {
    int epoch = 0;
    double lr = 0.0;
    double loss_total = 0.0, loss_rgb = 0.0, loss_h = 0.0, loss_seg_st = 0.0, loss_seg_sd = 0.0;
    double val_aji = 0.0, val_pq = 0.0, val_dice = 0.0;
};

struct RunRecord {
    int fold = 0;
    std::string organ;
    std::uint64_t config_hash = 0;
    std::string status;  // "complete" or "aborted:<reason>"
    double wall_seconds = 0.0;
    int best_epoch = -1;
    double best_val_aji = 0.0;
    std::string checkpoint_path;
    std::vector<EpochRecord> epochs;

    void save(const std::filesystem::path& path) const;
    static RunRecord load(const std::filesystem::path& path);
};

/// Trains one fold and persists the best checkpoint (selected by
/// hold-out AJI) plus the run record under out_dir.
RunRecord train_fold(const std::vector<data::Sample>& samples,
                     const data::FoldSplit::Fold& fold, int fold_index,
                     const TrainConfig& config, const std::filesystem::path& out_dir);

/// Loaded checkpoint handle for inference.
class Inferencer {
public:
    explicit Inferencer(const std::filesystem::path& checkpoint);
    ~Inferencer();
    Inferencer(Inferencer&&) noexcept;

    const TrainConfig& config() const;

    /// 512x512 RGB image -> instance label map. Tiles into the 4x4 grid,
    /// forwards each patch, stitches probabilities back to 512-space and
    /// post-processes.
    cv::Mat segment(const cv::Mat& image) const;

    /// Stitched probability maps before post-processing (seg, contour).
    std::pair<cv::Mat, cv::Mat> probabilities(const cv::Mat& image) const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

/// prepare: folds file + contour and hematoxylin caches.
void prepare(const std::filesystem::path& dataset_root, const std::filesystem::path& out_dir);

/// infer every image under images_dir, writing 16-bit label maps.
void infer_dir(const std::filesystem::path& checkpoint, const std::filesystem::path& images_dir,
               const std::filesystem::path& out_dir);

/// Per-image metrics plus organ/fold aggregates written as a delimited
/// report. Prediction and ground-truth label maps are matched by
/// basename.
void evaluate_dirs(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir,
                   const std::filesystem::path& report_path,
                   const std::filesystem::path& folds_file = {});

struct CrossvalResult {
    std::vector<RunRecord> runs;
    metrics::Aggregates aggregates;
};

/// Full organ-stratified 10-fold protocol: train, infer and evaluate
/// every fold; folds whose run record matches the config hash are
/// skipped. Emits report.csv, fold_table.txt and organ_table.txt.
CrossvalResult crossval(const std::filesystem::path& dataset_root, const TrainConfig& config,
                        const std::filesystem::path& out_dir);

/// Reference scores echoed in reports for comparison.
inline constexpr double kBaselineAji = 0.525;
inline constexpr double kBaselinePq = 0.477;
inline constexpr double kTripleUnetPaperAji = 0.6741;
inline constexpr double kTripleUnetPaperPq = 0.5056;

cv::Mat read_label_image(const std::filesystem::path& path);
void write_label_image(const std::filesystem::path& path, const cv::Mat& labels);

/// Compute device name from CRYOSEG_DEVICE (defaults to "cpu").
std::string device_name();

}  // namespace cryoseg::pipeline
