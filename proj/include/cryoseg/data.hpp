#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>
#include <opencv2/core.hpp>

namespace cryoseg::data {

/// Raised when the on-disk dataset violates the expected layout.
class DatasetError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Sample {
    std::string id;
    std::string organ;       // filename prefix before the first underscore
    cv::Mat image;           // CV_8UC3
    cv::Mat instances;       // CV_32S, 0 = background
    cv::Mat binary_mask;     // CV_8U, 0/1
    cv::Mat contours;        // CV_8U, 0/1
};

struct FoldSplit {
    struct Fold {
        std::string organ;
        std::vector<std::string> holdout;   // sample ids
        std::vector<std::string> training;  // remaining ids
    };
    std::vector<Fold> folds;
};

/// One 256x256 (configurable) training patch cut from a sample.
struct PatchExample {
    std::string sample_id;
    int patch_index = 0;
    cv::Mat image;      // CV_8UC3, target x target
    cv::Mat instances;  // CV_32S
};

struct AugmentConfig {
    double p_hflip = 0.5;
    double p_vflip = 0.5;
    bool rotate90 = true;
    double p_crop = 0.5;
    int crop_size = 224;
    double p_elastic = 0.5;
    double elastic_alpha = 34.0;
    double elastic_sigma = 4.0;

    static AugmentConfig disabled() {
        AugmentConfig c;
        c.p_hflip = c.p_vflip = c.p_crop = c.p_elastic = 0.0;
        c.rotate90 = false;
        return c;
    }
};

struct AugmentedExample {
    std::string sample_id;
    int patch_index = 0;
    std::uint64_t seed = 0;
    cv::Mat image;           // CV_32FC3 in [0,1]
    cv::Mat hematoxylin;     // CV_32F in [0,1]
    cv::Mat seg_target;      // CV_32F, 0/1
    cv::Mat contour_target;  // CV_32F, 0/1
};

/// Loads root/images and root/masks with matching basenames. Mask files
/// are label-encoded 8/16-bit single-channel images. Throws DatasetError
/// naming the offending file for orphans and dimension mismatches.
std::vector<Sample> load_dataset(const std::filesystem::path& root);

/// A foreground pixel is contour iff a pixel with a different instance
/// label (including background) lies within `thickness` in Chebyshev
/// distance. Background pixels are never contour.
cv::Mat mask_to_contours(const cv::Mat& instances, int thickness = 2);

/// Non-overlapping 4x4 grid of 128x128 patches of a 512x512 sample, each
/// resized to target_size (bilinear image, nearest labels); instance
/// labels re-compacted per patch.
std::vector<PatchExample> crop_into_patches(const Sample& sample, int target_size = 256);

/// Derives hematoxylin and both supervision targets for a patch and
/// applies a seeded random composition of flip / mirror / 90-degree
/// rotation / random crop / elastic deformation identically to all four
/// arrays. Deterministic given the seed.
AugmentedExample augment(const PatchExample& patch, std::uint64_t rng_seed,
                         const AugmentConfig& config = {});

/// Geometric part of augment() applied to an already-built example
/// (image + hematoxylin + targets). Used by augment() and by tests.
AugmentedExample augment_example(const AugmentedExample& example, std::uint64_t rng_seed,
                                 const AugmentConfig& config = {});

/// Organ-pure 10-fold split: fold k holds out the 3 samples of organ k,
/// organs sorted lexicographically. Throws std::invalid_argument if any
/// organ does not have exactly 3 samples.
FoldSplit make_folds(const std::vector<Sample>& samples);

void write_folds(const FoldSplit& folds, const std::filesystem::path& path);
FoldSplit read_folds(const std::filesystem::path& path);

}  // namespace cryoseg::data
