#pragma once

#include <array>
#include <opencv2/core.hpp>

namespace cryoseg::stain {

/// Stain basis in optical-density space. Rows are unit vectors over the
/// RGB channels: hematoxylin, eosin and a residual orthogonal to both.
struct StainMatrix {
    std::array<std::array<double, 3>, 3> rows;

    /// Ruifrok-Johnston H&E vectors with the residual as the normalized
    /// cross product of the first two.
    static StainMatrix ruifrok_johnston();

    cv::Matx33d as_matx() const;
};

struct StainMaps {
    cv::Mat hematoxylin;  // CV_32F, H x W
    cv::Mat eosin;        // CV_32F, H x W
    cv::Mat residual;     // CV_32F, H x W
};

/// Beer-Lambert absorbance: od[c] = -log10(max(I[c], 1) / background).
/// Input is CV_8UC3 or CV_32FC3 with channels in [0, 255]; output is
/// CV_32FC3, clamped to be non-negative.
cv::Mat rgb_to_optical_density(const cv::Mat& patch, double background_intensity = 255.0);

/// Per-pixel least-squares stain concentrations solving od = M^T c.
/// Negative concentrations are clamped to 0. Throws std::invalid_argument
/// if the stain matrix is singular.
StainMaps deconvolve_stains(const cv::Mat& od, const StainMatrix& stains);

/// Unclamped variant used by round-trip checks: returns the three raw
/// concentration maps without the non-negativity clamp.
StainMaps deconvolve_stains_unclamped(const cv::Mat& od, const StainMatrix& stains);

/// Hematoxylin concentration of a patch, min-max rescaled to [0, 1] per
/// patch. A constant concentration map rescales to all zeros.
cv::Mat extract_hematoxylin(const cv::Mat& patch,
                            const StainMatrix& stains = StainMatrix::ruifrok_johnston(),
                            double background_intensity = 255.0,
                            bool rescale = true);

}  // namespace cryoseg::stain
