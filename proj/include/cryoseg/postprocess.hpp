#pragma once

#include <opencv2/core.hpp>

namespace cryoseg::post {

enum class Boundary { Reflect, Periodic };

struct SmoothingParams {
    double sigma = 1.0;
    Boundary boundary = Boundary::Reflect;
};

/// Marker layout for the watershed. labels: CV_32S, 0 = unknown,
/// 1..num_seeds = sure-instance seeds, background_label = sure background.
/// foreground is the thresholded nucleus mask the flood is confined to.
struct MarkerMap {
    cv::Mat labels;
    cv::Mat foreground;  // CV_8U, 0/1
    int num_seeds = 0;
    int background_label = 0;
};

struct PostprocessParams {
    SmoothingParams smoothing;
    double fg_threshold = 0.5;
    double contour_threshold = 0.5;
    int min_instance_px = 10;
    int background_dilation_px = 2;
};

/// Separable Gaussian convolution, kernel truncated at ceil(3*sigma) and
/// renormalized. Throws std::invalid_argument for sigma <= 0.
cv::Mat gaussian_smooth(const cv::Mat& map, const SmoothingParams& params);

/// Seeds = 4-connected components of (seg >= fg_threshold AND
/// contour < contour_threshold) with components under min_instance_px
/// dropped; sure background = complement of the foreground dilated by
/// background_dilation_px (Chebyshev); everything else stays 0.
MarkerMap make_markers(const cv::Mat& seg_prob, const cv::Mat& contour_prob,
                       const PostprocessParams& params);

/// Priority-flood watershed on elevation = -gaussian_smooth(seg_prob),
/// 4-connected, confined to the marker foreground. Ties broken in raster
/// order. Zero seeds yields an all-zero map.
cv::Mat watershed_segment(const cv::Mat& seg_prob, const MarkerMap& markers,
                          const SmoothingParams& smoothing = {});

/// smooth -> markers -> watershed; drops instances under min_instance_px
/// and compacts labels to 1..K.
cv::Mat segment_instances(const cv::Mat& seg_prob, const cv::Mat& contour_prob,
                          const PostprocessParams& params = {});

/// 4-connected component labeling of a CV_8U binary map (helper shared
/// with marker construction; labels in raster-scan discovery order).
cv::Mat label_components(const cv::Mat& binary, int min_size = 0);

}  // namespace cryoseg::post
