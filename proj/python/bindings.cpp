// numpy-facing bindings for the torch-free core: stain separation,
// contour derivation, instance post-processing and metrics.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <opencv2/core.hpp>

#include "cryoseg/data.hpp"
#include "cryoseg/metrics.hpp"
#include "cryoseg/postprocess.hpp"
#include "cryoseg/stain.hpp"

namespace py = pybind11;
using namespace cryoseg;

namespace {

cv::Mat mat_from_rgb(py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> a) {
    if (a.ndim() != 3 || a.shape(2) != 3)
        throw std::invalid_argument("expected an H x W x 3 uint8 array");
    cv::Mat m(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), CV_8UC3,
              const_cast<std::uint8_t*>(a.data()));
    return m.clone();
}

cv::Mat mat_from_f32(py::array_t<float, py::array::c_style | py::array::forcecast> a) {
    if (a.ndim() != 2) throw std::invalid_argument("expected an H x W float array");
    cv::Mat m(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), CV_32F,
              const_cast<float*>(a.data()));
    return m.clone();
}

cv::Mat mat_from_i32(py::array_t<std::int32_t, py::array::c_style | py::array::forcecast> a) {
    if (a.ndim() != 2) throw std::invalid_argument("expected an H x W int32 array");
    cv::Mat m(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), CV_32S,
              const_cast<std::int32_t*>(a.data()));
    return m.clone();
}

py::array f32_to_numpy(const cv::Mat& m) {
    py::array_t<float> out({m.rows, m.cols});
    std::memcpy(out.mutable_data(), m.ptr<float>(), sizeof(float) * m.rows * m.cols);
    return out;
}

py::array i32_to_numpy(const cv::Mat& m) {
    py::array_t<std::int32_t> out({m.rows, m.cols});
    std::memcpy(out.mutable_data(), m.ptr<std::int32_t>(),
                sizeof(std::int32_t) * m.rows * m.cols);
    return out;
}

py::array u8_to_numpy(const cv::Mat& m) {
    py::array_t<std::uint8_t> out({m.rows, m.cols});
    std::memcpy(out.mutable_data(), m.ptr<std::uint8_t>(),
                sizeof(std::uint8_t) * m.rows * m.cols);
    return out;
}

post::PostprocessParams make_params(double sigma, double fg_threshold, double contour_threshold,
                                    int min_instance_px, int background_dilation_px) {
    post::PostprocessParams p;
    p.smoothing.sigma = sigma;
    p.fg_threshold = fg_threshold;
    p.contour_threshold = contour_threshold;
    p.min_instance_px = min_instance_px;
    p.background_dilation_px = background_dilation_px;
    return p;
}

py::dict report_to_dict(const metrics::MetricReport& r) {
    py::dict d;
    d["aji"] = r.aji;
    d["pq"] = r.pq;
    d["sq"] = r.sq;
    d["rq"] = r.rq;
    d["dice"] = r.dice;
    d["tp"] = r.tp;
    d["fp"] = r.fp;
    d["fn"] = r.fn;
    return d;
}

}  // namespace

PYBIND11_MODULE(_cryoseg, m) {
    m.doc() = "nuclei instance segmentation core: stain separation, "
              "post-processing and instance metrics";

    m.def(
        "extract_hematoxylin",
        [](py::array image, double background, bool rescale) {
            cv::Mat rgb = mat_from_rgb(image);
            return f32_to_numpy(stain::extract_hematoxylin(
                rgb, stain::StainMatrix::ruifrok_johnston(), background, rescale));
        },
        py::arg("image"), py::arg("background") = 255.0, py::arg("rescale") = true,
        "Hematoxylin concentration map of an H x W x 3 RGB uint8 image, "
        "min-max rescaled to [0, 1].");

    m.def(
        "optical_density",
        [](py::array image, double background) {
            cv::Mat rgb = mat_from_rgb(image);
            cv::Mat od = stain::rgb_to_optical_density(rgb, background);
            std::vector<cv::Mat> ch(3);
            cv::split(od, ch);
            py::array_t<float> out({od.rows, od.cols, 3});
            auto r = out.mutable_unchecked<3>();
            for (int y = 0; y < od.rows; ++y)
                for (int x = 0; x < od.cols; ++x)
                    for (int c = 0; c < 3; ++c) r(y, x, c) = ch[c].at<float>(y, x);
            return out;
        },
        py::arg("image"), py::arg("background") = 255.0,
        "Beer-Lambert absorbance of an RGB uint8 image.");

    m.def(
        "mask_to_contours",
        [](py::array instances, int thickness) {
            return u8_to_numpy(data::mask_to_contours(mat_from_i32(instances), thickness));
        },
        py::arg("instances"), py::arg("thickness") = 2,
        "0/1 contour map of an int32 instance label map.");

    m.def(
        "gaussian_smooth",
        [](py::array map, double sigma, bool periodic) {
            post::SmoothingParams p{sigma,
                                    periodic ? post::Boundary::Periodic : post::Boundary::Reflect};
            return f32_to_numpy(post::gaussian_smooth(mat_from_f32(map), p));
        },
        py::arg("map"), py::arg("sigma") = 1.0, py::arg("periodic") = false);

    m.def(
        "segment_instances",
        [](py::array seg_prob, py::array contour_prob, double sigma, double fg_threshold,
           double contour_threshold, int min_instance_px, int background_dilation_px) {
            return i32_to_numpy(post::segment_instances(
                mat_from_f32(seg_prob), mat_from_f32(contour_prob),
                make_params(sigma, fg_threshold, contour_threshold, min_instance_px,
                            background_dilation_px)));
        },
        py::arg("seg_prob"), py::arg("contour_prob"), py::arg("sigma") = 1.0,
        py::arg("fg_threshold") = 0.5, py::arg("contour_threshold") = 0.5,
        py::arg("min_instance_px") = 10, py::arg("background_dilation_px") = 2,
        "Marker-controlled watershed over nucleus/contour probability maps; "
        "returns an int32 instance label map with labels 1..K.");

    m.def(
        "aji",
        [](py::array gt, py::array pred) {
            return metrics::aji(mat_from_i32(gt), mat_from_i32(pred));
        },
        py::arg("gt"), py::arg("pred"), "Aggregated Jaccard index of two label maps.");

    m.def(
        "dice",
        [](py::array gt, py::array pred) {
            return metrics::dice_score(mat_from_i32(gt), mat_from_i32(pred));
        },
        py::arg("gt"), py::arg("pred"), "Foreground Dice of two label maps.");

    m.def(
        "panoptic_quality",
        [](py::array gt, py::array pred) {
            return report_to_dict(metrics::panoptic_quality(mat_from_i32(gt), mat_from_i32(pred)));
        },
        py::arg("gt"), py::arg("pred"));

    m.def(
        "evaluate_pair",
        [](py::array gt, py::array pred) {
            return report_to_dict(metrics::evaluate_pair(mat_from_i32(gt), mat_from_i32(pred)));
        },
        py::arg("gt"), py::arg("pred"),
        "All instance metrics (aji, pq, sq, rq, dice, tp, fp, fn) as a dict.");
}
