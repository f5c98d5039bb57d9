#include "cryoseg/stain.hpp"

#include <cmath>
#include <stdexcept>

namespace cryoseg::stain {

namespace {

std::array<double, 3> normalized(std::array<double, 3> v) {
    double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    if (n <= 0.0) throw std::invalid_argument("stain vector has zero norm");
    return {v[0] / n, v[1] / n, v[2] / n};
}

}  // namespace

StainMatrix StainMatrix::ruifrok_johnston() {
    std::array<double, 3> h = normalized({0.65, 0.70, 0.29});
    std::array<double, 3> e = normalized({0.07, 0.99, 0.11});
    std::array<double, 3> r = normalized({h[1] * e[2] - h[2] * e[1],
                                          h[2] * e[0] - h[0] * e[2],
                                          h[0] * e[1] - h[1] * e[0]});
    return StainMatrix{{h, e, r}};
}

cv::Matx33d StainMatrix::as_matx() const {
    cv::Matx33d m;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) m(i, j) = rows[i][j];
    return m;
}

cv::Mat rgb_to_optical_density(const cv::Mat& patch, double background_intensity) {
    if (background_intensity <= 0.0)
        throw std::invalid_argument("background_intensity must be positive");
    if (patch.channels() != 3)
        throw std::invalid_argument("rgb_to_optical_density expects a 3-channel patch");

    cv::Mat f;
    patch.convertTo(f, CV_32FC3);

    cv::Mat od(f.rows, f.cols, CV_32FC3);
    const float inv_bg = static_cast<float>(1.0 / background_intensity);
    const float inv_ln10 = static_cast<float>(1.0 / std::log(10.0));
    for (int y = 0; y < f.rows; ++y) {
        const cv::Vec3f* in = f.ptr<cv::Vec3f>(y);
        cv::Vec3f* out = od.ptr<cv::Vec3f>(y);
        for (int x = 0; x < f.cols; ++x) {
            for (int c = 0; c < 3; ++c) {
                float i = std::max(in[x][c], 1.0f);  // whole-unit intensity floor
                float v = -std::log(i * inv_bg) * inv_ln10;
                out[x][c] = std::max(v, 0.0f);
            }
        }
    }
    return od;
}

namespace {

StainMaps deconvolve_impl(const cv::Mat& od, const StainMatrix& stains, bool clamp) {
    if (od.type() != CV_32FC3)
        throw std::invalid_argument("deconvolve_stains expects a CV_32FC3 optical density map");

    // od = M^T c per pixel; solve with the pseudo-inverse of M^T.
    cv::Matx33d mt = stains.as_matx().t();
    cv::Matx33d pinv;
    if (cv::invert(mt, pinv, cv::DECOMP_SVD) == 0.0)
        throw std::invalid_argument("stain matrix is singular");
    // Reject near-singular bases that SVD-invert "successfully".
    cv::Matx33d ident = pinv * mt;
    double dev = 0.0;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) dev = std::max(dev, std::abs(ident(i, j) - (i == j ? 1.0 : 0.0)));
    if (dev > 1e-6) throw std::invalid_argument("stain matrix is singular");

    StainMaps maps;
    maps.hematoxylin.create(od.rows, od.cols, CV_32F);
    maps.eosin.create(od.rows, od.cols, CV_32F);
    maps.residual.create(od.rows, od.cols, CV_32F);

    for (int y = 0; y < od.rows; ++y) {
        const cv::Vec3f* in = od.ptr<cv::Vec3f>(y);
        float* h = maps.hematoxylin.ptr<float>(y);
        float* e = maps.eosin.ptr<float>(y);
        float* r = maps.residual.ptr<float>(y);
        for (int x = 0; x < od.cols; ++x) {
            cv::Vec3d c = pinv * cv::Vec3d(in[x][0], in[x][1], in[x][2]);
            if (clamp) {
                c[0] = std::max(c[0], 0.0);
                c[1] = std::max(c[1], 0.0);
                c[2] = std::max(c[2], 0.0);
            }
            h[x] = static_cast<float>(c[0]);
            e[x] = static_cast<float>(c[1]);
            r[x] = static_cast<float>(c[2]);
        }
    }
    return maps;
}

}  // namespace

StainMaps deconvolve_stains(const cv::Mat& od, const StainMatrix& stains) {
    return deconvolve_impl(od, stains, true);
}

StainMaps deconvolve_stains_unclamped(const cv::Mat& od, const StainMatrix& stains) {
    return deconvolve_impl(od, stains, false);
}

cv::Mat extract_hematoxylin(const cv::Mat& patch, const StainMatrix& stains,
                            double background_intensity, bool rescale) {
    cv::Mat od = rgb_to_optical_density(patch, background_intensity);
    cv::Mat h = deconvolve_stains(od, stains).hematoxylin;
    if (!rescale) return h;

    double lo, hi;
    cv::minMaxLoc(h, &lo, &hi);
    if (hi - lo <= 0.0) return cv::Mat::zeros(h.rows, h.cols, CV_32F);
    cv::Mat out;
    h.convertTo(out, CV_32F, 1.0 / (hi - lo), -lo / (hi - lo));
    return out;
}

}  // namespace cryoseg::stain
