#include "cryoseg/postprocess.hpp"

#include <cmath>
#include <queue>
#include <stdexcept>
#include <vector>

namespace cryoseg::post {

namespace {

int wrap_index(int i, int n, Boundary b) {
    if (i >= 0 && i < n) return i;
    if (b == Boundary::Periodic) return ((i % n) + n) % n;
    // reflect-101: ... 2 1 | 0 1 2 ... n-1 | n-2 n-3 ...
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * (n - 1) - i;
    }
    return i;
}

std::vector<float> gaussian_kernel(double sigma) {
    int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<float> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        double v = std::exp(-(i * i) / (2.0 * sigma * sigma));
        k[i + radius] = static_cast<float>(v);
        sum += v;
    }
    for (float& v : k) v = static_cast<float>(v / sum);
    return k;
}

}  // namespace

cv::Mat gaussian_smooth(const cv::Mat& map, const SmoothingParams& params) {
    if (params.sigma <= 0.0) throw std::invalid_argument("sigma must be positive");
    cv::Mat in;
    map.convertTo(in, CV_32F);

    std::vector<float> k = gaussian_kernel(params.sigma);
    int radius = static_cast<int>(k.size() / 2);

    cv::Mat tmp(in.rows, in.cols, CV_32F);
    for (int y = 0; y < in.rows; ++y) {
        const float* src = in.ptr<float>(y);
        float* dst = tmp.ptr<float>(y);
        for (int x = 0; x < in.cols; ++x) {
            double acc = 0.0;
            for (int d = -radius; d <= radius; ++d)
                acc += k[d + radius] * src[wrap_index(x + d, in.cols, params.boundary)];
            dst[x] = static_cast<float>(acc);
        }
    }
    cv::Mat out(in.rows, in.cols, CV_32F);
    for (int x = 0; x < in.cols; ++x) {
        for (int y = 0; y < in.rows; ++y) {
            double acc = 0.0;
            for (int d = -radius; d <= radius; ++d)
                acc += k[d + radius] * tmp.at<float>(wrap_index(y + d, in.rows, params.boundary), x);
            out.at<float>(y, x) = static_cast<float>(acc);
        }
    }
    return out;
}

cv::Mat label_components(const cv::Mat& binary, int min_size) {
    cv::Mat labels = cv::Mat::zeros(binary.rows, binary.cols, CV_32S);
    int next = 0;
    std::vector<cv::Point> stack;
    std::vector<cv::Point> members;
    for (int y = 0; y < binary.rows; ++y) {
        for (int x = 0; x < binary.cols; ++x) {
            if (binary.at<uchar>(y, x) == 0 || labels.at<int>(y, x) != 0) continue;
            ++next;
            stack.assign(1, {x, y});
            members.clear();
            labels.at<int>(y, x) = next;
            while (!stack.empty()) {
                cv::Point p = stack.back();
                stack.pop_back();
                members.push_back(p);
                const int dx[4] = {1, -1, 0, 0};
                const int dy[4] = {0, 0, 1, -1};
                for (int i = 0; i < 4; ++i) {
                    int nx = p.x + dx[i], ny = p.y + dy[i];
                    if (nx < 0 || ny < 0 || nx >= binary.cols || ny >= binary.rows) continue;
                    if (binary.at<uchar>(ny, nx) == 0 || labels.at<int>(ny, nx) != 0) continue;
                    labels.at<int>(ny, nx) = next;
                    stack.push_back({nx, ny});
                }
            }
            if (static_cast<int>(members.size()) < min_size) {
                // -1 marks visited-but-dropped so the scan does not re-flood
                for (cv::Point p : members) labels.at<int>(p.y, p.x) = -1;
                --next;
            }
        }
    }
    for (int y = 0; y < labels.rows; ++y)
        for (int x = 0; x < labels.cols; ++x) {
            int& l = labels.at<int>(y, x);
            if (l < 0) l = 0;
        }
    return labels;
}

MarkerMap make_markers(const cv::Mat& seg_prob, const cv::Mat& contour_prob,
                       const PostprocessParams& params) {
    if (seg_prob.size() != contour_prob.size())
        throw std::invalid_argument("probability maps have mismatched shapes");
    cv::Mat seg, con;
    seg_prob.convertTo(seg, CV_32F);
    contour_prob.convertTo(con, CV_32F);

    MarkerMap m;
    m.foreground.create(seg.rows, seg.cols, CV_8U);
    cv::Mat seed_mask(seg.rows, seg.cols, CV_8U);
    for (int y = 0; y < seg.rows; ++y) {
        for (int x = 0; x < seg.cols; ++x) {
            bool fg = seg.at<float>(y, x) >= static_cast<float>(params.fg_threshold);
            m.foreground.at<uchar>(y, x) = fg ? 1 : 0;
            seed_mask.at<uchar>(y, x) =
                (fg && con.at<float>(y, x) < static_cast<float>(params.contour_threshold)) ? 1 : 0;
        }
    }

    m.labels = label_components(seed_mask, params.min_instance_px);
    double max_label;
    cv::minMaxLoc(m.labels, nullptr, &max_label);
    m.num_seeds = static_cast<int>(max_label);
    m.background_label = m.num_seeds + 1;

    // sure background = complement of the Chebyshev-dilated foreground
    int r = params.background_dilation_px;
    for (int y = 0; y < seg.rows; ++y) {
        for (int x = 0; x < seg.cols; ++x) {
            bool near_fg = false;
            for (int dy = -r; dy <= r && !near_fg; ++dy)
                for (int dx = -r; dx <= r && !near_fg; ++dx) {
                    int ny = y + dy, nx = x + dx;
                    if (ny < 0 || nx < 0 || ny >= seg.rows || nx >= seg.cols) continue;
                    near_fg = m.foreground.at<uchar>(ny, nx) != 0;
                }
            if (!near_fg) m.labels.at<int>(y, x) = m.background_label;
        }
    }
    return m;
}

cv::Mat watershed_segment(const cv::Mat& seg_prob, const MarkerMap& markers,
                          const SmoothingParams& smoothing) {
    cv::Mat elev = gaussian_smooth(seg_prob, smoothing);
    elev *= -1.0f;  // nuclei centers become valleys

    cv::Mat out = cv::Mat::zeros(elev.rows, elev.cols, CV_32S);
    if (markers.num_seeds == 0) return out;

    struct Node {
        float elev;
        int order;  // raster order for deterministic ties
        int x, y;
        bool operator>(const Node& o) const {
            if (elev != o.elev) return elev > o.elev;
            return order > o.order;
        }
    };
    std::priority_queue<Node, std::vector<Node>, std::greater<Node>> pq;
    int counter = 0;

    for (int y = 0; y < elev.rows; ++y)
        for (int x = 0; x < elev.cols; ++x) {
            int l = markers.labels.at<int>(y, x);
            if (l > 0 && l != markers.background_label) {
                out.at<int>(y, x) = l;
                pq.push({elev.at<float>(y, x), counter++, x, y});
            }
        }

    const int dx[4] = {1, -1, 0, 0};
    const int dy[4] = {0, 0, 1, -1};
    while (!pq.empty()) {
        Node n = pq.top();
        pq.pop();
        int label = out.at<int>(n.y, n.x);
        for (int i = 0; i < 4; ++i) {
            int nx = n.x + dx[i], ny = n.y + dy[i];
            if (nx < 0 || ny < 0 || nx >= elev.cols || ny >= elev.rows) continue;
            if (out.at<int>(ny, nx) != 0) continue;
            if (markers.foreground.at<uchar>(ny, nx) == 0) continue;
            out.at<int>(ny, nx) = label;
            pq.push({elev.at<float>(ny, nx), counter++, nx, ny});
        }
    }
    return out;
}

cv::Mat segment_instances(const cv::Mat& seg_prob, const cv::Mat& contour_prob,
                          const PostprocessParams& params) {
    cv::Mat smoothed = gaussian_smooth(seg_prob, params.smoothing);
    MarkerMap markers = make_markers(smoothed, contour_prob, params);
    cv::Mat labels = watershed_segment(seg_prob, markers, params.smoothing);

    // drop small instances, then compact to 1..K
    double max_label;
    cv::minMaxLoc(labels, nullptr, &max_label);
    int k = static_cast<int>(max_label);
    std::vector<long long> area(k + 1, 0);
    for (int y = 0; y < labels.rows; ++y)
        for (int x = 0; x < labels.cols; ++x) ++area[labels.at<int>(y, x)];

    std::vector<int> remap(k + 1, 0);
    int next = 0;
    for (int y = 0; y < labels.rows; ++y)
        for (int x = 0; x < labels.cols; ++x) {
            int& l = labels.at<int>(y, x);
            if (l == 0) continue;
            if (area[l] < params.min_instance_px) {
                l = 0;
                continue;
            }
            if (remap[l] == 0) remap[l] = ++next;
            l = remap[l];
        }
    return labels;
}

}  // namespace cryoseg::post
