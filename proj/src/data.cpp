#include "cryoseg/data.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "cryoseg/stain.hpp"

namespace fs = std::filesystem;

namespace cryoseg::data {

namespace {

bool has_image_ext(const fs::path& p) {
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), ::tolower);
    return e == ".png" || e == ".tif" || e == ".tiff";
}

std::string organ_of(const std::string& id) {
    auto pos = id.find('_');
    return pos == std::string::npos ? id : id.substr(0, pos);
}

cv::Mat read_label_mask(const fs::path& p) {
    cv::Mat raw = cv::imread(p.string(), cv::IMREAD_UNCHANGED);
    if (raw.empty()) throw DatasetError("cannot read mask: " + p.string());
    if (raw.channels() != 1) {
        cv::Mat gray;
        cv::cvtColor(raw, gray, cv::COLOR_BGR2GRAY);
        raw = gray;
    }
    cv::Mat labels;
    raw.convertTo(labels, CV_32S);
    return labels;
}

}  // namespace

std::vector<Sample> load_dataset(const fs::path& root) {
    fs::path images_dir = root / "images";
    fs::path masks_dir = root / "masks";
    if (!fs::is_directory(images_dir) || !fs::is_directory(masks_dir))
        throw DatasetError("dataset root must contain images/ and masks/: " + root.string());

    std::map<std::string, fs::path> images, masks;
    for (const auto& e : fs::directory_iterator(images_dir))
        if (e.is_regular_file() && has_image_ext(e.path())) images[e.path().stem().string()] = e.path();
    for (const auto& e : fs::directory_iterator(masks_dir))
        if (e.is_regular_file() && has_image_ext(e.path())) masks[e.path().stem().string()] = e.path();

    for (const auto& [id, p] : images)
        if (!masks.count(id)) throw DatasetError("image without mask: " + p.string());
    for (const auto& [id, p] : masks)
        if (!images.count(id)) throw DatasetError("mask without image: " + p.string());
    if (images.empty()) throw DatasetError("empty dataset: " + root.string());

    std::vector<Sample> samples;
    for (const auto& [id, ipath] : images) {
        Sample s;
        s.id = id;
        s.organ = organ_of(id);
        s.image = cv::imread(ipath.string(), cv::IMREAD_COLOR);
        if (s.image.empty()) throw DatasetError("cannot read image: " + ipath.string());
        cv::cvtColor(s.image, s.image, cv::COLOR_BGR2RGB);
        s.instances = read_label_mask(masks.at(id));
        if (s.instances.size() != s.image.size())
            throw DatasetError("image/mask dimension mismatch for sample: " + id);
        s.binary_mask.create(s.instances.rows, s.instances.cols, CV_8U);
        for (int y = 0; y < s.instances.rows; ++y)
            for (int x = 0; x < s.instances.cols; ++x)
                s.binary_mask.at<uchar>(y, x) = s.instances.at<int>(y, x) > 0 ? 1 : 0;
        s.contours = mask_to_contours(s.instances);
        samples.push_back(std::move(s));
    }
    return samples;
}

cv::Mat mask_to_contours(const cv::Mat& instances, int thickness) {
    if (thickness < 1) throw std::invalid_argument("contour thickness must be >= 1");
    if (instances.type() != CV_32S) throw std::invalid_argument("instances must be CV_32S");
    cv::Mat out = cv::Mat::zeros(instances.rows, instances.cols, CV_8U);
    for (int y = 0; y < instances.rows; ++y) {
        for (int x = 0; x < instances.cols; ++x) {
            int label = instances.at<int>(y, x);
            if (label == 0) continue;
            bool boundary = false;
            for (int dy = -thickness; dy <= thickness && !boundary; ++dy)
                for (int dx = -thickness; dx <= thickness && !boundary; ++dx) {
                    int ny = y + dy, nx = x + dx;
                    if (ny < 0 || nx < 0 || ny >= instances.rows || nx >= instances.cols) continue;
                    boundary = instances.at<int>(ny, nx) != label;
                }
            out.at<uchar>(y, x) = boundary ? 1 : 0;
        }
    }
    return out;
}

namespace {

cv::Mat compact_labels(const cv::Mat& labels) {
    double max_label;
    cv::minMaxLoc(labels, nullptr, &max_label);
    std::vector<int> remap(static_cast<int>(max_label) + 1, 0);
    int next = 0;
    cv::Mat out = labels.clone();
    for (int y = 0; y < out.rows; ++y)
        for (int x = 0; x < out.cols; ++x) {
            int& l = out.at<int>(y, x);
            if (l == 0) continue;
            if (remap[l] == 0) remap[l] = ++next;
            l = remap[l];
        }
    return out;
}

}  // namespace

std::vector<PatchExample> crop_into_patches(const Sample& sample, int target_size) {
    if (sample.image.rows != 512 || sample.image.cols != 512)
        throw std::invalid_argument("crop_into_patches expects a 512x512 sample");
    std::vector<PatchExample> out;
    const int cell = 128;
    int index = 0;
    for (int gy = 0; gy < 4; ++gy) {
        for (int gx = 0; gx < 4; ++gx, ++index) {
            cv::Rect roi(gx * cell, gy * cell, cell, cell);
            PatchExample p;
            p.sample_id = sample.id;
            p.patch_index = index;
            cv::Mat labels;
            if (target_size == cell) {
                p.image = sample.image(roi).clone();
                labels = sample.instances(roi).clone();
            } else {
                cv::resize(sample.image(roi), p.image, {target_size, target_size}, 0, 0,
                           cv::INTER_LINEAR);
                cv::resize(sample.instances(roi), labels, {target_size, target_size}, 0, 0,
                           cv::INTER_NEAREST);
            }
            p.instances = compact_labels(labels);
            out.push_back(std::move(p));
        }
    }
    return out;
}

namespace {

void rot90_all(std::vector<cv::Mat*>& mats, int k) {
    for (cv::Mat* m : mats) {
        cv::Mat r;
        switch (k % 4) {
            case 1: cv::rotate(*m, r, cv::ROTATE_90_CLOCKWISE); break;
            case 2: cv::rotate(*m, r, cv::ROTATE_180); break;
            case 3: cv::rotate(*m, r, cv::ROTATE_90_COUNTERCLOCKWISE); break;
            default: r = *m; break;
        }
        *m = r;
    }
}

}  // namespace

AugmentedExample augment_example(const AugmentedExample& example, std::uint64_t rng_seed,
                                 const AugmentConfig& config) {
    AugmentedExample out = example;
    out.image = example.image.clone();
    out.hematoxylin = example.hematoxylin.clone();
    out.seg_target = example.seg_target.clone();
    out.contour_target = example.contour_target.clone();
    out.seed = rng_seed;

    std::mt19937_64 rng(rng_seed);
    std::uniform_real_distribution<double> coin(0.0, 1.0);

    std::vector<cv::Mat*> linear = {&out.image, &out.hematoxylin};
    std::vector<cv::Mat*> nearest = {&out.seg_target, &out.contour_target};
    std::vector<cv::Mat*> all = {&out.image, &out.hematoxylin, &out.seg_target,
                                 &out.contour_target};

    if (coin(rng) < config.p_hflip)
        for (cv::Mat* m : all) cv::flip(*m, *m, 1);
    if (coin(rng) < config.p_vflip)
        for (cv::Mat* m : all) cv::flip(*m, *m, 0);
    if (config.rotate90) {
        int k = static_cast<int>(rng() % 4);
        rot90_all(all, k);
    }
    int size = out.image.rows;
    if (coin(rng) < config.p_crop && config.crop_size < size) {
        int max_off = size - config.crop_size;
        int ox = static_cast<int>(rng() % static_cast<std::uint64_t>(max_off + 1));
        int oy = static_cast<int>(rng() % static_cast<std::uint64_t>(max_off + 1));
        cv::Rect roi(ox, oy, config.crop_size, config.crop_size);
        for (cv::Mat* m : linear) {
            cv::Mat c;
            cv::resize((*m)(roi), c, {size, size}, 0, 0, cv::INTER_LINEAR);
            *m = c;
        }
        for (cv::Mat* m : nearest) {
            cv::Mat c;
            cv::resize((*m)(roi), c, {size, size}, 0, 0, cv::INTER_NEAREST);
            *m = c;
        }
    }
    if (coin(rng) < config.p_elastic) {
        // displacement field: Gaussian-smoothed uniform noise scaled by alpha
        cv::Mat dx(size, size, CV_32F), dy(size, size, CV_32F);
        std::uniform_real_distribution<float> u(-1.0f, 1.0f);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                dx.at<float>(y, x) = u(rng);
                dy.at<float>(y, x) = u(rng);
            }
        int ksz = 2 * static_cast<int>(std::ceil(3.0 * config.elastic_sigma)) + 1;
        cv::GaussianBlur(dx, dx, {ksz, ksz}, config.elastic_sigma);
        cv::GaussianBlur(dy, dy, {ksz, ksz}, config.elastic_sigma);
        cv::Mat map_x(size, size, CV_32F), map_y(size, size, CV_32F);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                map_x.at<float>(y, x) = x + static_cast<float>(config.elastic_alpha) * dx.at<float>(y, x);
                map_y.at<float>(y, x) = y + static_cast<float>(config.elastic_alpha) * dy.at<float>(y, x);
            }
        for (cv::Mat* m : linear)
            cv::remap(*m, *m, map_x, map_y, cv::INTER_LINEAR, cv::BORDER_REFLECT_101);
        for (cv::Mat* m : nearest)
            cv::remap(*m, *m, map_x, map_y, cv::INTER_NEAREST, cv::BORDER_REFLECT_101);
    }
    // fixed-point interpolation can overshoot [0,1] by ~1e-9
    for (cv::Mat* m : linear) {
        cv::min(*m, 1.0, *m);
        cv::max(*m, 0.0, *m);
    }
    return out;
}

AugmentedExample augment(const PatchExample& patch, std::uint64_t rng_seed,
                         const AugmentConfig& config) {
    AugmentedExample ex;
    ex.sample_id = patch.sample_id;
    ex.patch_index = patch.patch_index;
    patch.image.convertTo(ex.image, CV_32FC3, 1.0 / 255.0);
    ex.hematoxylin = stain::extract_hematoxylin(patch.image);
    ex.seg_target.create(patch.instances.rows, patch.instances.cols, CV_32F);
    for (int y = 0; y < patch.instances.rows; ++y)
        for (int x = 0; x < patch.instances.cols; ++x)
            ex.seg_target.at<float>(y, x) = patch.instances.at<int>(y, x) > 0 ? 1.0f : 0.0f;
    cv::Mat contours = mask_to_contours(patch.instances);
    contours.convertTo(ex.contour_target, CV_32F);
    return augment_example(ex, rng_seed, config);
}

FoldSplit make_folds(const std::vector<Sample>& samples) {
    std::map<std::string, std::vector<std::string>> by_organ;
    for (const Sample& s : samples) by_organ[s.organ].push_back(s.id);
    for (auto& [organ, ids] : by_organ) {
        if (ids.size() != 3)
            throw std::invalid_argument("organ '" + organ + "' has " +
                                        std::to_string(ids.size()) + " samples, expected 3");
        std::sort(ids.begin(), ids.end());
    }
    FoldSplit split;
    for (const auto& [organ, ids] : by_organ) {  // std::map iterates lexicographically
        FoldSplit::Fold fold;
        fold.organ = organ;
        fold.holdout = ids;
        for (const auto& [other, oids] : by_organ)
            if (other != organ) fold.training.insert(fold.training.end(), oids.begin(), oids.end());
        std::sort(fold.training.begin(), fold.training.end());
        split.folds.push_back(std::move(fold));
    }
    return split;
}

void write_folds(const FoldSplit& folds, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw DatasetError("cannot write fold file: " + path.string());
    for (std::size_t k = 0; k < folds.folds.size(); ++k) {
        const auto& f = folds.folds[k];
        out << "fold " << k << "\t" << f.organ << "\t";
        for (std::size_t i = 0; i < f.holdout.size(); ++i)
            out << (i ? "," : "") << f.holdout[i];
        out << "\t";
        for (std::size_t i = 0; i < f.training.size(); ++i)
            out << (i ? "," : "") << f.training[i];
        out << "\n";
    }
}

namespace {

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

}  // namespace

FoldSplit read_folds(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DatasetError("cannot read fold file: " + path.string());
    FoldSplit split;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string tag, organ, holdout, training;
        std::getline(ss, tag, '\t');
        std::getline(ss, organ, '\t');
        std::getline(ss, holdout, '\t');
        std::getline(ss, training, '\t');
        FoldSplit::Fold f;
        f.organ = organ;
        f.holdout = split_csv(holdout);
        f.training = split_csv(training);
        split.folds.push_back(std::move(f));
    }
    return split;
}

}  // namespace cryoseg::data
