#include <torch/torch.h>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "cryoseg/checkpoint.hpp"
#include "cryoseg/losses.hpp"
#include "cryoseg/model.hpp"
#include "cryoseg/pipeline.hpp"
#include "cryoseg/postprocess.hpp"
#include "cryoseg/schedulers.hpp"
#include "cryoseg/stain.hpp"
#include "report.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cryoseg::pipeline {

namespace {

constexpr char kCheckpointMagic[] = "CRYOSEGCKPT";
constexpr std::uint64_t kCheckpointVersion = 1;

torch::Tensor hwc_to_tensor(const cv::Mat& m) {
    CV_Assert(m.type() == CV_32FC3);
    cv::Mat c = m.isContinuous() ? m : m.clone();
    return torch::from_blob(c.data, {c.rows, c.cols, 3}, torch::kFloat32)
        .permute({2, 0, 1})
        .clone();
}

torch::Tensor hw_to_tensor(const cv::Mat& m) {
    CV_Assert(m.type() == CV_32F);
    cv::Mat c = m.isContinuous() ? m : m.clone();
    return torch::from_blob(c.data, {1, c.rows, c.cols}, torch::kFloat32).clone();
}

cv::Mat tensor_to_hw(const torch::Tensor& t) {
    torch::Tensor c = t.contiguous().to(torch::kCPU, torch::kFloat32);
    cv::Mat m(static_cast<int>(c.size(-2)), static_cast<int>(c.size(-1)), CV_32F);
    std::memcpy(m.data, c.data_ptr<float>(), sizeof(float) * c.numel());
    return m;
}

void write_block(std::ostream& out, const std::string& data) {
    std::uint64_t len = data.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
}

std::string read_block(std::istream& in) {
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || len > (1ull << 33)) throw CheckpointError("corrupt checkpoint block (format v1)");
    std::string data(len, '\0');
    in.read(data.data(), static_cast<std::streamsize>(len));
    if (!in) throw CheckpointError("truncated checkpoint (format v1)");
    return data;
}

}  // namespace

void save_checkpoint(const fs::path& path, model::TripleUNet& net, torch::optim::Adam* opt,
                     const TrainConfig& config, int epoch) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path.string());
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
    std::uint64_t ver = kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&ver), sizeof(ver));

    json header;
    header["config"] = config.to_text();
    header["epoch"] = epoch;
    header["seed"] = config.seed;
    write_block(out, header.dump());

    std::vector<torch::Tensor> params;
    for (const torch::Tensor& p : net->parameters()) params.push_back(p.detach().cpu());
    std::ostringstream pstream;
    torch::save(params, pstream);
    write_block(out, pstream.str());

    std::string opt_blob;
    if (opt) {
        std::ostringstream ostream_;
        torch::save(*opt, ostream_);
        opt_blob = ostream_.str();
    }
    write_block(out, opt_blob);
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint: " + path.string());
    char magic[sizeof(kCheckpointMagic) - 1];
    in.read(magic, sizeof(magic));
    if (!in || std::string(magic, sizeof(magic)) != kCheckpointMagic)
        throw CheckpointError("not a cryoseg checkpoint: " + path.string());
    std::uint64_t ver = 0;
    in.read(reinterpret_cast<char*>(&ver), sizeof(ver));
    if (!in || ver != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(ver) +
                              " (expected " + std::to_string(kCheckpointVersion) + ")");

    LoadedCheckpoint c;
    json header = json::parse(read_block(in), nullptr, false);
    if (header.is_discarded()) throw CheckpointError("corrupt checkpoint header (format v1)");
    c.config = TrainConfig::from_text(header.at("config"));
    c.epoch = header.at("epoch");

    c.net = model::TripleUNet(c.config.network);
    std::vector<torch::Tensor> params;
    std::istringstream pstream(read_block(in));
    try {
        torch::load(params, pstream);
    } catch (const std::exception& e) {
        throw CheckpointError(std::string("corrupt checkpoint parameters (format v1): ") + e.what());
    }
    auto live = c.net->parameters();
    if (live.size() != params.size())
        throw CheckpointError("checkpoint parameter count mismatch (format v1)");
    torch::NoGradGuard guard;
    for (std::size_t i = 0; i < live.size(); ++i) live[i].copy_(params[i]);

    c.optimizer_blob = read_block(in);
    return c;
}

namespace {

/// Tile a 512-style image into the 4x4 grid of 128 cells, forward all
/// patches in one batch and average probabilities back in native space.
std::pair<cv::Mat, cv::Mat> stitched_probabilities(model::TripleUNet& net,
                                                   const TrainConfig& config,
                                                   const cv::Mat& image) {
    const int cell = 128;
    if (image.rows % cell != 0 || image.cols % cell != 0)
        throw std::invalid_argument("inference image size must be a multiple of 128");
    int gy = image.rows / cell, gx = image.cols / cell;
    int s = config.network.input_size;

    cv::Mat imgf;
    image.convertTo(imgf, CV_32FC3, 1.0 / 255.0);

    std::vector<torch::Tensor> patches, hemas;
    for (int y = 0; y < gy; ++y)
        for (int x = 0; x < gx; ++x) {
            cv::Rect roi(x * cell, y * cell, cell, cell);
            cv::Mat p, praw;
            cv::resize(imgf(roi), p, {s, s}, 0, 0, cv::INTER_LINEAR);
            image(roi).copyTo(praw);
            cv::Mat praw_rs;
            cv::resize(praw, praw_rs, {s, s}, 0, 0, cv::INTER_LINEAR);
            cv::Mat hema = stain::extract_hematoxylin(praw_rs, stain::StainMatrix::ruifrok_johnston(),
                                                      255.0, config.rescale_hematoxylin);
            patches.push_back(hwc_to_tensor(p));
            hemas.push_back(hw_to_tensor(hema));
        }
    torch::NoGradGuard guard;
    net->eval();
    torch::Tensor batch = torch::stack(patches);
    torch::Tensor hbatch = torch::stack(hemas);
    model::BranchOutputs out = net->forward(batch, hbatch);

    cv::Mat seg(image.rows, image.cols, CV_32F), con(image.rows, image.cols, CV_32F);
    int idx = 0;
    for (int y = 0; y < gy; ++y)
        for (int x = 0; x < gx; ++x, ++idx) {
            cv::Rect roi(x * cell, y * cell, cell, cell);
            cv::Mat sp = tensor_to_hw(out.seg_prob[idx][0]);
            cv::Mat cp = tensor_to_hw(out.contour_prob[idx][0]);
            cv::resize(sp, seg(roi), {cell, cell}, 0, 0, cv::INTER_LINEAR);
            cv::resize(cp, con(roi), {cell, cell}, 0, 0, cv::INTER_LINEAR);
        }
    return {seg, con};
}

cv::Mat segment_with_model(model::TripleUNet& net, const TrainConfig& config,
                           const cv::Mat& image) {
    auto [seg, con] = stitched_probabilities(net, config, image);
    return post::segment_instances(seg, con, config.postprocess);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    std::uint64_t h = 14695981039346656037ull;
    for (std::uint64_t v : {a, b, c})
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (8 * i)) & 0xff;
            h *= 1099511628211ull;
        }
    return h;
}

}  // namespace

RunRecord train_fold(const std::vector<data::Sample>& samples,
                     const data::FoldSplit::Fold& fold, int fold_index,
                     const TrainConfig& config, const fs::path& out_dir) {
    config.validate();
    if (fold.training.empty()) throw std::invalid_argument("fold has an empty training set");
    fs::create_directories(out_dir);

    std::map<std::string, const data::Sample*> by_id;
    for (const data::Sample& s : samples) by_id[s.id] = &s;
    for (const std::string& id : fold.training)
        if (!by_id.count(id)) throw data::DatasetError("fold references unknown sample: " + id);
    for (const std::string& id : fold.holdout)
        if (!by_id.count(id)) throw data::DatasetError("fold references unknown sample: " + id);

    auto t0 = std::chrono::steady_clock::now();
    torch::manual_seed(config.seed);
    torch::Device device(device_name());

    std::vector<data::PatchExample> patches;
    for (const std::string& id : fold.training) {
        auto p = data::crop_into_patches(*by_id.at(id), config.network.input_size);
        patches.insert(patches.end(), std::make_move_iterator(p.begin()),
                       std::make_move_iterator(p.end()));
    }

    model::TripleUNet net(config.network);
    net->to(device);
    torch::optim::Adam optimizer(net->parameters(), torch::optim::AdamOptions(config.lr_max));
    LrScheduler scheduler(config.scheduler, config.lr_min, config.lr_max, config.epochs);

    RunRecord record;
    record.fold = fold_index;
    record.organ = fold.organ;
    record.config_hash = config.hash();
    record.status = "running";
    fs::path record_path = out_dir / ("fold" + std::to_string(fold_index) + "_run.json");
    fs::path ckpt_path = out_dir / ("fold" + std::to_string(fold_index) + "_best.ckpt");

    data::AugmentConfig aug =
        config.augment_enabled ? config.augment : data::AugmentConfig::disabled();

    std::vector<std::size_t> order(patches.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    int since_best = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        double lr = scheduler.lr(epoch);
        for (auto& group : optimizer.param_groups())
            static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);

        std::mt19937_64 shuffle_rng(mix_seed(config.seed, static_cast<std::uint64_t>(epoch), 0));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        net->train();
        EpochRecord er;
        er.epoch = epoch;
        er.lr = lr;
        int batches = 0;
        std::size_t cursor = 0;
        while (cursor < order.size()) {
            if (config.max_batches_per_epoch > 0 && batches >= config.max_batches_per_epoch) break;
            std::size_t take = std::min<std::size_t>(config.batch_size, order.size() - cursor);
            std::vector<torch::Tensor> imgs, hemas, segs, cons;
            for (std::size_t i = 0; i < take; ++i, ++cursor) {
                const data::PatchExample& p = patches[order[cursor]];
                std::uint64_t seed = mix_seed(config.seed, static_cast<std::uint64_t>(epoch) + 1,
                                              order[cursor]);
                data::AugmentedExample ex = data::augment(p, seed, aug);
                imgs.push_back(hwc_to_tensor(ex.image));
                hemas.push_back(hw_to_tensor(ex.hematoxylin));
                segs.push_back(hw_to_tensor(ex.seg_target));
                cons.push_back(hw_to_tensor(ex.contour_target));
            }
            torch::Tensor img = torch::stack(imgs).to(device);
            torch::Tensor hema = torch::stack(hemas).to(device);
            torch::Tensor seg = torch::stack(segs).to(device);
            torch::Tensor con = torch::stack(cons).to(device);

            optimizer.zero_grad();
            model::BranchOutputs out = net->forward(img, hema);
            losses::LossBreakdown lb =
                losses::total_loss(out, seg, con, config.loss_weights, config.seg_st_mode);
            double total = lb.total.item<double>();
            if (!std::isfinite(total)) {
                record.status = "aborted:non-finite loss at epoch " + std::to_string(epoch);
                record.save(record_path);
                throw std::runtime_error(record.status);
            }
            lb.total.backward();
            optimizer.step();

            er.loss_total += total;
            er.loss_rgb += lb.rgb.item<double>();
            er.loss_h += lb.h.item<double>();
            er.loss_seg_st += lb.seg_st.item<double>();
            er.loss_seg_sd += lb.seg_sd.item<double>();
            ++batches;
        }
        if (batches > 0) {
            er.loss_total /= batches;
            er.loss_rgb /= batches;
            er.loss_h /= batches;
            er.loss_seg_st /= batches;
            er.loss_seg_sd /= batches;
        }

        // hold-out validation
        double aji_sum = 0, pq_sum = 0, dice_sum = 0;
        for (const std::string& id : fold.holdout) {
            const data::Sample& s = *by_id.at(id);
            cv::Mat pred = segment_with_model(net, config, s.image);
            metrics::MetricReport r = metrics::evaluate_pair(s.instances, pred);
            aji_sum += r.aji;
            pq_sum += r.pq;
            dice_sum += r.dice;
        }
        std::size_t nh = std::max<std::size_t>(fold.holdout.size(), 1);
        er.val_aji = aji_sum / nh;
        er.val_pq = pq_sum / nh;
        er.val_dice = dice_sum / nh;
        scheduler.observe(er.val_aji);
        record.epochs.push_back(er);

        if (record.best_epoch < 0 || er.val_aji > record.best_val_aji) {
            record.best_epoch = epoch;
            record.best_val_aji = er.val_aji;
            save_checkpoint(ckpt_path, net, &optimizer, config, epoch);
            record.checkpoint_path = ckpt_path.string();
            since_best = 0;
        } else if (++since_best >= config.early_stop_patience) {
            record.save(record_path);
            break;
        }
        record.save(record_path);
    }

    record.status = "complete";
    record.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    record.save(record_path);
    return record;
}

struct Inferencer::Impl {
    LoadedCheckpoint ckpt;
};

Inferencer::Inferencer(const fs::path& checkpoint) : impl_(std::make_unique<Impl>()) {
    impl_->ckpt = load_checkpoint(checkpoint);
    impl_->ckpt.net->to(torch::Device(device_name()));
    impl_->ckpt.net->eval();
}

Inferencer::~Inferencer() = default;
Inferencer::Inferencer(Inferencer&&) noexcept = default;

const TrainConfig& Inferencer::config() const { return impl_->ckpt.config; }

cv::Mat Inferencer::segment(const cv::Mat& image) const {
    return segment_with_model(impl_->ckpt.net, impl_->ckpt.config, image);
}

std::pair<cv::Mat, cv::Mat> Inferencer::probabilities(const cv::Mat& image) const {
    return stitched_probabilities(impl_->ckpt.net, impl_->ckpt.config, image);
}

void infer_dir(const fs::path& checkpoint, const fs::path& images_dir, const fs::path& out_dir) {
    Inferencer inf(checkpoint);
    fs::create_directories(out_dir);
    bool any = false;
    for (const auto& e : fs::directory_iterator(images_dir)) {
        if (!e.is_regular_file()) continue;
        cv::Mat img = cv::imread(e.path().string(), cv::IMREAD_COLOR);
        if (img.empty()) continue;
        cv::cvtColor(img, img, cv::COLOR_BGR2RGB);
        cv::Mat labels = inf.segment(img);
        write_label_image(out_dir / (e.path().stem().string() + ".png"), labels);
        any = true;
    }
    if (!any) throw std::invalid_argument("no readable images in " + images_dir.string());
}

CrossvalResult crossval(const fs::path& dataset_root, const TrainConfig& config,
                        const fs::path& out_dir) {
    config.validate();
    std::vector<data::Sample> samples = data::load_dataset(dataset_root);
    data::FoldSplit folds = data::make_folds(samples);
    fs::create_directories(out_dir);
    data::write_folds(folds, out_dir / "folds.txt");

    std::map<std::string, const data::Sample*> by_id;
    for (const data::Sample& s : samples) by_id[s.id] = &s;

    CrossvalResult result;
    std::vector<metrics::TaggedReport> reports;
    for (std::size_t k = 0; k < folds.folds.size(); ++k) {
        fs::path record_path = out_dir / ("fold" + std::to_string(k) + "_run.json");
        RunRecord record;
        bool reuse = false;
        if (fs::exists(record_path)) {
            record = RunRecord::load(record_path);
            reuse = record.status == "complete" && record.config_hash == config.hash() &&
                    fs::exists(record.checkpoint_path);
        }
        if (!reuse)
            record = train_fold(samples, folds.folds[k], static_cast<int>(k), config, out_dir);
        result.runs.push_back(record);

        Inferencer inf(record.checkpoint_path);
        fs::path pred_dir = out_dir / ("fold" + std::to_string(k) + "_pred");
        fs::create_directories(pred_dir);
        for (const std::string& id : folds.folds[k].holdout) {
            const data::Sample& s = *by_id.at(id);
            cv::Mat pred = inf.segment(s.image);
            write_label_image(pred_dir / (id + ".png"), pred);
            metrics::TaggedReport t;
            t.id = id;
            t.organ = s.organ;
            t.fold = static_cast<int>(k);
            t.report = metrics::evaluate_pair(s.instances, pred);
            reports.push_back(std::move(t));
        }
    }

    result.aggregates = metrics::aggregate_reports(reports);
    write_report_csv(out_dir / "report.csv", reports, result.aggregates);
    write_fold_table(out_dir / "fold_table.txt", result.aggregates);
    write_organ_table(out_dir / "organ_table.txt", result.aggregates);
    return result;
}

}  // namespace cryoseg::pipeline
