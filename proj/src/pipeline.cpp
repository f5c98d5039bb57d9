#include "cryoseg/pipeline.hpp"

#include <cstdlib>
#include <fstream>
#include <iomanip>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>

#include "cryoseg/stain.hpp"
#include "report.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cryoseg::pipeline {

std::string device_name() {
    const char* dev = std::getenv("CRYOSEG_DEVICE");
    return dev && *dev ? dev : "cpu";
}

void RunRecord::save(const fs::path& path) const {
    json j;
    j["fold"] = fold;
    j["organ"] = organ;
    j["config_hash"] = config_hash;
    j["status"] = status;
    j["wall_seconds"] = wall_seconds;
    j["best_epoch"] = best_epoch;
    j["best_val_aji"] = best_val_aji;
    j["checkpoint_path"] = checkpoint_path;
    j["epochs"] = json::array();
    for (const EpochRecord& e : epochs) {
        j["epochs"].push_back({{"epoch", e.epoch},
                               {"lr", e.lr},
                               {"loss_total", e.loss_total},
                               {"loss_rgb", e.loss_rgb},
                               {"loss_h", e.loss_h},
                               {"loss_seg_st", e.loss_seg_st},
                               {"loss_seg_sd", e.loss_seg_sd},
                               {"val_aji", e.val_aji},
                               {"val_pq", e.val_pq},
                               {"val_dice", e.val_dice}});
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write run record: " + path.string());
    out << j.dump(2) << "\n";
}

RunRecord RunRecord::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read run record: " + path.string());
    json j = json::parse(in);
    RunRecord r;
    r.fold = j.at("fold");
    r.organ = j.value("organ", "");
    r.config_hash = j.at("config_hash");
    r.status = j.at("status");
    r.wall_seconds = j.at("wall_seconds");
    r.best_epoch = j.at("best_epoch");
    r.best_val_aji = j.at("best_val_aji");
    r.checkpoint_path = j.at("checkpoint_path");
    for (const json& e : j.at("epochs")) {
        EpochRecord er;
        er.epoch = e.at("epoch");
        er.lr = e.at("lr");
        er.loss_total = e.at("loss_total");
        er.loss_rgb = e.at("loss_rgb");
        er.loss_h = e.at("loss_h");
        er.loss_seg_st = e.at("loss_seg_st");
        er.loss_seg_sd = e.at("loss_seg_sd");
        er.val_aji = e.at("val_aji");
        er.val_pq = e.at("val_pq");
        er.val_dice = e.at("val_dice");
        r.epochs.push_back(er);
    }
    return r;
}

cv::Mat read_label_image(const fs::path& path) {
    cv::Mat raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (raw.empty()) throw data::DatasetError("cannot read label image: " + path.string());
    if (raw.channels() != 1)
        throw data::DatasetError("label image must be single channel: " + path.string());
    cv::Mat labels;
    raw.convertTo(labels, CV_32S);
    return labels;
}

void write_label_image(const fs::path& path, const cv::Mat& labels) {
    cv::Mat u16;
    labels.convertTo(u16, CV_16U);
    if (!cv::imwrite(path.string(), u16))
        throw std::runtime_error("cannot write label image: " + path.string());
}

void prepare(const fs::path& dataset_root, const fs::path& out_dir) {
    std::vector<data::Sample> samples = data::load_dataset(dataset_root);
    data::FoldSplit folds = data::make_folds(samples);
    fs::create_directories(out_dir);
    data::write_folds(folds, out_dir / "folds.txt");

    fs::create_directories(out_dir / "contours");
    fs::create_directories(out_dir / "hematoxylin");
    for (const data::Sample& s : samples) {
        cv::Mat c16;
        s.contours.convertTo(c16, CV_16U, 65535.0);
        cv::imwrite((out_dir / "contours" / (s.id + ".png")).string(), c16);
        cv::Mat h = stain::extract_hematoxylin(s.image);
        cv::Mat h16;
        h.convertTo(h16, CV_16U, 65535.0);
        cv::imwrite((out_dir / "hematoxylin" / (s.id + ".png")).string(), h16);
    }
}

namespace {

std::string organ_of(const std::string& id) {
    auto pos = id.find('_');
    return pos == std::string::npos ? id : id.substr(0, pos);
}

}  // namespace

void evaluate_dirs(const fs::path& pred_dir, const fs::path& gt_dir,
                   const fs::path& report_path, const fs::path& folds_file) {
    std::map<std::string, int> fold_of;
    if (!folds_file.empty()) {
        data::FoldSplit folds = data::read_folds(folds_file);
        for (std::size_t k = 0; k < folds.folds.size(); ++k)
            for (const std::string& id : folds.folds[k].holdout)
                fold_of[id] = static_cast<int>(k);
    }

    std::map<std::string, fs::path> preds, gts;
    for (const auto& e : fs::directory_iterator(pred_dir))
        if (e.is_regular_file()) preds[e.path().stem().string()] = e.path();
    for (const auto& e : fs::directory_iterator(gt_dir))
        if (e.is_regular_file()) gts[e.path().stem().string()] = e.path();
    if (preds.empty()) throw std::invalid_argument("no predictions in " + pred_dir.string());
    for (const auto& [id, p] : preds)
        if (!gts.count(id)) throw data::DatasetError("prediction without ground truth: " + p.string());

    std::vector<metrics::TaggedReport> reports;
    for (const auto& [id, p] : preds) {
        metrics::TaggedReport t;
        t.id = id;
        t.organ = organ_of(id);
        t.fold = fold_of.count(id) ? fold_of.at(id) : 0;
        t.report = metrics::evaluate_pair(read_label_image(gts.at(id)), read_label_image(p));
        reports.push_back(std::move(t));
    }
    metrics::Aggregates agg = metrics::aggregate_reports(reports);
    write_report_csv(report_path, reports, agg);
}

void write_report_csv(const fs::path& path, const std::vector<metrics::TaggedReport>& reports,
                      const metrics::Aggregates& agg) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write report: " + path.string());
    out << std::fixed << std::setprecision(6);
    out << "id,organ,fold,aji,pq,sq,rq,dice,tp,fp,fn\n";
    auto row = [&](const std::string& id, const std::string& organ, const std::string& fold,
                   const metrics::MetricReport& r) {
        out << id << "," << organ << "," << fold << "," << r.aji << "," << r.pq << "," << r.sq
            << "," << r.rq << "," << r.dice << "," << r.tp << "," << r.fp << "," << r.fn << "\n";
    };
    for (const metrics::TaggedReport& t : reports)
        row(t.id, t.organ, std::to_string(t.fold), t.report);
    for (const auto& [organ, r] : agg.per_organ) row("organ:" + organ, organ, "", r);
    for (const auto& [fold, r] : agg.per_fold) row("fold:" + std::to_string(fold), "", std::to_string(fold), r);
    row("overall", "", "", agg.overall);
    out << "reference:baseline_unet,,," << kBaselineAji << "," << kBaselinePq << ",,,,,,\n";
    out << "reference:triple_unet_paper,,," << kTripleUnetPaperAji << "," << kTripleUnetPaperPq
        << ",,,,,,\n";
}

void write_fold_table(const fs::path& path, const metrics::Aggregates& agg) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write fold table: " + path.string());
    out << std::fixed << std::setprecision(4);
    out << "Fold\tAJI\tPQ\tDice\n";
    double aji_sum = 0, pq_sum = 0, dice_sum = 0;
    for (const auto& [fold, r] : agg.per_fold) {
        out << fold << "\t" << r.aji << "\t" << r.pq << "\t" << r.dice << "\n";
        aji_sum += r.aji;
        pq_sum += r.pq;
        dice_sum += r.dice;
    }
    std::size_t n = agg.per_fold.size();
    out << "AVERAGE\t" << aji_sum / n << "\t" << pq_sum / n << "\t" << dice_sum / n << "\n";
    out << "REFERENCE_BASELINE\t" << kBaselineAji << "\t" << kBaselinePq << "\t-\n";
}

void write_organ_table(const fs::path& path, const metrics::Aggregates& agg) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write organ table: " + path.string());
    out << std::fixed << std::setprecision(4);
    out << "Organ\tAJI\tPQ\tDice\n";
    double aji_sum = 0, pq_sum = 0, dice_sum = 0;
    for (const auto& [organ, r] : agg.per_organ) {
        out << organ << "\t" << r.aji << "\t" << r.pq << "\t" << r.dice << "\n";
        aji_sum += r.aji;
        pq_sum += r.pq;
        dice_sum += r.dice;
    }
    std::size_t n = agg.per_organ.size();
    out << "AVERAGE\t" << aji_sum / n << "\t" << pq_sum / n << "\t" << dice_sum / n << "\n";
    out << "REFERENCE_BASELINE\t" << kBaselineAji << "\t" << kBaselinePq << "\t-\n";
}

}  // namespace cryoseg::pipeline
