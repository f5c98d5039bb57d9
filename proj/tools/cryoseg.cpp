#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "cryoseg/data.hpp"
#include "cryoseg/pipeline.hpp"
#include "cryoseg/stain.hpp"

namespace fs = std::filesystem;
using namespace cryoseg;

namespace {

int run(int argc, char** argv) {
    CLI::App app{"cryoseg: nuclei instance segmentation for cryosectioned H&E patches"};
    app.require_subcommand(1);

    // prepare
    auto* prepare = app.add_subcommand("prepare", "build folds + contour/hematoxylin caches");
    std::string prep_data, prep_out;
    prepare->add_option("--data", prep_data, "dataset root (images/ + masks/)")->required();
    prepare->add_option("--out", prep_out, "output directory")->required();

    // train
    auto* train = app.add_subcommand("train", "train one cross-validation fold");
    std::string train_config, train_data, train_out;
    int train_fold_idx = 0;
    train->add_option("--config", train_config, "config file")->required();
    train->add_option("--fold", train_fold_idx, "fold index")->required();
    train->add_option("--data", train_data, "dataset root")->required();
    train->add_option("--out", train_out, "output directory")->required();

    // infer
    auto* infer = app.add_subcommand("infer", "segment a directory of images");
    std::string infer_ckpt, infer_images, infer_out;
    infer->add_option("--ckpt", infer_ckpt, "checkpoint file")->required();
    infer->add_option("--images", infer_images, "input image directory")->required();
    infer->add_option("--out", infer_out, "output directory")->required();

    // evaluate
    auto* evaluate = app.add_subcommand("evaluate", "score predictions against ground truth");
    std::string eval_pred, eval_gt, eval_out, eval_folds;
    evaluate->add_option("--pred", eval_pred, "prediction label maps")->required();
    evaluate->add_option("--gt", eval_gt, "ground-truth label maps")->required();
    evaluate->add_option("--out", eval_out, "report file")->required();
    evaluate->add_option("--folds", eval_folds, "fold file for fold tagging");

    // crossval
    auto* crossval = app.add_subcommand("crossval", "organ-stratified 10-fold cross-validation");
    std::string cv_config, cv_data, cv_out;
    crossval->add_option("--config", cv_config, "config file")->required();
    crossval->add_option("--data", cv_data, "dataset root")->required();
    crossval->add_option("--out", cv_out, "output directory")->required();

    // stain
    auto* stain_cmd = app.add_subcommand("stain", "write hematoxylin maps as 16-bit grayscale");
    std::string stain_in, stain_out;
    stain_cmd->add_option("--in", stain_in, "input image directory")->required();
    stain_cmd->add_option("--out", stain_out, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    if (prepare->parsed()) {
        pipeline::prepare(prep_data, prep_out);
        std::cout << "prepared " << prep_out << "\n";
    } else if (train->parsed()) {
        TrainConfig config = TrainConfig::load(train_config);
        auto samples = data::load_dataset(train_data);
        auto folds = data::make_folds(samples);
        if (train_fold_idx < 0 || train_fold_idx >= static_cast<int>(folds.folds.size()))
            throw std::invalid_argument("fold index out of range");
        auto record = pipeline::train_fold(samples, folds.folds[train_fold_idx], train_fold_idx,
                                           config, train_out);
        std::cout << "fold " << record.fold << " best val AJI " << record.best_val_aji
                  << " (epoch " << record.best_epoch << ")\n";
    } else if (infer->parsed()) {
        pipeline::infer_dir(infer_ckpt, infer_images, infer_out);
        std::cout << "wrote predictions to " << infer_out << "\n";
    } else if (evaluate->parsed()) {
        pipeline::evaluate_dirs(eval_pred, eval_gt, eval_out,
                                eval_folds.empty() ? fs::path{} : fs::path(eval_folds));
        std::cout << "wrote report to " << eval_out << "\n";
    } else if (crossval->parsed()) {
        TrainConfig config = TrainConfig::load(cv_config);
        auto result = pipeline::crossval(cv_data, config, cv_out);
        std::cout << "crossval AJI " << result.aggregates.overall.aji << " PQ "
                  << result.aggregates.overall.pq << " Dice " << result.aggregates.overall.dice
                  << "\n";
    } else if (stain_cmd->parsed()) {
        fs::create_directories(stain_out);
        bool any = false;
        for (const auto& e : fs::directory_iterator(stain_in)) {
            if (!e.is_regular_file()) continue;
            cv::Mat img = cv::imread(e.path().string(), cv::IMREAD_COLOR);
            if (img.empty()) continue;
            cv::cvtColor(img, img, cv::COLOR_BGR2RGB);
            cv::Mat h = stain::extract_hematoxylin(img);
            cv::Mat h16;
            h.convertTo(h16, CV_16U, 65535.0);
            cv::imwrite((fs::path(stain_out) / (e.path().stem().string() + ".png")).string(), h16);
            any = true;
        }
        if (!any) throw std::invalid_argument("no readable images in " + stain_in);
        std::cout << "wrote hematoxylin maps to " << stain_out << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const cryoseg::data::DatasetError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
