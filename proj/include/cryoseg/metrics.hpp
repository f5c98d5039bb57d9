#pragma once

#include <map>
#include <string>
#include <vector>
#include <opencv2/core.hpp>

namespace cryoseg::metrics {

/// One accepted ground-truth/prediction pair.
struct MatchedPair {
    int gt_id;
    int pred_id;
    double iou;
};

struct MatchResult {
    std::vector<MatchedPair> pairs;
    std::vector<int> unmatched_gt;
    std::vector<int> unmatched_pred;
};

struct MetricReport {
    double aji = 0.0;
    double pq = 0.0;
    double sq = 0.0;
    double rq = 0.0;
    double dice = 0.0;
    int tp = 0;
    int fp = 0;
    int fn = 0;
};

struct TaggedReport {
    std::string id;
    std::string organ;
    int fold = 0;
    MetricReport report;
};

struct Aggregates {
    std::map<std::string, MetricReport> per_organ;
    std::map<int, MetricReport> per_fold;
    MetricReport overall;  // unweighted mean across folds
};

/// Greedy one-to-one max-IoU matching. For each ground-truth instance the
/// candidate is the prediction with maximal IoU; candidates with
/// IoU > iou_floor are accepted in order of decreasing IoU (ties broken by
/// lower gt id), each prediction at most once.
MatchResult match_instances(const cv::Mat& gt, const cv::Mat& pred, double iou_floor);

/// Aggregated Jaccard index. Both maps CV_32S, 0 = background. Empty vs
/// empty is defined as 1.
double aji(const cv::Mat& gt, const cv::Mat& pred);

/// Panoptic quality at IoU floor 0.5; fills pq/sq/rq/tp/fp/fn.
MetricReport panoptic_quality(const cv::Mat& gt, const cv::Mat& pred);

/// Dice over binarized foregrounds; empty vs empty is 1.
double dice_score(const cv::Mat& gt, const cv::Mat& pred);

/// Full per-image report (aji + pq fields + dice).
MetricReport evaluate_pair(const cv::Mat& gt, const cv::Mat& pred);

/// Unweighted per-organ and per-fold means plus the grand mean across
/// folds. Throws std::invalid_argument on empty input.
Aggregates aggregate_reports(const std::vector<TaggedReport>& reports);

}  // namespace cryoseg::metrics
