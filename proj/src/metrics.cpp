#include "cryoseg/metrics.hpp"

#include <algorithm>
#include <stdexcept>
#include <unordered_map>

namespace cryoseg::metrics {

namespace {

struct OverlapTable {
    std::vector<int> gt_ids, pred_ids;
    std::unordered_map<int, long long> gt_area, pred_area;
    // key = gt_id * 2^32 + pred_id
    std::unordered_map<long long, long long> inter;

    static long long key(int g, int p) { return (static_cast<long long>(g) << 32) | static_cast<unsigned>(p); }
};

void check_shapes(const cv::Mat& gt, const cv::Mat& pred) {
    if (gt.size() != pred.size())
        throw std::invalid_argument("instance maps have mismatched shapes");
    if (gt.type() != CV_32S || pred.type() != CV_32S)
        throw std::invalid_argument("instance maps must be CV_32S");
}

OverlapTable build_table(const cv::Mat& gt, const cv::Mat& pred) {
    check_shapes(gt, pred);
    OverlapTable t;
    for (int y = 0; y < gt.rows; ++y) {
        const int* g = gt.ptr<int>(y);
        const int* p = pred.ptr<int>(y);
        for (int x = 0; x < gt.cols; ++x) {
            if (g[x] > 0) {
                if (t.gt_area.emplace(g[x], 0).second) t.gt_ids.push_back(g[x]);
                ++t.gt_area[g[x]];
            }
            if (p[x] > 0) {
                if (t.pred_area.emplace(p[x], 0).second) t.pred_ids.push_back(p[x]);
                ++t.pred_area[p[x]];
            }
            if (g[x] > 0 && p[x] > 0) ++t.inter[OverlapTable::key(g[x], p[x])];
        }
    }
    std::sort(t.gt_ids.begin(), t.gt_ids.end());
    std::sort(t.pred_ids.begin(), t.pred_ids.end());
    return t;
}

double iou_of(const OverlapTable& t, int g, int p) {
    auto it = t.inter.find(OverlapTable::key(g, p));
    if (it == t.inter.end()) return 0.0;
    double i = static_cast<double>(it->second);
    double u = static_cast<double>(t.gt_area.at(g) + t.pred_area.at(p)) - i;
    return i / u;
}

MatchResult match_from_table(const OverlapTable& t, double iou_floor) {
    struct Cand {
        int gt, pred;
        double iou;
    };
    std::vector<Cand> cands;
    for (int g : t.gt_ids) {
        int best = -1;
        double best_iou = 0.0;
        for (int p : t.pred_ids) {
            double v = iou_of(t, g, p);
            if (v > best_iou) {
                best_iou = v;
                best = p;
            }
        }
        if (best >= 0 && best_iou > iou_floor) cands.push_back({g, best, best_iou});
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        if (a.iou != b.iou) return a.iou > b.iou;
        return a.gt < b.gt;
    });

    MatchResult r;
    std::unordered_map<int, bool> gt_used, pred_used;
    for (const Cand& c : cands) {
        if (pred_used[c.pred]) continue;
        pred_used[c.pred] = true;
        gt_used[c.gt] = true;
        r.pairs.push_back({c.gt, c.pred, c.iou});
    }
    for (int g : t.gt_ids)
        if (!gt_used[g]) r.unmatched_gt.push_back(g);
    for (int p : t.pred_ids)
        if (!pred_used[p]) r.unmatched_pred.push_back(p);
    return r;
}

}  // namespace

MatchResult match_instances(const cv::Mat& gt, const cv::Mat& pred, double iou_floor) {
    return match_from_table(build_table(gt, pred), iou_floor);
}

double aji(const cv::Mat& gt, const cv::Mat& pred) {
    OverlapTable t = build_table(gt, pred);
    if (t.gt_ids.empty() && t.pred_ids.empty()) return 1.0;
    MatchResult m = match_from_table(t, 0.0);

    double num = 0.0, den = 0.0;
    for (const MatchedPair& p : m.pairs) {
        double i = static_cast<double>(t.inter.at(OverlapTable::key(p.gt_id, p.pred_id)));
        double u = static_cast<double>(t.gt_area.at(p.gt_id) + t.pred_area.at(p.pred_id)) - i;
        num += i;
        den += u;
    }
    for (int g : m.unmatched_gt) den += static_cast<double>(t.gt_area.at(g));
    for (int p : m.unmatched_pred) den += static_cast<double>(t.pred_area.at(p));
    return den > 0.0 ? num / den : 0.0;
}

MetricReport panoptic_quality(const cv::Mat& gt, const cv::Mat& pred) {
    OverlapTable t = build_table(gt, pred);
    MetricReport r;
    if (t.gt_ids.empty() && t.pred_ids.empty()) {
        r.pq = r.sq = r.rq = 1.0;
        return r;
    }
    MatchResult m = match_from_table(t, 0.5);
    r.tp = static_cast<int>(m.pairs.size());
    r.fp = static_cast<int>(m.unmatched_pred.size());
    r.fn = static_cast<int>(m.unmatched_gt.size());

    double iou_sum = 0.0;
    for (const MatchedPair& p : m.pairs) iou_sum += p.iou;
    r.rq = r.tp / (r.tp + 0.5 * r.fp + 0.5 * r.fn);
    r.sq = r.tp > 0 ? iou_sum / r.tp : 0.0;
    r.pq = r.rq * r.sq;
    return r;
}

double dice_score(const cv::Mat& gt, const cv::Mat& pred) {
    check_shapes(gt, pred);
    long long a = 0, b = 0, inter = 0;
    for (int y = 0; y < gt.rows; ++y) {
        const int* g = gt.ptr<int>(y);
        const int* p = pred.ptr<int>(y);
        for (int x = 0; x < gt.cols; ++x) {
            bool fg = g[x] > 0, fp = p[x] > 0;
            a += fg;
            b += fp;
            inter += (fg && fp);
        }
    }
    if (a + b == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

MetricReport evaluate_pair(const cv::Mat& gt, const cv::Mat& pred) {
    MetricReport r = panoptic_quality(gt, pred);
    r.aji = aji(gt, pred);
    r.dice = dice_score(gt, pred);
    return r;
}

namespace {

MetricReport mean_of(const std::vector<const MetricReport*>& rs) {
    MetricReport m;
    double n = static_cast<double>(rs.size());
    for (const MetricReport* r : rs) {
        m.aji += r->aji;
        m.pq += r->pq;
        m.sq += r->sq;
        m.rq += r->rq;
        m.dice += r->dice;
        m.tp += r->tp;
        m.fp += r->fp;
        m.fn += r->fn;
    }
    m.aji /= n;
    m.pq /= n;
    m.sq /= n;
    m.rq /= n;
    m.dice /= n;
    return m;
}

}  // namespace

Aggregates aggregate_reports(const std::vector<TaggedReport>& reports) {
    if (reports.empty()) throw std::invalid_argument("aggregate_reports: no reports");
    Aggregates a;
    std::map<std::string, std::vector<const MetricReport*>> by_organ;
    std::map<int, std::vector<const MetricReport*>> by_fold;
    for (const TaggedReport& r : reports) {
        by_organ[r.organ].push_back(&r.report);
        by_fold[r.fold].push_back(&r.report);
    }
    for (auto& [organ, rs] : by_organ) a.per_organ[organ] = mean_of(rs);
    std::vector<const MetricReport*> fold_means;
    for (auto& [fold, rs] : by_fold) a.per_fold[fold] = mean_of(rs);
    std::vector<const MetricReport*> fm;
    for (auto& [fold, r] : a.per_fold) fm.push_back(&r);
    a.overall = mean_of(fm);
    return a;
}

}  // namespace cryoseg::metrics
