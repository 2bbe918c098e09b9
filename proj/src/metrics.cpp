#include "affground/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "affground/autodiff.hpp"

namespace affground::metrics {

namespace {

void check_pair(const heatmaps::Heatmap& gt, const heatmaps::Heatmap& pred, const char* op) {
    if (!gt.values.same_shape(pred.values))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    gt.values.shape_str() + " vs " + pred.values.shape_str());
    if (std::abs(gt.sum() - 1.0) > 1e-6 || std::abs(pred.sum() - 1.0) > 1e-6)
        throw std::invalid_argument(std::string(op) + ": inputs must be sum-normalized");
}

// positives/negatives split by a set of positive pixel indices
double roc_area(const std::set<std::size_t>& pos_idx, const Tensor& pred) {
    if (pos_idx.empty()) throw std::invalid_argument("no annotation points");
    for (double v : pred.data)
        if (!std::isfinite(v)) throw std::invalid_argument("auc: non-finite prediction");
    std::vector<double> pos, neg;
    pos.reserve(pos_idx.size());
    neg.reserve(pred.data.size() - pos_idx.size());
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        if (pos_idx.count(i))
            pos.push_back(pred.data[i]);
        else
            neg.push_back(pred.data[i]);
    }
    if (neg.empty()) return 1.0;
    std::sort(pos.begin(), pos.end());
    std::sort(neg.begin(), neg.end());
    std::vector<double> thresholds(pos);
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
    // descending sweep; curve starts at (0,0) and ends at (1,1)
    double area = 0.0;
    double prev_fpr = 0.0, prev_tpr = 0.0;
    auto frac_ge = [](const std::vector<double>& sorted, double t) {
        auto it = std::lower_bound(sorted.begin(), sorted.end(), t);
        return static_cast<double>(sorted.end() - it) / static_cast<double>(sorted.size());
    };
    for (auto it = thresholds.rbegin(); it != thresholds.rend(); ++it) {
        double tpr = frac_ge(pos, *it);
        double fpr = frac_ge(neg, *it);
        area += 0.5 * (tpr + prev_tpr) * (fpr - prev_fpr);
        prev_fpr = fpr;
        prev_tpr = tpr;
    }
    area += 0.5 * (1.0 + prev_tpr) * (1.0 - prev_fpr);
    return area;
}

std::set<std::size_t> point_pixels(const heatmaps::AffordanceAnnotation& ann, int h, int w) {
    if (ann.points.empty()) throw std::invalid_argument("no annotation points");
    std::set<std::size_t> idx;
    for (const auto& [x, y] : ann.points) {
        int px = std::clamp(heatmaps::round_half_down(x), 0, w - 1);
        int py = std::clamp(heatmaps::round_half_down(y), 0, h - 1);
        idx.insert(static_cast<std::size_t>(py) * w + px);
    }
    return idx;
}

}  // namespace

double kld(const heatmaps::Heatmap& gt, const heatmaps::Heatmap& pred) {
    check_pair(gt, pred, "kld");
    double acc = 0.0;
    for (std::size_t i = 0; i < gt.values.data.size(); ++i) {
        double g = gt.values.data[i];
        if (g <= 0.0) continue;
        double p = std::max(pred.values.data[i], kKldEps);
        acc += g * std::log(g / p);
    }
    return acc;
}

double sim(const heatmaps::Heatmap& gt, const heatmaps::Heatmap& pred) {
    check_pair(gt, pred, "sim");
    double acc = 0.0;
    for (std::size_t i = 0; i < gt.values.data.size(); ++i)
        acc += std::min(gt.values.data[i], pred.values.data[i]);
    return acc;
}

double auc_judd(const heatmaps::AffordanceAnnotation& gt_points, const heatmaps::Heatmap& pred) {
    return roc_area(point_pixels(gt_points, pred.height(), pred.width()), pred.values);
}

Tensor bilinear_resize_map(const Tensor& m, int oh, int ow) {
    return ag::bilinear_resize2d(ag::constant(m), oh, ow)->value;
}

MetricReport evaluate_at(const heatmaps::Heatmap& gt, const heatmaps::Heatmap& pred, int h, int w,
                         const std::optional<heatmaps::AffordanceAnnotation>& annotation,
                         AucSource source) {
    if (h < 1 || w < 1) throw std::invalid_argument("evaluate_at: resolution must be positive");
    if (!gt.values.same_shape(pred.values))
        throw std::invalid_argument("evaluate_at: shape mismatch");
    int nh = gt.height(), nw = gt.width();
    if (h > nh || w > nw)
        throw std::invalid_argument("evaluate_at: resolution exceeds native " +
                                    gt.values.shape_str());

    MetricReport rep;
    rep.res_h = h;
    rep.res_w = w;

    heatmaps::Heatmap gt_r = gt, pred_r = pred;
    bool resized = (h != nh || w != nw);
    if (resized) {
        // resize does not preserve sums; metrics need distributions
        gt_r = heatmaps::sum_normalize(
            heatmaps::Heatmap(bilinear_resize_map(gt.values, h, w), heatmaps::HeatmapKind::raw));
        pred_r = heatmaps::sum_normalize(
            heatmaps::Heatmap(bilinear_resize_map(pred.values, h, w), heatmaps::HeatmapKind::raw));
    }
    rep.kld = kld(gt_r, pred_r);
    rep.sim = sim(gt_r, pred_r);

    if (source == AucSource::points) {
        if (!annotation) throw std::invalid_argument("evaluate_at: annotation points required");
        heatmaps::AffordanceAnnotation ann = *annotation;
        if (resized) {
            double sy = static_cast<double>(h) / nh, sx = static_cast<double>(w) / nw;
            for (auto& [x, y] : ann.points) {
                x *= sx;
                y *= sy;
            }
        }
        rep.auc_j = roc_area(point_pixels(ann, h, w), pred_r.values);
    } else {
        double mx = *std::max_element(gt_r.values.data.begin(), gt_r.values.data.end());
        std::set<std::size_t> pos;
        for (std::size_t i = 0; i < gt_r.values.data.size(); ++i)
            if (gt_r.values.data[i] >= 0.5 * mx) pos.insert(i);
        rep.auc_j = roc_area(pos, pred_r.values);
    }
    return rep;
}

}  // namespace affground::metrics
