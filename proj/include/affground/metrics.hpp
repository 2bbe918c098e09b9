#pragma once

#include <optional>

#include "affground/heatmaps.hpp"
#include "affground/tensor.hpp"

namespace affground::metrics {

struct MetricReport {
    double kld = 0.0;
    double sim = 0.0;
    double auc_j = 0.0;
    int res_h = 0;
    int res_w = 0;
};

// floor inside kld's log; oracles must use the same value
inline constexpr double kKldEps = 1e-12;

// sum over cells with gt>0 of gt * log(gt / max(pred, eps))
double kld(const heatmaps::Heatmap& gt, const heatmaps::Heatmap& pred);

// histogram intersection: sum of cellwise min
double sim(const heatmaps::Heatmap& gt, const heatmaps::Heatmap& pred);

// Judd ROC area: positives are pred values at annotation pixels, negatives
// pred values everywhere else; thresholds sweep all positive values with
// ">= threshold" salient; trapezoidal integration.
double auc_judd(const heatmaps::AffordanceAnnotation& gt_points, const heatmaps::Heatmap& pred);

// where evaluate_at takes AUC-J positives from when resolution is reduced
enum class AucSource {
    points,     // annotation points, coordinates rescaled (round-half-down, deduplicated)
    threshold,  // cells of the resized gt at >= half its max
};

// bilinear resize (align_corners=false) of a 2-D map; shared with the
// differentiable op so semantics match exactly
Tensor bilinear_resize_map(const Tensor& m, int oh, int ow);

// Resizes both maps to (h,w), renormalizes, computes all three metrics.
// At native resolution this is identical to calling the metrics directly.
MetricReport evaluate_at(const heatmaps::Heatmap& gt, const heatmaps::Heatmap& pred, int h, int w,
                         const std::optional<heatmaps::AffordanceAnnotation>& annotation,
                         AucSource source = AucSource::points);

}  // namespace affground::metrics
