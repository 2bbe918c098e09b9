#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "affground/tensor.hpp"

namespace affground::heatmaps {

enum class HeatmapKind { sum_normalized, logits, raw };

// 2-D map over the target image. sum_normalized maps are nonnegative and sum
// to 1 within 1e-6.
struct Heatmap {
    Tensor values;  // (h, w)
    HeatmapKind kind = HeatmapKind::raw;

    Heatmap() = default;
    Heatmap(Tensor v, HeatmapKind k);

    int height() const { return values.dim(0); }
    int width() const { return values.dim(1); }
    double sum() const;
    void validate() const;  // throws on invariant violation
};

// Annotated interaction points in target-image pixel space, plus an optional
// 1-based action class.
struct AffordanceAnnotation {
    std::vector<std::pair<double, double>> points;  // (x, y)
    std::optional<int> action;
};

struct GaussianTargetSpec {
    int kernel_size = 0;  // odd, positive
    double sigma = 0.0;   // positive

    void validate() const;
};

// largest odd integer <= sqrt(h*w)/3, floored at 1
int default_kernel_size(int h, int w);
// blur convention pairing sigma to kernel size: 0.3*((k-1)/2 - 1) + 0.8
double default_sigma(int kernel_size);
GaussianTargetSpec default_target_spec(int h, int w);

// round-half-down: 2.5 -> 2, 2.51 -> 3
int round_half_down(double x);

// Separable Gaussian blur. Out-of-frame kernel taps are reflected back inside
// (mirror about edge pixel centers), so total mass is preserved exactly.
Tensor gaussian_blur(const Tensor& m, const GaussianTargetSpec& spec);

// Gaussian-blurred, sum-normalized target from annotation points.
Heatmap points_to_target(const AffordanceAnnotation& annotation, int h, int w,
                         const GaussianTargetSpec& spec);

// sigma_g: cell / sum
Heatmap sum_normalize(const Heatmap& m);

// sigma_h: joint softmax over all cells, max-stabilized
Heatmap softmax_normalize(const Heatmap& m);

struct Box {
    double x0, y0, x1, y1;
};

// Binary box mask, blurred and sum-normalized. Box is clipped to the frame.
Heatmap box_to_mask_heatmap(const Box& box, int h, int w, const GaussianTargetSpec& spec);

}  // namespace affground::heatmaps
