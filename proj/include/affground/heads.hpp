#pragma once

#include <optional>

#include "affground/autodiff.hpp"
#include "affground/decoder.hpp"
#include "affground/heatmaps.hpp"
#include "affground/params.hpp"

namespace affground::heads {

struct PredictionOutput {
    ag::NodePtr heatmap_logits;          // (h, w)
    ag::NodePtr action_logits = nullptr; // (c), absent when no action head
};

void register_heatmap_head(ParamStore& ps, int channels, int l_min, Rng& rng);
void register_action_head(ParamStore& ps, int channels, int classes, int pool_grid, Rng& rng);

// Stack of l_min stride-2 4x4 deconvs with per-stage channel halving down to
// a single channel; degenerate l_min=0 is a 1x1 channel reduction.
ag::NodePtr heatmap_head(const decoder::DecoderState& d, int target_h, int target_w,
                         ParamStore& ps);

// adaptive average pooling to a fixed grid, then an MLP to c logits
ag::NodePtr action_head(const decoder::DecoderState& d, int classes, int pool_grid,
                        ParamStore& ps);

// KL divergence between the sum-normalized gt and the softmax of the logits,
// summed over the gt support
ag::NodePtr heatmap_loss(const heatmaps::Heatmap& gt, const ag::NodePtr& pred_logits);

// L = L_h + action_weight * L_a; the action term is present iff the output
// has an action head, and gt_action (1-based) must match that
ag::NodePtr total_loss(const PredictionOutput& out, const heatmaps::Heatmap& gt_heatmap,
                       const std::optional<int>& gt_action, double action_weight = 1.0);

}  // namespace affground::heads
