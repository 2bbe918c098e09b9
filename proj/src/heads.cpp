#include "affground/heads.hpp"

#include <stdexcept>
#include <string>

namespace affground::heads {

namespace {
int stage_out_channels(int channels, int stage, int l_min) {
    if (stage == l_min) return 1;
    return std::max(1, channels >> stage);
}
}  // namespace

void register_heatmap_head(ParamStore& ps, int channels, int l_min, Rng& rng) {
    if (l_min == 0) {
        ps.add("heads.heatmap.reduce.w", uniform_init(rng, {1, channels, 1, 1}, channels));
        ps.add("heads.heatmap.reduce.b", Tensor({1}));
        return;
    }
    int cin = channels;
    for (int s = 1; s <= l_min; ++s) {
        int cout = stage_out_channels(channels, s, l_min);
        ps.add("heads.heatmap.deconv" + std::to_string(s) + ".w",
               uniform_init(rng, {cin, cout, 4, 4}, cin * 16));
        ps.add("heads.heatmap.deconv" + std::to_string(s) + ".b", Tensor({cout}));
        cin = cout;
    }
}

void register_action_head(ParamStore& ps, int channels, int classes, int pool_grid, Rng& rng) {
    if (classes < 2) throw std::invalid_argument("action head needs at least 2 classes");
    int din = channels * pool_grid * pool_grid;
    ps.add("heads.action.fc1.w", uniform_init(rng, {din, channels}, din));
    ps.add("heads.action.fc1.b", Tensor({channels}));
    ps.add("heads.action.fc2.w", uniform_init(rng, {channels, classes}, channels));
    ps.add("heads.action.fc2.b", Tensor({classes}));
}

ag::NodePtr heatmap_head(const decoder::DecoderState& d, int target_h, int target_w,
                         ParamStore& ps) {
    int l_min = d.level;
    if ((d.h << l_min) != target_h || (d.w << l_min) != target_w)
        throw std::invalid_argument("heatmap_head: 2^l_min * decoder dims " +
                                    std::to_string(d.h << l_min) + "x" +
                                    std::to_string(d.w << l_min) + " != target " +
                                    std::to_string(target_h) + "x" + std::to_string(target_w));
    auto x = ag::tokens_to_chw(d.d, d.h, d.w);
    if (l_min == 0) {
        auto out = ag::conv2d(x, ps.get("heads.heatmap.reduce.w"), ps.get("heads.heatmap.reduce.b"),
                              1, 0);
        return ag::reshape(out, {target_h, target_w});
    }
    for (int s = 1; s <= l_min; ++s) {
        x = ag::conv_transpose2d(x, ps.get("heads.heatmap.deconv" + std::to_string(s) + ".w"),
                                 ps.get("heads.heatmap.deconv" + std::to_string(s) + ".b"),
                                 /*stride=*/2, /*pad=*/1);
        if (s != l_min) x = ag::gelu(x);
    }
    return ag::reshape(x, {target_h, target_w});
}

ag::NodePtr action_head(const decoder::DecoderState& d, int classes, int pool_grid,
                        ParamStore& ps) {
    if (classes < 2) throw std::invalid_argument("action head needs at least 2 classes");
    auto x = ag::tokens_to_chw(d.d, d.h, d.w);
    auto pooled = ag::adaptive_avg_pool(x, pool_grid, pool_grid);
    int c = x->value.dim(0);
    auto flat = ag::reshape(pooled, {1, c * pool_grid * pool_grid});
    auto h = ag::gelu(ag::linear(flat, ps.get("heads.action.fc1.w"), ps.get("heads.action.fc1.b")));
    auto logits = ag::linear(h, ps.get("heads.action.fc2.w"), ps.get("heads.action.fc2.b"));
    return ag::reshape(logits, {classes});
}

ag::NodePtr heatmap_loss(const heatmaps::Heatmap& gt, const ag::NodePtr& pred_logits) {
    if (gt.kind != heatmaps::HeatmapKind::sum_normalized)
        throw std::invalid_argument("heatmap_loss: gt must be sum-normalized");
    if (gt.values.shape != pred_logits->value.shape)
        throw std::invalid_argument("heatmap_loss: shape mismatch " + gt.values.shape_str() +
                                    " vs " + pred_logits->value.shape_str());
    return ag::kld_loss(gt.values, pred_logits);
}

ag::NodePtr total_loss(const PredictionOutput& out, const heatmaps::Heatmap& gt_heatmap,
                       const std::optional<int>& gt_action, double action_weight) {
    auto lh = heatmap_loss(gt_heatmap, out.heatmap_logits);
    if (!out.action_logits) {
        if (gt_action) throw std::invalid_argument("action label given but action head absent");
        return lh;
    }
    if (!gt_action) throw std::invalid_argument("action head present but label absent");
    int c = out.action_logits->value.dim(0);
    if (*gt_action < 1 || *gt_action > c)
        throw std::out_of_range("action label out of [1.." + std::to_string(c) + "]");
    auto la = ag::cross_entropy(out.action_logits, *gt_action - 1);
    return ag::add(lh, ag::scale(la, action_weight));
}

}  // namespace affground::heads
