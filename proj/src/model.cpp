#include "affground/model.hpp"

#include <stdexcept>

#include "affground/metrics.hpp"

namespace affground::harness {

void ModelConfig::validate() const {
    enc.validate();
    dec.validate();
    if (enc.channels != dec.channels)
        throw std::invalid_argument("encoder/decoder channel mismatch");
    if (spatial_size < (1 << enc.max_level()))
        throw std::invalid_argument("spatial_size too small for configured levels");
    if (spatial_size % (1 << enc.max_level()) != 0)
        throw std::invalid_argument("spatial_size must divide by 2^max_level");
    if (video_level < enc.min_level() || video_level > enc.max_level())
        throw std::invalid_argument("video_level must be one of the configured levels");
    if (action_classes == 1) throw std::invalid_argument("action head needs at least 2 classes");
    if (pool_grid < 1) throw std::invalid_argument("pool_grid must be >= 1");
}

GroundingModel::GroundingModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    // relpos tables must cover the finest query grid and the video grid
    int finest = cfg_.spatial_size >> cfg_.enc.min_level();
    int video_grid = cfg_.spatial_size >> cfg_.video_level;
    cfg_.dec.relpos_extent = std::max(finest, video_grid);

    Rng rng(cfg_.seed);
    encoder::register_params(ps_, cfg_.enc, rng);
    decoder::register_params(ps_, cfg_.dec, cfg_.stages(), rng);
    heads::register_heatmap_head(ps_, cfg_.enc.channels, cfg_.enc.min_level(), rng);
    if (cfg_.action_classes > 0)
        heads::register_action_head(ps_, cfg_.enc.channels, cfg_.action_classes, cfg_.pool_grid,
                                    rng);
}

heads::PredictionOutput GroundingModel::forward(const Tensor& clip, const Tensor& image,
                                               decoder::AttnTrace* trace) {
    auto img_pyr = encoder::encode_image(image, cfg_.enc, ps_);
    auto vid_pyr = encoder::encode_video(clip, cfg_.enc, ps_);
    decoder::TemporalPyramidConfig tcfg;
    tcfg.video_level = cfg_.video_level;
    if (!cfg_.temporal_pyramid) {
        int t = vid_pyr.levels.at(cfg_.video_level)->value.dim(0);
        tcfg.schedule = decoder::make_schedule(t, cfg_.stages(), false);
    }
    auto state = decoder::decode_multi(img_pyr, vid_pyr, tcfg, ps_, cfg_.dec, trace);
    heads::PredictionOutput out;
    out.heatmap_logits = heads::heatmap_head(state, cfg_.spatial_size, cfg_.spatial_size, ps_);
    if (cfg_.action_classes > 0)
        out.action_logits = heads::action_head(state, cfg_.action_classes, cfg_.pool_grid, ps_);
    return out;
}

ag::NodePtr GroundingModel::loss(const heads::PredictionOutput& out, const heatmaps::Heatmap& gt,
                                const std::optional<int>& gt_action, int supervise_h,
                                int supervise_w, double action_weight) {
    if (supervise_h > 0 && supervise_w > 0 &&
        (supervise_h != gt.height() || supervise_w != gt.width())) {
        auto logits_small = ag::bilinear_resize2d(out.heatmap_logits, supervise_h, supervise_w);
        auto gt_small = heatmaps::sum_normalize(heatmaps::Heatmap(
            metrics::bilinear_resize_map(gt.values, supervise_h, supervise_w),
            heatmaps::HeatmapKind::raw));
        heads::PredictionOutput coarse{logits_small, out.action_logits};
        return heads::total_loss(coarse, gt_small, gt_action, action_weight);
    }
    return heads::total_loss(out, gt, gt_action, action_weight);
}

heatmaps::Heatmap GroundingModel::predict_heatmap(const Tensor& clip, const Tensor& image) {
    auto out = forward(clip, image);
    return heatmaps::softmax_normalize(
        heatmaps::Heatmap(out.heatmap_logits->value, heatmaps::HeatmapKind::logits));
}

bool GroundingModel::is_backbone_param(const std::string& name) {
    return name.rfind("encoder.trunk.", 0) == 0;
}

}  // namespace affground::harness
