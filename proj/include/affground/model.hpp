#pragma once

#include <optional>

#include "affground/decoder.hpp"
#include "affground/encoder.hpp"
#include "affground/heads.hpp"
#include "affground/params.hpp"

namespace affground::harness {

struct ModelConfig {
    encoder::EncoderConfig enc;
    decoder::DecoderConfig dec;
    int spatial_size = 256;
    int video_level = 3;
    bool temporal_pyramid = true;
    int action_classes = 0;  // 0 = no action head
    int pool_grid = 1;
    std::uint64_t seed = 0;

    void validate() const;
    int stages() const { return static_cast<int>(enc.levels.size()); }
};

// Encoder + multi-scale decoder + prediction heads over one (video, image)
// pair. Parameters live in a single store, namespaced per module; forward
// passes are read-only over them.
class GroundingModel {
  public:
    explicit GroundingModel(ModelConfig cfg);

    ParamStore& params() { return ps_; }
    const ParamStore& params() const { return ps_; }
    const ModelConfig& config() const { return cfg_; }

    // clip: (t,3,h,w); image: (3,h,w); pixels in [0,255]
    heads::PredictionOutput forward(const Tensor& clip, const Tensor& image,
                                    decoder::AttnTrace* trace = nullptr);

    // loss at native resolution, or at (supervise_h, supervise_w) with
    // bilinearly downsampled prediction logits and gt
    ag::NodePtr loss(const heads::PredictionOutput& out, const heatmaps::Heatmap& gt,
                     const std::optional<int>& gt_action, int supervise_h = 0,
                     int supervise_w = 0, double action_weight = 1.0);

    // softmax-normalized heatmap prediction at native resolution
    heatmaps::Heatmap predict_heatmap(const Tensor& clip, const Tensor& image);

    bool has_action_head() const { return cfg_.action_classes > 0; }

    // encoder trunk/FPN parameters train at the backbone learning-rate factor
    static bool is_backbone_param(const std::string& name);

  private:
    ModelConfig cfg_;
    ParamStore ps_;
};

}  // namespace affground::harness
