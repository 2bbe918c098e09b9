#pragma once

#include <array>
#include <map>
#include <vector>

#include "affground/autodiff.hpp"
#include "affground/params.hpp"
#include "affground/tensor.hpp"

namespace affground::encoder {

enum class TrunkKind { reference_conv, pluggable };

struct EncoderConfig {
    int channels = 256;
    std::vector<int> levels = {2, 3, 4, 5};  // stride exponents, contiguous
    TrunkKind trunk = TrunkKind::reference_conv;
    bool shared_backbone = true;
    bool shared_input_proj_between_modalities = true;
    bool per_level_input_proj = true;
    // input pixels in [0,255] are scaled to [0,1] then standardized
    std::array<double, 3> pixel_mean{0.5, 0.5, 0.5};
    std::array<double, 3> pixel_std{0.25, 0.25, 0.25};

    void validate() const;
    int min_level() const { return levels.front(); }
    int max_level() const { return levels.back(); }
    int trunk_width() const { return channels >= 16 ? channels / 2 : 8; }
};

// Map from stride exponent l to features: image (C, h/2^l, w/2^l), video
// (t, C, h/2^l, w/2^l). All levels share C.
struct FeaturePyramid {
    std::map<int, ag::NodePtr> levels;
    bool video = false;
};

// Swappable spatial trunk. The reference implementation is a small strided
// conv pyramid with lateral top-down fusion matching the FPN shape contract.
class Trunk {
  public:
    virtual ~Trunk() = default;
    virtual void register_params(ParamStore& ps, const EncoderConfig& cfg,
                                 const std::string& prefix, Rng& rng) const = 0;
    // img is a normalized (3,h,w) node; returns raw pyramid before input proj
    virtual std::map<int, ag::NodePtr> forward(const ag::NodePtr& img, const EncoderConfig& cfg,
                                               ParamStore& ps,
                                               const std::string& prefix) const = 0;
};

class ReferenceConvTrunk final : public Trunk {
  public:
    void register_params(ParamStore& ps, const EncoderConfig& cfg, const std::string& prefix,
                         Rng& rng) const override;
    std::map<int, ag::NodePtr> forward(const ag::NodePtr& img, const EncoderConfig& cfg,
                                       ParamStore& ps, const std::string& prefix) const override;
};

const Trunk& reference_trunk();

// Registers trunk/FPN ("encoder.trunk.*", backbone learning-rate group) and
// input projections ("encoder.proj.*"). A custom trunk is required when
// cfg.trunk == pluggable and ignored otherwise.
void register_params(ParamStore& ps, const EncoderConfig& cfg, Rng& rng,
                     const Trunk* custom = nullptr);

// img: (3,h,w) pixels in [0,255]; dims must divide 2^max(levels)
FeaturePyramid encode_image(const Tensor& img, const EncoderConfig& cfg, ParamStore& ps,
                            const Trunk* custom = nullptr);
// clip: (t,3,h,w); per-frame application of the spatial trunk
FeaturePyramid encode_video(const Tensor& clip, const EncoderConfig& cfg, ParamStore& ps,
                            const Trunk* custom = nullptr);

// keeps order; indices evenly spaced over [0,t-1] incl. endpoints, round-half-down
Tensor uniform_sample_frames(const Tensor& clip, int max_t);
std::vector<int> uniform_sample_indices(int t, int max_t);

}  // namespace affground::encoder
