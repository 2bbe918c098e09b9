#include "affground/encoder.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "affground/heatmaps.hpp"

namespace affground::encoder {

void EncoderConfig::validate() const {
    if (channels < 1) throw std::invalid_argument("channels must be positive");
    if (levels.empty()) throw std::invalid_argument("levels must be nonempty");
    for (std::size_t i = 0; i < levels.size(); ++i) {
        if (levels[i] < 2 || levels[i] > 5)
            throw std::invalid_argument("levels must lie in {2,3,4,5}");
        if (i && levels[i] != levels[i - 1] + 1)
            throw std::invalid_argument("levels must be contiguous ascending");
    }
}

namespace {

std::string proj_name(const EncoderConfig& cfg, bool video, int level) {
    std::string modality =
        cfg.shared_input_proj_between_modalities ? "shared" : (video ? "vid" : "img");
    std::string lvl = cfg.per_level_input_proj ? "l" + std::to_string(level) : "all";
    return "encoder.proj." + modality + "." + lvl;
}

std::string trunk_prefix(const EncoderConfig& cfg, bool video) {
    return cfg.shared_backbone ? "encoder.trunk.shared" : (video ? "encoder.trunk.vid"
                                                                 : "encoder.trunk.img");
}

ag::NodePtr normalize_pixels(const Tensor& img, const EncoderConfig& cfg) {
    if (img.ndim() != 3 || img.dim(0) != 3)
        throw std::invalid_argument("image must be (3,h,w)");
    Tensor out = img;
    int plane = img.dim(1) * img.dim(2);
    for (int c = 0; c < 3; ++c) {
        double mean = cfg.pixel_mean[static_cast<std::size_t>(c)];
        double std_ = cfg.pixel_std[static_cast<std::size_t>(c)];
        double* p = out.ptr() + static_cast<std::size_t>(c) * plane;
        for (int i = 0; i < plane; ++i) p[i] = (p[i] / 255.0 - mean) / std_;
    }
    return ag::constant(std::move(out));
}

void check_dims(const Tensor& img, const EncoderConfig& cfg) {
    int div = 1 << cfg.max_level();
    if (img.dim(1) % div != 0 || img.dim(2) % div != 0)
        throw std::invalid_argument("image dims must be divisible by " + std::to_string(div) +
                                    " for levels up to " + std::to_string(cfg.max_level()));
}

const Trunk& select_trunk(const EncoderConfig& cfg, const Trunk* custom) {
    if (cfg.trunk == TrunkKind::pluggable) {
        if (!custom) throw std::invalid_argument("pluggable trunk requires a Trunk implementation");
        return *custom;
    }
    return reference_trunk();
}

std::map<int, ag::NodePtr> apply_trunk_and_proj(const Tensor& img, const EncoderConfig& cfg,
                                                ParamStore& ps, bool video, const Trunk* custom) {
    auto x = normalize_pixels(img, cfg);
    auto pyr = select_trunk(cfg, custom).forward(x, cfg, ps, trunk_prefix(cfg, video));
    std::map<int, ag::NodePtr> out;
    for (int l : cfg.levels) {
        auto feat = pyr.at(l);
        int h = feat->value.dim(1), w = feat->value.dim(2);
        auto tokens = ag::chw_to_tokens(feat);
        auto projected = ag::linear(tokens, ps.get(proj_name(cfg, video, l) + ".w"),
                                    ps.get(proj_name(cfg, video, l) + ".b"));
        out[l] = ag::tokens_to_chw(projected, h, w);
    }
    return out;
}

}  // namespace

void ReferenceConvTrunk::register_params(ParamStore& ps, const EncoderConfig& cfg,
                                         const std::string& prefix, Rng& rng) const {
    int tw = cfg.trunk_width();
    int c = cfg.channels;
    ps.add(prefix + ".stem.w", uniform_init(rng, {tw, 3, 3, 3}, 3 * 9));
    ps.add(prefix + ".stem.b", Tensor({tw}));
    for (int l = 2; l <= cfg.max_level(); ++l) {
        ps.add(prefix + ".down" + std::to_string(l) + ".w", uniform_init(rng, {tw, tw, 3, 3}, tw * 9));
        ps.add(prefix + ".down" + std::to_string(l) + ".b", Tensor({tw}));
    }
    for (int l : cfg.levels) {
        ps.add(prefix + ".lat" + std::to_string(l) + ".w", uniform_init(rng, {c, tw, 1, 1}, tw));
        ps.add(prefix + ".lat" + std::to_string(l) + ".b", Tensor({c}));
        ps.add(prefix + ".out" + std::to_string(l) + ".w", uniform_init(rng, {c, c, 3, 3}, c * 9));
        ps.add(prefix + ".out" + std::to_string(l) + ".b", Tensor({c}));
    }
}

std::map<int, ag::NodePtr> ReferenceConvTrunk::forward(const ag::NodePtr& img,
                                                       const EncoderConfig& cfg, ParamStore& ps,
                                                       const std::string& prefix) const {
    auto x = ag::gelu(ag::conv2d(img, ps.get(prefix + ".stem.w"), ps.get(prefix + ".stem.b"),
                                 /*stride=*/2, /*pad=*/1));
    std::map<int, ag::NodePtr> trunk_feats;
    for (int l = 2; l <= cfg.max_level(); ++l) {
        x = ag::gelu(ag::conv2d(x, ps.get(prefix + ".down" + std::to_string(l) + ".w"),
                                ps.get(prefix + ".down" + std::to_string(l) + ".b"), 2, 1));
        trunk_feats[l] = x;
    }
    // lateral 1x1 to C, top-down nearest fusion, 3x3 output conv per level
    std::map<int, ag::NodePtr> out;
    ag::NodePtr top;
    for (int l = cfg.max_level(); l >= cfg.min_level(); --l) {
        auto lat = ag::conv2d(trunk_feats.at(l), ps.get(prefix + ".lat" + std::to_string(l) + ".w"),
                              ps.get(prefix + ".lat" + std::to_string(l) + ".b"), 1, 0);
        top = top ? ag::add(lat, ag::upsample2x_chw(top)) : lat;
        out[l] = ag::conv2d(top, ps.get(prefix + ".out" + std::to_string(l) + ".w"),
                            ps.get(prefix + ".out" + std::to_string(l) + ".b"), 1, 1);
    }
    return out;
}

const Trunk& reference_trunk() {
    static ReferenceConvTrunk t;
    return t;
}

void register_params(ParamStore& ps, const EncoderConfig& cfg, Rng& rng, const Trunk* custom) {
    cfg.validate();
    const Trunk& trunk = select_trunk(cfg, custom);
    trunk.register_params(ps, cfg, trunk_prefix(cfg, /*video=*/false), rng);
    if (!cfg.shared_backbone)
        trunk.register_params(ps, cfg, trunk_prefix(cfg, /*video=*/true), rng);
    int c = cfg.channels;
    auto add_proj = [&](bool video) {
        if (cfg.per_level_input_proj) {
            for (int l : cfg.levels) {
                ps.add(proj_name(cfg, video, l) + ".w", uniform_init(rng, {c, c}, c));
                ps.add(proj_name(cfg, video, l) + ".b", Tensor({c}));
            }
        } else {
            ps.add(proj_name(cfg, video, 0) + ".w", uniform_init(rng, {c, c}, c));
            ps.add(proj_name(cfg, video, 0) + ".b", Tensor({c}));
        }
    };
    add_proj(/*video=*/false);
    if (!cfg.shared_input_proj_between_modalities) add_proj(/*video=*/true);
}

FeaturePyramid encode_image(const Tensor& img, const EncoderConfig& cfg, ParamStore& ps,
                            const Trunk* custom) {
    cfg.validate();
    check_dims(img, cfg);
    FeaturePyramid pyr;
    pyr.video = false;
    pyr.levels = apply_trunk_and_proj(img, cfg, ps, /*video=*/false, custom);
    return pyr;
}

FeaturePyramid encode_video(const Tensor& clip, const EncoderConfig& cfg, ParamStore& ps,
                            const Trunk* custom) {
    cfg.validate();
    if (clip.ndim() != 4 || clip.dim(1) != 3)
        throw std::invalid_argument("clip must be (t,3,h,w)");
    int t = clip.dim(0);
    if (t < 1) throw std::invalid_argument("empty clip");
    int h = clip.dim(2), w = clip.dim(3);
    std::int64_t per = static_cast<std::int64_t>(3) * h * w;
    std::map<int, std::vector<ag::NodePtr>> per_level;
    for (int i = 0; i < t; ++i) {
        Tensor f({3, h, w});
        std::memcpy(f.ptr(), clip.ptr() + static_cast<std::size_t>(i) * per,
                    sizeof(double) * static_cast<std::size_t>(per));
        check_dims(f, cfg);
        auto frame_pyr = apply_trunk_and_proj(f, cfg, ps, /*video=*/true, custom);
        for (auto& [l, node] : frame_pyr) per_level[l].push_back(node);
    }
    FeaturePyramid pyr;
    pyr.video = true;
    for (auto& [l, frames] : per_level) pyr.levels[l] = ag::stack_frames(frames);
    return pyr;
}

std::vector<int> uniform_sample_indices(int t, int max_t) {
    if (max_t < 1) throw std::invalid_argument("max_t must be >= 1");
    if (t < 1) throw std::invalid_argument("empty clip");
    if (t <= max_t) {
        std::vector<int> all(static_cast<std::size_t>(t));
        for (int i = 0; i < t; ++i) all[static_cast<std::size_t>(i)] = i;
        return all;
    }
    std::vector<int> idx(static_cast<std::size_t>(max_t));
    if (max_t == 1) {
        idx[0] = 0;
        return idx;
    }
    for (int k = 0; k < max_t; ++k) {
        double pos = static_cast<double>(k) * (t - 1) / (max_t - 1);
        idx[static_cast<std::size_t>(k)] = heatmaps::round_half_down(pos);
    }
    return idx;
}

Tensor uniform_sample_frames(const Tensor& clip, int max_t) {
    if (clip.ndim() != 4) throw std::invalid_argument("clip must be (t,3,h,w)");
    auto idx = uniform_sample_indices(clip.dim(0), max_t);
    if (static_cast<int>(idx.size()) == clip.dim(0)) return clip;
    Tensor out({static_cast<int>(idx.size()), clip.dim(1), clip.dim(2), clip.dim(3)});
    std::int64_t per = clip.numel() / clip.dim(0);
    for (std::size_t k = 0; k < idx.size(); ++k)
        std::memcpy(out.ptr() + k * static_cast<std::size_t>(per),
                    clip.ptr() + static_cast<std::size_t>(idx[k]) * per,
                    sizeof(double) * static_cast<std::size_t>(per));
    return out;
}

}  // namespace affground::encoder
