#pragma once

#include <optional>
#include <string>
#include <vector>

#include "affground/autodiff.hpp"
#include "affground/encoder.hpp"
#include "affground/params.hpp"

namespace affground::decoder {

struct DecoderConfig {
    int channels = 256;
    int heads = 0;  // 0 -> max(1, channels/64)
    int blocks_per_stage = 1;
    bool share_block_across_stages = true;
    double mlp_expansion = 4.0;
    bool use_relpos = true;
    int relpos_extent = 0;  // max grid extent the tables must cover; set at registration

    int resolved_heads() const { return heads > 0 ? heads : std::max(1, channels / 64); }
    void validate() const;
};

struct TemporalPyramidConfig {
    int video_level = 3;
    std::vector<int> schedule;  // temporal length per decode stage, nonincreasing
    int c3d_kernel = 3;
    int c3d_temporal_stride = 2;

    void validate() const;
};

// [T, ceil(T/2), ceil(T/4), ...] when pyramid is on, [T, T, ...] otherwise
std::vector<int> make_schedule(int t, int stages, bool pyramid);

// Flattened spatial decoding at one pyramid level.
struct DecoderState {
    ag::NodePtr d;  // (h*w, C)
    int level = 0;
    int h = 0, w = 0;
};

// per-stage attention weights captured for audit
struct AttnTrace {
    std::vector<std::pair<std::string, Tensor>> records;
};

void register_params(ParamStore& ps, const DecoderConfig& cfg, int stages, Rng& rng);

// Pre-norm self-attention term over image tokens (no positional term).
ag::NodePtr msa(const ag::NodePtr& state, ParamStore& ps, const std::string& prefix, int heads,
                AttnTrace* trace = nullptr, const std::string& tag = "msa");

struct RelposGrids {
    int hq = 0, wq = 0;       // query grid
    int tk = 1, hk = 0, wk = 0;  // key grid
};

// Cross-attention term: query tokens against flattened video tokens. Applies
// layer norm + q/k/v maps, adds the decomposed relative position term when
// grids are given, concatenates heads, applies the output map.
ag::NodePtr mca(const ag::NodePtr& query_state, const ag::NodePtr& keys, const ag::NodePtr& values,
                const std::optional<RelposGrids>& relpos, ParamStore& ps,
                const std::string& prefix, int heads, AttnTrace* trace = nullptr,
                const std::string& tag = "mca");

ag::NodePtr mlp_term(const ag::NodePtr& state, ParamStore& ps, const std::string& prefix);

// Nearest 2x upsampling of a token grid, FPN style.
ag::NodePtr up_nearest(const DecoderState& d, int target_h, int target_w);

// Progressively strided temporal features; step 0 is the input. A step whose
// schedule entry repeats the previous length reuses those features; a halving
// entry applies that step's spatio-temporal conv (stride on T only).
std::vector<ag::NodePtr> temporal_pyramid(const ag::NodePtr& vid_feats,
                                          const TemporalPyramidConfig& tcfg, ParamStore& ps,
                                          const DecoderConfig& cfg);

// Single-scale decoding: residual MSA, residual MCA against the flattened
// spatio-temporal video tokens, residual MLP.
DecoderState decode_single(const ag::NodePtr& e_img_l, int level, const ag::NodePtr& e_vid,
                           ParamStore& ps, const DecoderConfig& cfg, AttnTrace* trace = nullptr);

// Coarse-to-fine decoding over all pyramid levels; each finer stage adds the
// nearest-upsampled previous decoding into the MSA input. The coarsest stage
// pairs with the longest temporal length. Returns the state at min(levels).
DecoderState decode_multi(const encoder::FeaturePyramid& img_pyr,
                          const encoder::FeaturePyramid& vid_pyr,
                          const TemporalPyramidConfig& tcfg, ParamStore& ps,
                          const DecoderConfig& cfg, AttnTrace* trace = nullptr);

}  // namespace affground::decoder
