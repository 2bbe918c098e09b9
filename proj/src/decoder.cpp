#include "affground/decoder.hpp"

#include <cmath>
#include <stdexcept>

namespace affground::decoder {

void DecoderConfig::validate() const {
    if (channels < 1) throw std::invalid_argument("channels must be positive");
    int h = resolved_heads();
    if (channels % h != 0) throw std::invalid_argument("channels must divide by head count");
    if (blocks_per_stage < 1) throw std::invalid_argument("blocks_per_stage must be >= 1");
    if (mlp_expansion <= 0.0) throw std::invalid_argument("mlp_expansion must be positive");
}

void TemporalPyramidConfig::validate() const {
    if (schedule.empty()) throw std::invalid_argument("temporal schedule must be nonempty");
    for (std::size_t i = 0; i < schedule.size(); ++i) {
        if (schedule[i] < 1) throw std::invalid_argument("temporal lengths must be >= 1");
        if (i && schedule[i] > schedule[i - 1])
            throw std::invalid_argument("temporal schedule must be nonincreasing");
    }
}

std::vector<int> make_schedule(int t, int stages, bool pyramid) {
    if (t < 1 || stages < 1) throw std::invalid_argument("make_schedule: invalid sizes");
    std::vector<int> s(static_cast<std::size_t>(stages), t);
    if (pyramid)
        for (int i = 1; i < stages; ++i)
            s[static_cast<std::size_t>(i)] = (s[static_cast<std::size_t>(i - 1)] + 1) / 2;
    return s;
}

namespace {

std::string block_prefix(const DecoderConfig& cfg, int stage, int block) {
    std::string p = "decoder.";
    p += cfg.share_block_across_stages ? "shared" : "stage" + std::to_string(stage);
    return p + ".block" + std::to_string(block);
}

void register_block(ParamStore& ps, const DecoderConfig& cfg, const std::string& prefix,
                    Rng& rng) {
    int c = cfg.channels;
    int dh = c / cfg.resolved_heads();
    int hidden = static_cast<int>(std::lround(cfg.mlp_expansion * c));
    auto ln = [&](const std::string& n) {
        ps.add(prefix + n + ".gamma", Tensor::full({c}, 1.0));
        ps.add(prefix + n + ".beta", Tensor({c}));
    };
    auto lin = [&](const std::string& n, int din, int dout) {
        ps.add(prefix + n + ".w", uniform_init(rng, {din, dout}, din));
        ps.add(prefix + n + ".b", Tensor({dout}));
    };
    ln(".msa.ln");
    lin(".msa.wq", c, c);
    lin(".msa.wk", c, c);
    lin(".msa.wv", c, c);
    lin(".msa.wo", c, c);
    ln(".mca.lnq");
    ln(".mca.lnkv");
    lin(".mca.wq", c, c);
    lin(".mca.wk", c, c);
    lin(".mca.wv", c, c);
    lin(".mca.wo", c, c);
    ln(".mlp.ln");
    lin(".mlp.fc1", c, hidden);
    lin(".mlp.fc2", hidden, c);
    if (cfg.use_relpos) {
        int len = 2 * std::max(1, cfg.relpos_extent) - 1;
        ps.add(prefix + ".relpos.rh", Tensor({len, dh}));
        ps.add(prefix + ".relpos.rw", Tensor({len, dh}));
    }
}

}  // namespace

void register_params(ParamStore& ps, const DecoderConfig& cfg, int stages, Rng& rng) {
    cfg.validate();
    int stage_copies = cfg.share_block_across_stages ? 1 : stages;
    for (int s = 0; s < stage_copies; ++s)
        for (int b = 0; b < cfg.blocks_per_stage; ++b)
            register_block(ps, cfg, block_prefix(cfg, s, b), rng);
    // one temporal conv per pyramid step beyond the first
    int c = cfg.channels;
    for (int i = 1; i < stages; ++i) {
        ps.add("decoder.c3d.step" + std::to_string(i) + ".w",
               uniform_init(rng, {c, c, 3, 3, 3}, c * 27));
        ps.add("decoder.c3d.step" + std::to_string(i) + ".b", Tensor({c}));
    }
}

ag::NodePtr msa(const ag::NodePtr& state, ParamStore& ps, const std::string& prefix, int heads,
                AttnTrace* trace, const std::string& tag) {
    int c = state->value.dim(1);
    double scale = 1.0 / std::sqrt(static_cast<double>(c));
    auto y = ag::layernorm(state, ps.get(prefix + ".msa.ln.gamma"), ps.get(prefix + ".msa.ln.beta"));
    auto q = ag::linear(y, ps.get(prefix + ".msa.wq.w"), ps.get(prefix + ".msa.wq.b"));
    auto k = ag::linear(y, ps.get(prefix + ".msa.wk.w"), ps.get(prefix + ".msa.wk.b"));
    auto v = ag::linear(y, ps.get(prefix + ".msa.wv.w"), ps.get(prefix + ".msa.wv.b"));
    Tensor attn;
    auto o = ag::multihead_attention(q, k, v, heads, scale, {}, trace ? &attn : nullptr);
    if (trace) trace->records.emplace_back(tag, std::move(attn));
    return ag::linear(o, ps.get(prefix + ".msa.wo.w"), ps.get(prefix + ".msa.wo.b"));
}

ag::NodePtr mca(const ag::NodePtr& query_state, const ag::NodePtr& keys, const ag::NodePtr& values,
                const std::optional<RelposGrids>& relpos, ParamStore& ps,
                const std::string& prefix, int heads, AttnTrace* trace, const std::string& tag) {
    if (keys->value.dim(0) != values->value.dim(0))
        throw std::invalid_argument("mca: key/value length mismatch");
    int c = query_state->value.dim(1);
    if (keys->value.dim(1) != c || values->value.dim(1) != c)
        throw std::invalid_argument("mca: channel mismatch");
    double scale = 1.0 / std::sqrt(static_cast<double>(c));
    auto yq = ag::layernorm(query_state, ps.get(prefix + ".mca.lnq.gamma"),
                            ps.get(prefix + ".mca.lnq.beta"));
    auto yk = ag::layernorm(keys, ps.get(prefix + ".mca.lnkv.gamma"),
                            ps.get(prefix + ".mca.lnkv.beta"));
    auto yv = keys.get() == values.get()
                  ? yk
                  : ag::layernorm(values, ps.get(prefix + ".mca.lnkv.gamma"),
                                  ps.get(prefix + ".mca.lnkv.beta"));
    auto q = ag::linear(yq, ps.get(prefix + ".mca.wq.w"), ps.get(prefix + ".mca.wq.b"));
    auto k = ag::linear(yk, ps.get(prefix + ".mca.wk.w"), ps.get(prefix + ".mca.wk.b"));
    auto v = ag::linear(yv, ps.get(prefix + ".mca.wv.w"), ps.get(prefix + ".mca.wv.b"));

    std::vector<ag::NodePtr> r;
    if (relpos) {
        int dh = c / heads;
        const auto& g = *relpos;
        if (g.hq * g.wq != query_state->value.dim(0))
            throw std::invalid_argument("mca: query grid mismatch");
        if (g.tk * g.hk * g.wk != keys->value.dim(0))
            throw std::invalid_argument("mca: key grid mismatch");
        for (int h = 0; h < heads; ++h) {
            auto qh = ag::cols(q, h * dh, dh);
            r.push_back(ag::decomposed_relpos(qh, ps.get(prefix + ".relpos.rh"),
                                              ps.get(prefix + ".relpos.rw"), g.hq, g.wq, g.tk,
                                              g.hk, g.wk));
        }
    }
    Tensor attn;
    auto o = ag::multihead_attention(q, k, v, heads, scale, r, trace ? &attn : nullptr);
    if (trace) trace->records.emplace_back(tag, std::move(attn));
    return ag::linear(o, ps.get(prefix + ".mca.wo.w"), ps.get(prefix + ".mca.wo.b"));
}

ag::NodePtr mlp_term(const ag::NodePtr& state, ParamStore& ps, const std::string& prefix) {
    auto y = ag::layernorm(state, ps.get(prefix + ".mlp.ln.gamma"), ps.get(prefix + ".mlp.ln.beta"));
    auto h = ag::gelu(ag::linear(y, ps.get(prefix + ".mlp.fc1.w"), ps.get(prefix + ".mlp.fc1.b")));
    return ag::linear(h, ps.get(prefix + ".mlp.fc2.w"), ps.get(prefix + ".mlp.fc2.b"));
}

ag::NodePtr up_nearest(const DecoderState& d, int target_h, int target_w) {
    if (target_h != 2 * d.h || target_w != 2 * d.w)
        throw std::invalid_argument("up_nearest: target dims must be exactly 2x source dims");
    return ag::upsample2x_tokens(d.d, d.h, d.w);
}

std::vector<ag::NodePtr> temporal_pyramid(const ag::NodePtr& vid_feats,
                                          const TemporalPyramidConfig& tcfg, ParamStore& ps,
                                          const DecoderConfig& cfg) {
    tcfg.validate();
    if (vid_feats->value.ndim() != 4)
        throw std::invalid_argument("temporal_pyramid: expects (T,C,h,w)");
    if (vid_feats->value.dim(1) != cfg.channels)
        throw std::invalid_argument("temporal_pyramid: channel mismatch");
    int t = vid_feats->value.dim(0);
    if (tcfg.schedule.front() != t)
        throw std::invalid_argument("temporal_pyramid: schedule must start at T");
    std::vector<ag::NodePtr> steps{vid_feats};
    for (std::size_t i = 1; i < tcfg.schedule.size(); ++i) {
        int prev_len = steps.back()->value.dim(0);
        int want = tcfg.schedule[i];
        if (want == prev_len) {
            steps.push_back(steps.back());
        } else if (want == (prev_len + 1) / 2) {
            steps.push_back(ag::conv3d_temporal(
                steps.back(), ps.get("decoder.c3d.step" + std::to_string(i) + ".w"),
                ps.get("decoder.c3d.step" + std::to_string(i) + ".b"),
                tcfg.c3d_temporal_stride));
        } else {
            throw std::invalid_argument("temporal_pyramid: schedule step must repeat or halve");
        }
    }
    return steps;
}

namespace {

DecoderState decode_stage(const ag::NodePtr& e_img_l, int level, const ag::NodePtr& vid_tokens,
                          const RelposGrids& grids, const DecoderState* coarser, int stage,
                          ParamStore& ps, const DecoderConfig& cfg, AttnTrace* trace) {
    int h = e_img_l->value.dim(1), w = e_img_l->value.dim(2);
    auto x = ag::chw_to_tokens(e_img_l);
    for (int b = 0; b < cfg.blocks_per_stage; ++b) {
        auto prefix = block_prefix(cfg, stage, b);
        int heads = cfg.resolved_heads();
        auto msa_in = (b == 0 && coarser) ? ag::add(x, up_nearest(*coarser, h, w)) : x;
        auto tag = "stage" + std::to_string(stage) + ".block" + std::to_string(b) + ".";
        x = ag::add(x, msa(msa_in, ps, prefix, heads, trace, tag + "msa"));
        x = ag::add(x, mca(x, vid_tokens, vid_tokens,
                           cfg.use_relpos ? std::optional<RelposGrids>(grids) : std::nullopt, ps,
                           prefix, heads, trace, tag + "mca"));
        x = ag::add(x, mlp_term(x, ps, prefix));
    }
    return DecoderState{x, level, h, w};
}

}  // namespace

DecoderState decode_single(const ag::NodePtr& e_img_l, int level, const ag::NodePtr& e_vid,
                           ParamStore& ps, const DecoderConfig& cfg, AttnTrace* trace) {
    cfg.validate();
    if (e_vid->value.ndim() != 4) throw std::invalid_argument("decode_single: video (t,C,h,w)");
    if (e_img_l->value.dim(0) != cfg.channels || e_vid->value.dim(1) != cfg.channels)
        throw std::invalid_argument("decode_single: channel mismatch");
    RelposGrids grids{e_img_l->value.dim(1), e_img_l->value.dim(2), e_vid->value.dim(0),
                      e_vid->value.dim(2), e_vid->value.dim(3)};
    auto vid_tokens = ag::tchw_to_tokens(e_vid);
    return decode_stage(e_img_l, level, vid_tokens, grids, nullptr, 0, ps, cfg, trace);
}

DecoderState decode_multi(const encoder::FeaturePyramid& img_pyr,
                          const encoder::FeaturePyramid& vid_pyr,
                          const TemporalPyramidConfig& tcfg, ParamStore& ps,
                          const DecoderConfig& cfg, AttnTrace* trace) {
    cfg.validate();
    if (img_pyr.levels.empty()) throw std::invalid_argument("decode_multi: empty image pyramid");
    int l_min = img_pyr.levels.begin()->first;
    int l_max = img_pyr.levels.rbegin()->first;
    for (int l = l_min; l <= l_max; ++l)
        if (!img_pyr.levels.count(l))
            throw std::invalid_argument("decode_multi: missing image level " + std::to_string(l));
    if (!vid_pyr.levels.count(tcfg.video_level))
        throw std::invalid_argument("decode_multi: missing video level " +
                                    std::to_string(tcfg.video_level));
    int stages = l_max - l_min + 1;
    auto vid_feats = vid_pyr.levels.at(tcfg.video_level);
    TemporalPyramidConfig tp = tcfg;
    if (tp.schedule.empty()) tp.schedule = make_schedule(vid_feats->value.dim(0), stages, true);
    if (static_cast<int>(tp.schedule.size()) != stages)
        throw std::invalid_argument("decode_multi: schedule length must equal stage count");
    auto temporal = temporal_pyramid(vid_feats, tp, ps, cfg);

    DecoderState state;
    const DecoderState* coarser = nullptr;
    // coarsest image level pairs with the longest temporal step
    for (int i = 0; i < stages; ++i) {
        int level = l_max - i;
        auto e_img = img_pyr.levels.at(level);
        auto vid_step = temporal[static_cast<std::size_t>(i)];
        RelposGrids grids{e_img->value.dim(1), e_img->value.dim(2), vid_step->value.dim(0),
                          vid_step->value.dim(2), vid_step->value.dim(3)};
        auto vid_tokens = ag::tchw_to_tokens(vid_step);
        state = decode_stage(e_img, level, vid_tokens, grids, coarser, i, ps, cfg, trace);
        coarser = &state;
    }
    return state;
}

}  // namespace affground::decoder
