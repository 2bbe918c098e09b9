#include "affground/maskahand.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "affground/io.hpp"

using nlohmann::json;

namespace affground::maskahand {

void SynthParams::validate() const {
    if (hand_mask_count < 0 || hand_mask_count > 1)
        throw std::invalid_argument("hand_mask_count must be 0 or 1");
    if (random_mask_count < 0) throw std::invalid_argument("random_mask_count must be >= 0");
    if (mask_scale < 1.0) throw std::invalid_argument("mask_scale must be >= 1");
    if (distortion < 0.0 || distortion >= 1.0)
        throw std::invalid_argument("distortion must lie in [0,1)");
}

std::pair<double, double> Homography::apply(double x, double y) const {
    double d = m[6] * x + m[7] * y + m[8];
    return {(m[0] * x + m[1] * y + m[2]) / d, (m[3] * x + m[4] * y + m[5]) / d};
}

double Homography::det() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
}

Homography Homography::inverse() const {
    double d = det();
    if (std::abs(d) < 1e-12) throw std::runtime_error("homography not invertible");
    Homography inv;
    inv.m[0] = (m[4] * m[8] - m[5] * m[7]) / d;
    inv.m[1] = (m[2] * m[7] - m[1] * m[8]) / d;
    inv.m[2] = (m[1] * m[5] - m[2] * m[4]) / d;
    inv.m[3] = (m[5] * m[6] - m[3] * m[8]) / d;
    inv.m[4] = (m[0] * m[8] - m[2] * m[6]) / d;
    inv.m[5] = (m[2] * m[3] - m[0] * m[5]) / d;
    inv.m[6] = (m[3] * m[7] - m[4] * m[6]) / d;
    inv.m[7] = (m[1] * m[6] - m[0] * m[7]) / d;
    inv.m[8] = (m[0] * m[4] - m[1] * m[3]) / d;
    return inv;
}

std::vector<ClipSpan> mine_clips(const std::vector<HandDetection>& detections, int video_length,
                                 int clip_len, int stride, double threshold) {
    if (clip_len < 1 || stride < 1) throw std::invalid_argument("clip_len/stride must be >= 1");
    std::vector<ClipSpan> spans;
    if (video_length < clip_len) {
        std::fprintf(stderr, "warning: video shorter than clip length (%d < %d); no clips mined\n",
                     video_length, clip_len);
        return spans;
    }
    for (int start = 0; start + clip_len <= video_length; start += stride) {
        ClipSpan span{start, clip_len, {}};
        for (const auto& d : detections) {
            if (d.frame_index < start || d.frame_index >= start + clip_len) continue;
            if (!d.interacting || d.score < threshold) continue;
            if (span.interaction_frames.empty() || span.interaction_frames.back() != d.frame_index)
                span.interaction_frames.push_back(d.frame_index);
        }
        std::sort(span.interaction_frames.begin(), span.interaction_frames.end());
        span.interaction_frames.erase(
            std::unique(span.interaction_frames.begin(), span.interaction_frames.end()),
            span.interaction_frames.end());
        if (!span.interaction_frames.empty()) spans.push_back(std::move(span));
    }
    return spans;
}

Homography homography_from_corners(const std::array<std::pair<double, double>, 4>& src,
                                   const std::array<std::pair<double, double>, 4>& dst) {
    // DLT: 8x8 system, h22 fixed at 1
    double a[8][9] = {};
    for (int i = 0; i < 4; ++i) {
        double x = src[static_cast<std::size_t>(i)].first;
        double y = src[static_cast<std::size_t>(i)].second;
        double u = dst[static_cast<std::size_t>(i)].first;
        double v = dst[static_cast<std::size_t>(i)].second;
        double* r0 = a[2 * i];
        double* r1 = a[2 * i + 1];
        r0[0] = x; r0[1] = y; r0[2] = 1; r0[6] = -u * x; r0[7] = -u * y; r0[8] = u;
        r1[3] = x; r1[4] = y; r1[5] = 1; r1[6] = -v * x; r1[7] = -v * y; r1[8] = v;
    }
    // Gaussian elimination with partial pivoting
    for (int col = 0; col < 8; ++col) {
        int pivot = col;
        for (int r = col + 1; r < 8; ++r)
            if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
        if (std::abs(a[pivot][col]) < 1e-12)
            throw std::runtime_error("degenerate corner correspondences");
        if (pivot != col)
            for (int c = 0; c < 9; ++c) std::swap(a[pivot][c], a[col][c]);
        for (int r = 0; r < 8; ++r) {
            if (r == col) continue;
            double f = a[r][col] / a[col][col];
            if (f == 0.0) continue;
            for (int c = col; c < 9; ++c) a[r][c] -= f * a[col][c];
        }
    }
    Homography h;
    for (int i = 0; i < 8; ++i) h.m[static_cast<std::size_t>(i)] = a[i][8] / a[i][i];
    h.m[8] = 1.0;
    return h;
}

Homography random_homography(int w, int h, double distortion, Rng& rng) {
    if (distortion < 0.0 || distortion >= 1.0)
        throw std::invalid_argument("distortion must lie in [0,1)");
    std::array<std::pair<double, double>, 4> src{{{0.0, 0.0},
                                                  {static_cast<double>(w - 1), 0.0},
                                                  {static_cast<double>(w - 1),
                                                   static_cast<double>(h - 1)},
                                                  {0.0, static_cast<double>(h - 1)}}};
    double mx = distortion * w / 2.0;
    double my = distortion * h / 2.0;
    for (int attempt = 0; attempt < 8; ++attempt) {
        std::array<std::pair<double, double>, 4> dst;
        // inward displacement, corner order TL,TR,BR,BL; draws are (dx,dy)
        static constexpr int sx[4] = {1, -1, -1, 1};
        static constexpr int sy[4] = {1, 1, -1, -1};
        for (int i = 0; i < 4; ++i) {
            double dx = rng.real(0.0, mx);
            double dy = rng.real(0.0, my);
            dst[static_cast<std::size_t>(i)] = {
                src[static_cast<std::size_t>(i)].first + sx[i] * dx,
                src[static_cast<std::size_t>(i)].second + sy[i] * dy};
        }
        try {
            Homography hh = homography_from_corners(src, dst);
            if (std::abs(hh.det()) > 1e-9) return hh;
        } catch (const std::runtime_error&) {
        }
    }
    throw std::runtime_error("could not sample a non-degenerate homography");
}

Tensor warp_image_bilinear(const Tensor& img, const Homography& h) {
    if (img.ndim() != 3) throw std::invalid_argument("warp: expects (C,h,w)");
    int c = img.dim(0), hh = img.dim(1), ww = img.dim(2);
    Homography inv = h.inverse();
    Tensor out({c, hh, ww});
    for (int y = 0; y < hh; ++y)
        for (int x = 0; x < ww; ++x) {
            auto [sx, sy] = inv.apply(x, y);
            int x0 = static_cast<int>(std::floor(sx));
            int y0 = static_cast<int>(std::floor(sy));
            double fx = sx - x0, fy = sy - y0;
            for (int ch = 0; ch < c; ++ch) {
                const double* plane = img.ptr() + static_cast<std::size_t>(ch) * hh * ww;
                auto sample = [&](int yy, int xx) {
                    if (xx < 0 || xx >= ww || yy < 0 || yy >= hh) return 0.0;
                    return plane[static_cast<std::size_t>(yy) * ww + xx];
                };
                double v = (1 - fy) * ((1 - fx) * sample(y0, x0) + fx * sample(y0, x0 + 1)) +
                           fy * ((1 - fx) * sample(y0 + 1, x0) + fx * sample(y0 + 1, x0 + 1));
                out.data[(static_cast<std::size_t>(ch) * hh + y) * ww + x] = v;
            }
        }
    return out;
}

Tensor warp_mask_nearest(const Tensor& mask, const Homography& h) {
    if (mask.ndim() != 2) throw std::invalid_argument("warp_mask: expects (h,w)");
    int hh = mask.dim(0), ww = mask.dim(1);
    Homography inv = h.inverse();
    Tensor out({hh, ww});
    for (int y = 0; y < hh; ++y)
        for (int x = 0; x < ww; ++x) {
            auto [sx, sy] = inv.apply(x, y);
            int xx = heatmaps::round_half_down(sx);
            int yy = heatmaps::round_half_down(sy);
            out.data[static_cast<std::size_t>(y) * ww + x] =
                (xx < 0 || xx >= ww || yy < 0 || yy >= hh)
                    ? 0.0
                    : mask.data[static_cast<std::size_t>(yy) * ww + xx];
        }
    return out;
}

Tensor box_mask(const heatmaps::Box& box, int h, int w) {
    Tensor mask({h, w});
    int x0 = std::max(0, heatmaps::round_half_down(box.x0));
    int y0 = std::max(0, heatmaps::round_half_down(box.y0));
    int x1 = std::min(w, heatmaps::round_half_down(box.x1));
    int y1 = std::min(h, heatmaps::round_half_down(box.y1));
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) mask.data[static_cast<std::size_t>(y) * w + x] = 1.0;
    return mask;
}

namespace {

struct IntRect {
    int x0, y0, x1, y1;
    int width() const { return x1 - x0; }
    int height() const { return y1 - y0; }
};

IntRect enlarged_clipped_rect(const heatmaps::Box& box, double scale, int h, int w) {
    double cx = (box.x0 + box.x1) / 2.0, cy = (box.y0 + box.y1) / 2.0;
    double hw = (box.x1 - box.x0) / 2.0 * scale, hh = (box.y1 - box.y0) / 2.0 * scale;
    IntRect r;
    r.x0 = std::max(0, heatmaps::round_half_down(cx - hw));
    r.y0 = std::max(0, heatmaps::round_half_down(cy - hh));
    r.x1 = std::min(w, heatmaps::round_half_down(cx + hw));
    r.y1 = std::min(h, heatmaps::round_half_down(cy + hh));
    return r;
}

void fill_rect(Tensor& frame, const IntRect& r, MaskFill fill, Rng& rng) {
    int h = frame.dim(1), w = frame.dim(2);
    for (int y = r.y0; y < r.y1; ++y)
        for (int x = r.x0; x < r.x1; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = fill == MaskFill::random_noise
                               ? static_cast<double>(rng.integer(0, 255))
                               : 0.0;
                frame.data[(static_cast<std::size_t>(c) * h + y) * w + x] = v;
            }
}

}  // namespace

SynthSample synthesize_target(const Tensor& frames, const ClipSpan& span,
                              const std::vector<std::optional<heatmaps::Box>>& hand_boxes,
                              const SynthParams& params) {
    params.validate();
    if (frames.ndim() != 4 || frames.dim(1) != 3)
        throw std::invalid_argument("frames must be (t,3,h,w)");
    if (span.interaction_frames.empty())
        throw std::invalid_argument("clip has no interaction frame");
    int h = frames.dim(2), w = frames.dim(3);
    Rng rng(params.seed);

    int pick = static_cast<int>(
        rng.integer(0, static_cast<std::int64_t>(span.interaction_frames.size()) - 1));
    int frame_idx = span.interaction_frames[static_cast<std::size_t>(pick)];
    if (frame_idx < 0 || frame_idx >= frames.dim(0))
        throw std::out_of_range("interaction frame outside video");
    if (static_cast<int>(hand_boxes.size()) <= frame_idx ||
        !hand_boxes[static_cast<std::size_t>(frame_idx)])
        throw std::invalid_argument("no hand box for interaction frame " +
                                    std::to_string(frame_idx));
    heatmaps::Box hand = *hand_boxes[static_cast<std::size_t>(frame_idx)];

    Tensor masked({3, h, w});
    std::memcpy(masked.ptr(),
                frames.ptr() + static_cast<std::size_t>(frame_idx) * masked.numel(),
                sizeof(double) * static_cast<std::size_t>(masked.numel()));

    SynthSample sample;
    sample.clip = span;
    sample.provenance.source_frame = frame_idx;
    sample.provenance.hand_box = hand;
    sample.provenance.seed = params.seed;

    IntRect hand_rect = enlarged_clipped_rect(hand, params.mask_scale, h, w);
    if (hand_rect.width() <= 0 || hand_rect.height() <= 0)
        throw std::invalid_argument("hand mask empty after clipping");
    if (hand_rect.x0 == 0 && hand_rect.y0 == 0 && hand_rect.x1 == w && hand_rect.y1 == h)
        throw std::invalid_argument("mask degenerate");
    if (params.hand_mask_count > 0) {
        fill_rect(masked, hand_rect, params.fill, rng);
        sample.provenance.mask_rects.push_back({static_cast<double>(hand_rect.x0),
                                                static_cast<double>(hand_rect.y0),
                                                static_cast<double>(hand_rect.x1),
                                                static_cast<double>(hand_rect.y1)});
    }
    for (int i = 0; i < params.random_mask_count; ++i) {
        IntRect r;
        r.x0 = static_cast<int>(rng.integer(0, w - hand_rect.width()));
        r.y0 = static_cast<int>(rng.integer(0, h - hand_rect.height()));
        r.x1 = r.x0 + hand_rect.width();
        r.y1 = r.y0 + hand_rect.height();
        fill_rect(masked, r, params.fill, rng);
        sample.provenance.mask_rects.push_back({static_cast<double>(r.x0),
                                                static_cast<double>(r.y0),
                                                static_cast<double>(r.x1),
                                                static_cast<double>(r.y1)});
    }

    sample.transform = random_homography(w, h, params.distortion, rng);
    sample.target_image = warp_image_bilinear(masked, sample.transform);

    Tensor mask = box_mask(hand, h, w);
    Tensor warped = warp_mask_nearest(mask, sample.transform);
    auto spec = heatmaps::default_target_spec(h, w);
    sample.gt_heatmap = heatmaps::sum_normalize(
        heatmaps::Heatmap(heatmaps::gaussian_blur(warped, spec), heatmaps::HeatmapKind::raw));
    return sample;
}

std::vector<SynthSample> make_pretrain_dataset(const Tensor& frames,
                                               const std::vector<HandDetection>& detections,
                                               const SynthParams& params, int count, int clip_len,
                                               int stride, double threshold) {
    params.validate();
    if (count < 1) throw std::invalid_argument("count must be >= 1");
    auto clips = mine_clips(detections, frames.dim(0), clip_len, stride, threshold);
    if (clips.empty()) throw std::runtime_error("no minable clips");
    auto boxes = best_boxes_per_frame(detections, frames.dim(0), threshold);
    std::vector<SynthSample> samples;
    samples.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        SynthParams p = params;
        p.seed = params.seed ^ static_cast<std::uint64_t>(i);
        const auto& clip = clips[static_cast<std::size_t>(i) % clips.size()];
        samples.push_back(synthesize_target(frames, clip, boxes, p));
    }
    return samples;
}

std::vector<HandDetection> load_detections(const std::string& path) {
    std::istringstream ss(io::read_text_file(path));
    std::vector<HandDetection> dets;
    std::string line;
    while (std::getline(ss, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        HandDetection d;
        d.frame_index = j.at("frame").get<int>();
        auto b = j.at("box");
        d.box = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                 b.at(3).get<double>()};
        d.score = j.at("score").get<double>();
        d.interacting = j.at("interacting").get<bool>();
        if (d.box.x0 >= d.box.x1 || d.box.y0 >= d.box.y1)
            throw std::runtime_error("detection box has non-positive extent");
        if (d.score < 0.0 || d.score > 1.0)
            throw std::runtime_error("detection score outside [0,1]");
        dets.push_back(d);
    }
    return dets;
}

void save_detections(const std::string& path, const std::vector<HandDetection>& detections) {
    std::string out;
    for (const auto& d : detections) {
        json j{{"frame", d.frame_index},
               {"box", {d.box.x0, d.box.y0, d.box.x1, d.box.y1}},
               {"score", d.score},
               {"interacting", d.interacting}};
        out += j.dump();
        out += '\n';
    }
    io::write_text_file(path, out);
}

std::vector<std::optional<heatmaps::Box>> best_boxes_per_frame(
    const std::vector<HandDetection>& detections, int video_length, double threshold) {
    std::vector<std::optional<heatmaps::Box>> boxes(static_cast<std::size_t>(video_length));
    std::vector<double> best(static_cast<std::size_t>(video_length), -1.0);
    for (const auto& d : detections) {
        if (!d.interacting || d.score < threshold) continue;
        if (d.frame_index < 0 || d.frame_index >= video_length) continue;
        auto i = static_cast<std::size_t>(d.frame_index);
        if (d.score > best[i]) {
            best[i] = d.score;
            boxes[i] = d.box;
        }
    }
    return boxes;
}

}  // namespace affground::maskahand
