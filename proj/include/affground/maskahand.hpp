#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "affground/heatmaps.hpp"
#include "affground/rng.hpp"
#include "affground/tensor.hpp"

namespace affground::maskahand {

struct HandDetection {
    int frame_index = 0;
    heatmaps::Box box{};
    double score = 0.0;
    bool interacting = false;
};

struct ClipSpan {
    int start_frame = 0;
    int length = 0;
    std::vector<int> interaction_frames;  // absolute frame indices inside the span
};

enum class MaskFill { random_noise, zero };

struct SynthParams {
    int hand_mask_count = 1;    // 0 or 1
    int random_mask_count = 1;  // >= 0
    double mask_scale = 1.5;    // >= 1
    double distortion = 0.5;    // in [0,1)
    MaskFill fill = MaskFill::random_noise;
    std::uint64_t seed = 0;
    bool exclude_interaction_frame = false;

    void validate() const;
};

// Row-major 3x3 projective transform, source -> target coordinates.
struct Homography {
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    std::pair<double, double> apply(double x, double y) const;
    Homography inverse() const;
    double det() const;
};

struct SynthSample {
    ClipSpan clip;
    Tensor target_image;           // (3,h,w)
    heatmaps::Heatmap gt_heatmap;  // sum-normalized
    Homography transform;
    struct Provenance {
        int source_frame = 0;
        heatmaps::Box hand_box{};
        std::vector<heatmaps::Box> mask_rects;
        std::uint64_t seed = 0;
    } provenance;
};

// Sliding windows at starts 0, stride, 2*stride, ... kept iff they contain a
// detection with interacting=true and score >= threshold. A video shorter
// than clip_len yields an empty result.
std::vector<ClipSpan> mine_clips(const std::vector<HandDetection>& detections, int video_length,
                                 int clip_len = 32, int stride = 16, double threshold = 0.99);

// Perspective transform displacing each corner inward by uniform offsets in
// [0, distortion*w/2] x [0, distortion*h/2]; solved exactly from the corner
// correspondences. Degenerate draws are resampled up to 8 times.
Homography random_homography(int w, int h, double distortion, Rng& rng);

// Solves H from 4 point correspondences (row-major, h22 = 1).
Homography homography_from_corners(const std::array<std::pair<double, double>, 4>& src,
                                   const std::array<std::pair<double, double>, 4>& dst);

// inverse warp: out(p) = src(H^-1 p); out-of-frame samples are zero
Tensor warp_image_bilinear(const Tensor& img, const Homography& h);
Tensor warp_mask_nearest(const Tensor& mask, const Homography& h);

// rasterized, frame-clipped binary mask of a box (same convention as
// box_to_mask_heatmap)
Tensor box_mask(const heatmaps::Box& box, int h, int w);

// One training triple: masked + warped interaction frame as target image,
// warped blurred hand-box mask as gt. frames is the full source video
// (t,3,h,w); hand_boxes holds the qualifying box per frame where one exists.
SynthSample synthesize_target(const Tensor& frames, const ClipSpan& span,
                              const std::vector<std::optional<heatmaps::Box>>& hand_boxes,
                              const SynthParams& params);

// Mines clips and synthesizes `count` samples, cycling clips in order with
// per-sample seeds (base_seed XOR sample index).
std::vector<SynthSample> make_pretrain_dataset(const Tensor& frames,
                                               const std::vector<HandDetection>& detections,
                                               const SynthParams& params, int count,
                                               int clip_len = 32, int stride = 16,
                                               double threshold = 0.99);

// detection sidecar: one JSON record per line
std::vector<HandDetection> load_detections(const std::string& path);
void save_detections(const std::string& path, const std::vector<HandDetection>& detections);

// highest-scoring qualifying box per frame
std::vector<std::optional<heatmaps::Box>> best_boxes_per_frame(
    const std::vector<HandDetection>& detections, int video_length, double threshold = 0.99);

}  // namespace affground::maskahand
