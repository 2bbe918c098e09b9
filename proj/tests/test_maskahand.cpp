#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "affground/maskahand.hpp"
#include "oracles.hpp"

using namespace affground;
using namespace affground::maskahand;

namespace {

// brute-force window enumeration, written independently of mine_clips
std::vector<std::pair<int, std::vector<int>>> enumerate_windows(
    const std::vector<HandDetection>& dets, int video_length, int clip_len, int stride,
    double threshold) {
    std::vector<std::pair<int, std::vector<int>>> out;
    for (int start = 0; start + clip_len <= video_length; start += stride) {
        std::vector<int> frames;
        for (int f = start; f < start + clip_len; ++f)
            for (const auto& d : dets)
                if (d.frame_index == f && d.interacting && d.score >= threshold) {
                    if (frames.empty() || frames.back() != f) frames.push_back(f);
                }
        if (!frames.empty()) out.emplace_back(start, frames);
    }
    return out;
}

Tensor random_frames(Rng& rng, int t, int s) {
    Tensor frames({t, 3, s, s});
    for (auto& v : frames.data) v = static_cast<double>(rng.integer(0, 255));
    return frames;
}

}  // namespace

TEST_CASE("mine_clips: spec example with one qualifying detection at frame 40") {
    std::vector<HandDetection> dets{{40, {5, 5, 10, 10}, 0.995, true}};
    auto clips = mine_clips(dets, 64);
    REQUIRE(clips.size() == 2);
    CHECK(clips[0].start_frame == 16);
    CHECK(clips[1].start_frame == 32);
    CHECK(clips[0].interaction_frames == std::vector<int>{40});
}

TEST_CASE("mine_clips: no detections, sub-threshold score, short video") {
    CHECK(mine_clips({}, 64).empty());
    std::vector<HandDetection> weak{{10, {0, 0, 4, 4}, 0.98, true}};
    CHECK(mine_clips(weak, 64).empty());
    std::vector<HandDetection> non_interacting{{10, {0, 0, 4, 4}, 0.999, false}};
    CHECK(mine_clips(non_interacting, 64).empty());
    std::vector<HandDetection> any{{10, {0, 0, 4, 4}, 0.999, true}};
    CHECK(mine_clips(any, 20).empty());  // shorter than clip_len: empty, not an error
}

TEST_CASE("mine_clips equals brute-force window enumeration on random tracks") {
    Rng rng(1);
    for (int rep = 0; rep < 200; ++rep) {
        int video_length = static_cast<int>(rng.integer(32, 512));
        int n = static_cast<int>(rng.integer(0, 40));
        std::vector<HandDetection> dets;
        for (int i = 0; i < n; ++i) {
            HandDetection d;
            d.frame_index = static_cast<int>(rng.integer(0, video_length - 1));
            d.box = {0, 0, 8, 8};
            d.score = rng.real(0.9, 1.0);
            d.interacting = rng.integer(0, 1) == 1;
            dets.push_back(d);
        }
        auto got = mine_clips(dets, video_length);
        auto expect = enumerate_windows(dets, video_length, 32, 16, 0.99);
        REQUIRE(got.size() == expect.size());
        for (std::size_t i = 0; i < got.size(); ++i) {
            CHECK(got[i].start_frame == expect[i].first);
            CHECK(got[i].length == 32);
            CHECK(got[i].interaction_frames == expect[i].second);
        }
    }
}

TEST_CASE("random_homography: distortion 0 gives identity within 1e-9") {
    Rng rng(2);
    auto h = random_homography(64, 64, 0.0, rng);
    double scale = h.m[8];
    const double id[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    for (int i = 0; i < 9; ++i) CHECK(std::abs(h.m[static_cast<std::size_t>(i)] / scale - id[i]) < 1e-9);
}

TEST_CASE("homography reproduces its corner correspondences within 1e-9") {
    Rng rng(3);
    for (int rep = 0; rep < 100; ++rep) {
        int w = 32 + static_cast<int>(rng.integer(0, 64));
        int h = 32 + static_cast<int>(rng.integer(0, 64));
        std::array<std::pair<double, double>, 4> src{{{0.0, 0.0},
                                                      {w - 1.0, 0.0},
                                                      {w - 1.0, h - 1.0},
                                                      {0.0, h - 1.0}}};
        std::array<std::pair<double, double>, 4> dst;
        for (int i = 0; i < 4; ++i)
            dst[static_cast<std::size_t>(i)] = {
                src[static_cast<std::size_t>(i)].first + rng.real(-6.0, 6.0),
                src[static_cast<std::size_t>(i)].second + rng.real(-6.0, 6.0)};
        Homography hm = homography_from_corners(src, dst);
        for (int i = 0; i < 4; ++i) {
            auto [u, v] = hm.apply(src[static_cast<std::size_t>(i)].first,
                                   src[static_cast<std::size_t>(i)].second);
            CHECK(std::abs(u - dst[static_cast<std::size_t>(i)].first) < 1e-9);
            CHECK(std::abs(v - dst[static_cast<std::size_t>(i)].second) < 1e-9);
        }
    }
}

TEST_CASE("random homography corners stay inside and the draw is rng-deterministic") {
    Rng a(4), b(4);
    auto ha = random_homography(48, 48, 0.5, a);
    auto hb = random_homography(48, 48, 0.5, b);
    for (int i = 0; i < 9; ++i) CHECK(ha.m[static_cast<std::size_t>(i)] == hb.m[static_cast<std::size_t>(i)]);
}

TEST_CASE("synthesize_target: identity warp + zero fill blacks out the enlarged hand box") {
    Rng rng(5);
    Tensor frames = random_frames(rng, 8, 32);
    ClipSpan span{0, 8, {4}};
    std::vector<std::optional<heatmaps::Box>> boxes(8);
    boxes[4] = heatmaps::Box{12, 12, 20, 20};
    SynthParams params;
    params.distortion = 0.0;
    params.fill = MaskFill::zero;
    params.mask_scale = 1.0;
    params.random_mask_count = 0;
    params.seed = 11;
    auto sample = synthesize_target(frames, span, boxes, params);

    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
            for (int c = 0; c < 3; ++c) {
                double expect = (x >= 12 && x < 20 && y >= 12 && y < 20)
                                    ? 0.0
                                    : frames.at({4, c, y, x});
                CHECK(sample.target_image.at({c, y, x}) ==
                      doctest::Approx(expect).epsilon(1e-9));
            }
    // gt equals the blurred in-place box mask
    auto direct = heatmaps::box_to_mask_heatmap({12, 12, 20, 20}, 32, 32,
                                                heatmaps::default_target_spec(32, 32));
    for (std::size_t i = 0; i < direct.values.data.size(); ++i)
        CHECK(sample.gt_heatmap.values.data[i] ==
              doctest::Approx(direct.values.data[i]).epsilon(1e-9));
}

TEST_CASE("information hiding: pixels inside the enlarged mask never reach the output") {
    Rng rng(6);
    Tensor frames = random_frames(rng, 6, 32);
    Tensor frames2 = frames;
    // differ only strictly inside the enlarged (1.5x) hand box on the chosen frame
    ClipSpan span{0, 6, {2}};
    std::vector<std::optional<heatmaps::Box>> boxes(6);
    boxes[2] = heatmaps::Box{12, 12, 20, 20};  // 1.5x about center -> (10,10,22,22)
    for (int y = 11; y < 21; ++y)
        for (int x = 11; x < 21; ++x)
            for (int c = 0; c < 3; ++c)
                frames2.at({2, c, y, x}) = 255.0 - frames2.at({2, c, y, x});
    SynthParams params;
    params.seed = 31337;
    auto a = synthesize_target(frames, span, boxes, params);
    auto b = synthesize_target(frames2, span, boxes, params);
    for (std::size_t i = 0; i < a.target_image.data.size(); ++i)
        CHECK(a.target_image.data[i] == b.target_image.data[i]);
    for (std::size_t i = 0; i < a.gt_heatmap.values.data.size(); ++i)
        CHECK(a.gt_heatmap.values.data[i] == b.gt_heatmap.values.data[i]);
    CHECK(a.transform.m == b.transform.m);
}

TEST_CASE("warp consistency: hand-box corners map near the warped mask support") {
    Rng rng(7);
    for (int rep = 0; rep < 50; ++rep) {
        int s = 48;
        double x0 = rng.real(4.0, 28.0), y0 = rng.real(4.0, 28.0);
        heatmaps::Box box{x0, y0, x0 + rng.real(6.0, 14.0), y0 + rng.real(6.0, 14.0)};
        Rng hr(static_cast<std::uint64_t>(rep) + 100);
        auto hom = random_homography(s, s, 0.4, hr);
        Tensor mask = box_mask(box, s, s);
        Tensor warped = warp_mask_nearest(mask, hom);

        std::vector<std::pair<int, int>> support;
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x)
                if (warped.at({y, x}) > 0.5) support.emplace_back(x, y);
        REQUIRE(!support.empty());
        // corners of the rasterized mask (extremal covered pixel centers),
        // mapped through the transform, land within 1 px of the support
        int x0r = heatmaps::round_half_down(box.x0), y0r = heatmaps::round_half_down(box.y0);
        int x1r = heatmaps::round_half_down(box.x1) - 1, y1r = heatmaps::round_half_down(box.y1) - 1;
        const std::pair<double, double> corners[4] = {
            {static_cast<double>(x0r), static_cast<double>(y0r)},
            {static_cast<double>(x1r), static_cast<double>(y0r)},
            {static_cast<double>(x1r), static_cast<double>(y1r)},
            {static_cast<double>(x0r), static_cast<double>(y1r)}};
        for (const auto& [cx, cy] : corners) {
            auto [wx, wy] = hom.apply(cx, cy);
            double best = 1e9;
            for (const auto& [px, py] : support)
                best = std::min(best, std::hypot(wx - px, wy - py));
            CHECK(best <= 1.0);
        }
    }
}

TEST_CASE("gt heatmap sums to 1 with argmax inside the warped hand region") {
    Rng rng(8);
    Tensor frames = random_frames(rng, 8, 48);
    ClipSpan span{0, 8, {3, 5}};
    std::vector<std::optional<heatmaps::Box>> boxes(8);
    boxes[3] = heatmaps::Box{20, 16, 32, 28};
    boxes[5] = heatmaps::Box{8, 8, 18, 20};
    for (int rep = 0; rep < 20; ++rep) {
        SynthParams params;
        params.seed = static_cast<std::uint64_t>(rep);
        auto sample = synthesize_target(frames, span, boxes, params);
        CHECK(sample.gt_heatmap.sum() == doctest::Approx(1.0).epsilon(1e-6));
        std::size_t argmax = 0;
        for (std::size_t i = 0; i < sample.gt_heatmap.values.data.size(); ++i)
            if (sample.gt_heatmap.values.data[i] > sample.gt_heatmap.values.data[argmax])
                argmax = i;
        int ay = static_cast<int>(argmax) / 48, ax = static_cast<int>(argmax) % 48;
        // inside the warped (un-blurred) mask support dilated by the blur radius
        Tensor warped = warp_mask_nearest(box_mask(sample.provenance.hand_box, 48, 48),
                                          sample.transform);
        bool near_support = false;
        int radius = heatmaps::default_target_spec(48, 48).kernel_size / 2;
        for (int y = std::max(0, ay - radius); y <= std::min(47, ay + radius) && !near_support; ++y)
            for (int x = std::max(0, ax - radius); x <= std::min(47, ax + radius); ++x)
                if (warped.at({y, x}) > 0.5) {
                    near_support = true;
                    break;
                }
        CHECK(near_support);
    }
}

TEST_CASE("synthesize_target errors: no interaction frame, degenerate mask") {
    Rng rng(9);
    Tensor frames = random_frames(rng, 4, 16);
    std::vector<std::optional<heatmaps::Box>> boxes(4);
    boxes[1] = heatmaps::Box{0, 0, 16, 16};
    ClipSpan none{0, 4, {}};
    SynthParams params;
    CHECK_THROWS_AS(synthesize_target(frames, none, boxes, params), std::invalid_argument);

    ClipSpan span{0, 4, {1}};
    CHECK_THROWS_WITH_AS(synthesize_target(frames, span, boxes, params), "mask degenerate",
                         std::invalid_argument);
}

TEST_CASE("make_pretrain_dataset: determinism, per-sample seeds, clip cycling") {
    Rng rng(10);
    Tensor frames = random_frames(rng, 80, 32);
    std::vector<HandDetection> dets;
    for (int f = 20; f < 70; f += 10)
        dets.push_back({f, {8, 8, 20, 20}, 0.995, true});

    SynthParams params;
    params.seed = 99;
    auto a = make_pretrain_dataset(frames, dets, params, 6);
    auto b = make_pretrain_dataset(frames, dets, params, 6);
    REQUIRE(a.size() == 6);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].provenance.seed == (99ULL ^ i));
        for (std::size_t j = 0; j < a[i].target_image.data.size(); ++j)
            CHECK(a[i].target_image.data[j] == b[i].target_image.data[j]);
    }
    auto clips = mine_clips(dets, 80);
    CHECK(a[0].clip.start_frame == clips[0].start_frame);
    CHECK(a[1].clip.start_frame == clips[1 % clips.size()].start_frame);

    CHECK_THROWS_AS(make_pretrain_dataset(frames, {}, params, 4), std::runtime_error);
}

TEST_CASE("detection sidecar round-trip") {
    std::vector<HandDetection> dets{{3, {1.5, 2.5, 10.0, 12.0}, 0.997, true},
                                    {7, {0.0, 0.0, 4.0, 4.0}, 0.42, false}};
    auto path = (std::filesystem::temp_directory_path() / "dets.jsonl").string();
    save_detections(path, dets);
    auto back = load_detections(path);
    REQUIRE(back.size() == 2);
    CHECK(back[0].frame_index == 3);
    CHECK(back[0].box.x0 == 1.5);
    CHECK(back[0].interacting);
    CHECK(back[1].score == 0.42);
    CHECK(!back[1].interacting);
}

TEST_CASE("best_boxes_per_frame keeps the highest-scoring qualifying box") {
    std::vector<HandDetection> dets{{2, {0, 0, 4, 4}, 0.992, true},
                                    {2, {8, 8, 12, 12}, 0.998, true},
                                    {2, {4, 4, 6, 6}, 0.999, false},
                                    {3, {1, 1, 2, 2}, 0.5, true}};
    auto boxes = best_boxes_per_frame(dets, 5);
    REQUIRE(boxes[2].has_value());
    CHECK(boxes[2]->x0 == 8);
    CHECK(!boxes[3].has_value());  // below threshold
    CHECK(!boxes[0].has_value());
}
