#include <filesystem>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "affground/harness.hpp"
#include "affground/maskahand.hpp"

namespace fs = std::filesystem;
using namespace affground;
using nlohmann::json;

namespace {

std::pair<int, int> parse_res(const std::string& s) {
    auto x = s.find('x');
    if (x == std::string::npos) throw CLI::ValidationError("--res", "expected HxW, e.g. 28x28");
    return {std::stoi(s.substr(0, x)), std::stoi(s.substr(x + 1))};
}

// Samples mined from one source video become a training manifest: per-sample
// clip frame directory, target image, gt heatmap, transform and provenance.
void emit_synth_dataset(const std::string& frames_path, const std::string& detections_path,
                        const std::string& out_dir, const maskahand::SynthParams& params,
                        int count, int clip_len, int stride, double threshold) {
    Tensor frames = io::load_clip(frames_path);
    auto detections = maskahand::load_detections(detections_path);
    auto samples = maskahand::make_pretrain_dataset(frames, detections, params, count, clip_len,
                                                    stride, threshold);
    fs::create_directories(out_dir);
    std::string manifest;
    std::int64_t per = frames.numel() / frames.dim(0);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        char tag[32];
        std::snprintf(tag, sizeof(tag), "%05d", static_cast<int>(i));
        std::string clip_dir = "samples/s" + std::string(tag) + "/clip";
        int t_out = s.clip.length - (params.exclude_interaction_frame ? 1 : 0);
        Tensor clip({t_out, 3, frames.dim(2), frames.dim(3)});
        int w = 0;
        for (int t = s.clip.start_frame; t < s.clip.start_frame + s.clip.length; ++t) {
            if (params.exclude_interaction_frame && t == s.provenance.source_frame) continue;
            std::memcpy(clip.ptr() + static_cast<std::size_t>(w) * per,
                        frames.ptr() + static_cast<std::size_t>(t) * per,
                        sizeof(double) * static_cast<std::size_t>(per));
            ++w;
        }
        io::save_clip_frames((fs::path(out_dir) / clip_dir).string(), clip);
        std::string img_file = "samples/s" + std::string(tag) + "/target.ppm";
        io::save_ppm((fs::path(out_dir) / img_file).string(), s.target_image);
        std::string hm_file = "samples/s" + std::string(tag) + "/gt.npy";
        io::save_heatmap((fs::path(out_dir) / hm_file).string(), s.gt_heatmap,
                         "warped hand-box mask");
        json rects = json::array();
        for (const auto& r : s.provenance.mask_rects) rects.push_back({r.x0, r.y0, r.x1, r.y1});
        json rec{{"clip", clip_dir},
                 {"image", img_file},
                 {"heatmap", hm_file},
                 {"transform", s.transform.m},
                 {"provenance",
                  {{"source_frame", s.provenance.source_frame},
                   {"hand_box",
                    {s.provenance.hand_box.x0, s.provenance.hand_box.y0, s.provenance.hand_box.x1,
                     s.provenance.hand_box.y1}},
                   {"mask_rects", rects},
                   {"seed", s.provenance.seed}}}};
        manifest += rec.dump();
        manifest += '\n';
    }
    io::write_text_file((fs::path(out_dir) / "manifest.jsonl").string(), manifest);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"video-to-image affordance grounding toolkit"};
    app.require_subcommand(1);

    // train / pretrain / finetune
    std::string config_path, data_path, out_dir, ckpt_path, synth_manifest;
    auto* train_cmd = app.add_subcommand("train", "supervised training");
    train_cmd->add_option("--config", config_path, "run config file")->required();
    train_cmd->add_option("--data", data_path, "dataset manifest")->required();
    train_cmd->add_option("--out", out_dir, "output directory")->required();

    auto* pretrain_cmd = app.add_subcommand("pretrain", "masked-hand pre-training");
    pretrain_cmd->add_option("--config", config_path, "run config file")->required();
    pretrain_cmd->add_option("--synth-manifest", synth_manifest, "synthesized dataset manifest")
        ->required();
    pretrain_cmd->add_option("--out", out_dir, "output directory")->required();

    auto* finetune_cmd = app.add_subcommand("finetune", "fine-tune from a pre-trained checkpoint");
    finetune_cmd->add_option("--config", config_path, "run config file")->required();
    finetune_cmd->add_option("--data", data_path, "dataset manifest")->required();
    finetune_cmd->add_option("--ckpt", ckpt_path, "pre-trained checkpoint")->required();
    finetune_cmd->add_option("--out", out_dir, "output directory")->required();

    // eval / zeroshot
    std::string res_str = "256x256", per_sample_out, attn_dump;
    bool want_action = false;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    eval_cmd->add_option("--ckpt", ckpt_path, "checkpoint")->required();
    eval_cmd->add_option("--data", data_path, "dataset manifest")->required();
    eval_cmd->add_option("--res", res_str, "evaluation resolution HxW");
    eval_cmd->add_option("--per-sample", per_sample_out, "per-sample JSONL output path");
    eval_cmd->add_option("--dump-attention", attn_dump, "directory for attention-weight dumps");

    auto* zeroshot_cmd = app.add_subcommand("zeroshot", "zero-shot evaluation of a pre-trained model");
    zeroshot_cmd->add_option("--ckpt", ckpt_path, "checkpoint")->required();
    zeroshot_cmd->add_option("--data", data_path, "dataset manifest")->required();
    zeroshot_cmd->add_option("--res", res_str, "evaluation resolution HxW");
    zeroshot_cmd->add_flag("--action", want_action, "request action metrics (errors: none exist)");
    zeroshot_cmd->add_option("--per-sample", per_sample_out, "per-sample JSONL output path");

    // score
    std::string gt_path, pred_path, points_path;
    auto* score_cmd = app.add_subcommand("score", "metrics for one gt/pred heatmap pair");
    score_cmd->add_option("--gt", gt_path, "ground-truth heatmap (.npy)")->required();
    score_cmd->add_option("--pred", pred_path, "predicted heatmap (.npy)")->required();
    score_cmd->add_option("--res", res_str, "resolution HxW (defaults to native)");
    score_cmd->add_option("--points", points_path, "annotation JSON for AUC-J positives");
    bool score_native = true;
    score_cmd->callback([&] { score_native = score_cmd->count("--res") == 0; });

    // gen-corpus
    harness::CorpusSpec corpus;
    auto* gen_cmd = app.add_subcommand("gen-corpus", "generate a synthetic corpus");
    gen_cmd->add_option("--n", corpus.n_samples, "number of samples");
    gen_cmd->add_option("--size", corpus.image_size, "image size in pixels");
    gen_cmd->add_option("--clip-len", corpus.clip_len, "frames per clip");
    gen_cmd->add_option("--seed", corpus.seed, "corpus seed");
    gen_cmd->add_option("--kernel", corpus.gaussian_kernel,
                        "target blur kernel (default: largest odd <= sqrt(h*w)/3)");
    gen_cmd->add_option("--sigma", corpus.gaussian_sigma, "target blur sigma (default: paired)");
    gen_cmd->add_option("--out", out_dir, "output directory")->required();

    // synth
    std::string frames_path, detections_path;
    maskahand::SynthParams synth_params;
    int synth_count = 8, synth_clip_len = 32, synth_stride = 16;
    double synth_threshold = 0.99;
    int fill_zero = 0;
    auto* synth_cmd = app.add_subcommand("synth", "synthesize masked-hand training samples");
    synth_cmd->add_option("--frames", frames_path, "source video (frame dir or npy)")->required();
    synth_cmd->add_option("--detections", detections_path, "detection sidecar JSONL")->required();
    synth_cmd->add_option("--out", out_dir, "output directory")->required();
    synth_cmd->add_option("--scale", synth_params.mask_scale, "hand mask enlargement factor");
    synth_cmd->add_option("--distortion", synth_params.distortion, "perspective distortion");
    synth_cmd->add_option("--hand-masks", synth_params.hand_mask_count, "hand context masks (0/1)");
    synth_cmd->add_option("--random-masks", synth_params.random_mask_count, "random context masks");
    synth_cmd->add_option("--seed", synth_params.seed, "base seed");
    synth_cmd->add_option("--count", synth_count, "samples to synthesize");
    synth_cmd->add_option("--clip-len", synth_clip_len, "mined clip length");
    synth_cmd->add_option("--stride", synth_stride, "stride between clips");
    synth_cmd->add_option("--threshold", synth_threshold, "interaction score threshold");
    synth_cmd->add_flag("--zero-fill", fill_zero, "fill masks with zeros instead of noise");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train_cmd || *pretrain_cmd || *finetune_cmd) {
            auto cfg = harness::RunConfig::from_file(config_path);
            const io::Checkpoint* init = nullptr;
            io::Checkpoint loaded;
            if (*pretrain_cmd) {
                cfg.mode = harness::RunMode::maskahand_pretrain;
                data_path = synth_manifest;
            } else if (*finetune_cmd) {
                cfg.mode = harness::RunMode::finetune;
                loaded = io::load_checkpoint(ckpt_path);
                init = &loaded;
            }
            auto dataset = harness::load_manifest(data_path);
            auto result = harness::train(cfg, dataset, out_dir, init);
            std::cout << json{{"checkpoint", result.checkpoint_path},
                              {"final_loss", result.trace.back().loss}}
                             .dump()
                      << "\n";
        } else if (*eval_cmd) {
            auto [rh, rw] = parse_res(res_str);
            harness::EvalOptions opts;
            opts.res_h = rh;
            opts.res_w = rw;
            opts.per_sample_path = per_sample_out;
            opts.attn_dump_dir = attn_dump;
            auto result = harness::evaluate(io::load_checkpoint(ckpt_path),
                                            harness::load_manifest(data_path), opts);
            std::cout << harness::metric_report_json(result.aggregate, result.action_accuracy).dump()
                      << "\n";
        } else if (*zeroshot_cmd) {
            auto [rh, rw] = parse_res(res_str);
            harness::EvalOptions opts;
            opts.res_h = rh;
            opts.res_w = rw;
            opts.want_action = want_action;
            opts.per_sample_path = per_sample_out;
            auto result = harness::zero_shot_eval(io::load_checkpoint(ckpt_path),
                                                  harness::load_manifest(data_path), opts);
            std::cout << harness::metric_report_json(result.aggregate, std::nullopt).dump() << "\n";
        } else if (*score_cmd) {
            auto gt = io::load_heatmap(gt_path);
            auto pred = io::load_heatmap(pred_path);
            if (gt.kind != heatmaps::HeatmapKind::sum_normalized)
                gt = heatmaps::sum_normalize(gt);
            if (pred.kind == heatmaps::HeatmapKind::logits)
                pred = heatmaps::softmax_normalize(pred);
            else if (pred.kind != heatmaps::HeatmapKind::sum_normalized)
                pred = heatmaps::sum_normalize(pred);
            int rh = gt.height(), rw = gt.width();
            if (!score_native) std::tie(rh, rw) = parse_res(res_str);
            std::optional<heatmaps::AffordanceAnnotation> ann;
            if (!points_path.empty()) ann = io::load_annotation(points_path);
            auto rep = metrics::evaluate_at(gt, pred, rh, rw, ann,
                                            ann ? metrics::AucSource::points
                                                : metrics::AucSource::threshold);
            std::cout << json{{"kld", rep.kld}, {"sim", rep.sim}, {"auc_j", rep.auc_j}}.dump()
                      << "\n";
        } else if (*gen_cmd) {
            harness::generate_synthetic_corpus(corpus, out_dir);
            std::cout << json{{"out", out_dir}, {"samples", corpus.n_samples}}.dump() << "\n";
        } else if (*synth_cmd) {
            if (fill_zero) synth_params.fill = maskahand::MaskFill::zero;
            emit_synth_dataset(frames_path, detections_path, out_dir, synth_params, synth_count,
                               synth_clip_len, synth_stride, synth_threshold);
            std::cout << json{{"out", out_dir}, {"samples", synth_count}}.dump() << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
