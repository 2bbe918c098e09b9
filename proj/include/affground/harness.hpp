#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "affground/io.hpp"
#include "affground/metrics.hpp"
#include "affground/model.hpp"

namespace affground::harness {

enum class RunMode { supervised, maskahand_pretrain, zero_shot_eval, finetune };
RunMode mode_from_string(const std::string& s);
std::string mode_to_string(RunMode m);

struct RunConfig {
    std::string optimizer = "adamw";
    double lr = 3e-4;
    double weight_decay = 0.05;
    std::string schedule = "cosine";
    int batch_size = 16;
    int iterations = 5000;
    int epochs = 0;  // convenience alias, used when iterations == 0
    double backbone_lr_factor = 0.1;
    int spatial_size = 256;
    int max_frames = 64;
    int channels = 256;
    int heads = 0;  // 0 -> max(1, channels/64)
    std::string precision = "fp64";  // fp64 | mixed16 (params rounded to 16-bit storage)
    std::uint64_t seed = 0;
    RunMode mode = RunMode::supervised;

    std::vector<int> levels = {2, 3, 4, 5};
    int video_level = 3;
    bool temporal_pyramid = true;
    int action_classes = 0;  // 0 = derive from dataset
    int pool_grid = 1;
    double mlp_expansion = 4.0;
    int blocks_per_stage = 1;
    bool share_decoder_blocks = true;
    bool shared_backbone = true;
    bool shared_input_proj = true;
    bool per_level_input_proj = true;
    int supervise_h = 0, supervise_w = 0;  // 0 = native-resolution supervision
    double action_loss_weight = 1.0;
    int workers = 1;

    void validate() const;
    int resolved_heads() const { return heads > 0 ? heads : std::max(1, channels / 64); }
    ModelConfig model_config(int resolved_action_classes) const;

    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
    // UTF-8 "key: value" lines mirroring the field names
    static RunConfig from_file(const std::string& path);
};

struct SampleRecord {
    std::string video_ref;
    std::string image_ref;
    std::string heatmap_ref;
    std::optional<int> action;
    std::optional<std::string> annotation_ref;
};

// JSON-lines manifest; refs are resolved relative to the manifest directory
std::vector<SampleRecord> load_manifest(const std::string& path);
void append_manifest_record(std::string& out, const SampleRecord& rec);

struct LossTracePoint {
    int iter = 0;
    double lr = 0.0;
    double loss = 0.0;
};

struct TrainResult {
    std::vector<LossTracePoint> trace;
    std::string checkpoint_path;
};

struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// cosine decay to zero over [0, total]
double cosine_lr(double base, std::int64_t iter, std::int64_t total);

// AdamW with decoupled weight decay and a reduced-rate backbone group.
TrainResult train(const RunConfig& cfg, const std::vector<SampleRecord>& dataset,
                  const std::string& out_dir, const io::Checkpoint* init_from = nullptr);

struct EvalOptions {
    int res_h = 0, res_w = 0;  // 0 = native
    bool oracle_inject = false;
    bool want_action = false;  // only meaningful for zero-shot, where it must error
    std::string per_sample_path;  // optional JSONL output
    std::string attn_dump_dir;    // optional attention-weight npy dump
};

struct EvalResult {
    metrics::MetricReport aggregate;
    std::optional<double> action_accuracy;
    int count = 0;
    std::vector<metrics::MetricReport> per_sample;
};

EvalResult evaluate(const io::Checkpoint& ckpt, const std::vector<SampleRecord>& dataset,
                    const EvalOptions& opts);
// heatmap metrics only; the checkpoint must come from maskahand_pretrain mode
EvalResult zero_shot_eval(const io::Checkpoint& ckpt, const std::vector<SampleRecord>& dataset,
                          EvalOptions opts);
// fixed centered Gaussian prediction for every sample
EvalResult center_bias_baseline(const std::vector<SampleRecord>& dataset,
                                const EvalOptions& opts);

struct CorpusSpec {
    int n_samples = 16;
    int image_size = 64;
    int clip_len = 16;
    std::uint64_t seed = 0;
    // 0 = largest odd <= sqrt(h*w)/3; set 3 for the small-kernel reading
    int gaussian_kernel = 0;
    double gaussian_sigma = 0.0;  // 0 = paired to the kernel size

    void validate() const;
};

// Procedurally rendered corpus: colored shapes, a scripted hand moving to
// touch one shape per clip, detection sidecars, and supervised (V,I,A,H)
// records where H is the touched-shape target under a random homography.
void generate_synthetic_corpus(const CorpusSpec& spec, const std::string& out_dir);

nlohmann::json metric_report_json(const metrics::MetricReport& rep,
                                  const std::optional<double>& accuracy);

}  // namespace affground::harness
