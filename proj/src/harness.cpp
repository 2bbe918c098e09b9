#include "affground/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <filesystem>
#include <sstream>
#include <thread>

#include "affground/maskahand.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace affground::harness {

RunMode mode_from_string(const std::string& s) {
    if (s == "supervised") return RunMode::supervised;
    if (s == "maskahand_pretrain") return RunMode::maskahand_pretrain;
    if (s == "zero_shot_eval") return RunMode::zero_shot_eval;
    if (s == "finetune") return RunMode::finetune;
    throw std::invalid_argument("unknown mode: " + s);
}

std::string mode_to_string(RunMode m) {
    switch (m) {
        case RunMode::supervised: return "supervised";
        case RunMode::maskahand_pretrain: return "maskahand_pretrain";
        case RunMode::zero_shot_eval: return "zero_shot_eval";
        case RunMode::finetune: return "finetune";
    }
    return "supervised";
}

void RunConfig::validate() const {
    if (optimizer != "adamw") throw std::invalid_argument("optimizer must be adamw");
    if (schedule != "cosine") throw std::invalid_argument("schedule must be cosine");
    if (lr <= 0.0 || weight_decay < 0.0) throw std::invalid_argument("invalid optimizer settings");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (iterations < 0 || epochs < 0) throw std::invalid_argument("invalid iteration count");
    if (iterations == 0 && epochs == 0)
        throw std::invalid_argument("one of iterations/epochs must be positive");
    if (backbone_lr_factor <= 0.0) throw std::invalid_argument("backbone_lr_factor must be > 0");
    if (spatial_size < 16) throw std::invalid_argument("spatial_size must be >= 16");
    if (max_frames < 1) throw std::invalid_argument("max_frames must be >= 1");
    if (channels < 1) throw std::invalid_argument("channels must be >= 1");
    if (channels % resolved_heads() != 0)
        throw std::invalid_argument("heads must divide channels");
    if (precision != "fp64" && precision != "mixed16")
        throw std::invalid_argument("precision must be fp64 or mixed16");
    if (workers < 1) throw std::invalid_argument("workers must be >= 1");
}

ModelConfig RunConfig::model_config(int resolved_action_classes) const {
    ModelConfig mc;
    mc.enc.channels = channels;
    mc.enc.levels = levels;
    mc.enc.shared_backbone = shared_backbone;
    mc.enc.shared_input_proj_between_modalities = shared_input_proj;
    mc.enc.per_level_input_proj = per_level_input_proj;
    mc.dec.channels = channels;
    mc.dec.heads = resolved_heads();
    mc.dec.blocks_per_stage = blocks_per_stage;
    mc.dec.share_block_across_stages = share_decoder_blocks;
    mc.dec.mlp_expansion = mlp_expansion;
    mc.spatial_size = spatial_size;
    mc.video_level = video_level;
    mc.temporal_pyramid = temporal_pyramid;
    mc.action_classes = resolved_action_classes;
    mc.pool_grid = pool_grid;
    mc.seed = seed;
    return mc;
}

json RunConfig::to_json() const {
    return json{{"optimizer", optimizer},
                {"lr", lr},
                {"weight_decay", weight_decay},
                {"schedule", schedule},
                {"batch_size", batch_size},
                {"iterations", iterations},
                {"epochs", epochs},
                {"backbone_lr_factor", backbone_lr_factor},
                {"spatial_size", spatial_size},
                {"max_frames", max_frames},
                {"channels", channels},
                {"heads", heads},
                {"precision", precision},
                {"seed", seed},
                {"mode", mode_to_string(mode)},
                {"levels", levels},
                {"video_level", video_level},
                {"temporal_pyramid", temporal_pyramid},
                {"action_classes", action_classes},
                {"pool_grid", pool_grid},
                {"mlp_expansion", mlp_expansion},
                {"blocks_per_stage", blocks_per_stage},
                {"share_decoder_blocks", share_decoder_blocks},
                {"shared_backbone", shared_backbone},
                {"shared_input_proj", shared_input_proj},
                {"per_level_input_proj", per_level_input_proj},
                {"supervise_h", supervise_h},
                {"supervise_w", supervise_w},
                {"action_loss_weight", action_loss_weight},
                {"workers", workers}};
}

RunConfig RunConfig::from_json(const json& j) {
    RunConfig c;
    auto get = [&](const char* k, auto& field) {
        if (j.contains(k)) field = j.at(k).get<std::decay_t<decltype(field)>>();
    };
    get("optimizer", c.optimizer);
    get("lr", c.lr);
    get("weight_decay", c.weight_decay);
    get("schedule", c.schedule);
    get("batch_size", c.batch_size);
    get("iterations", c.iterations);
    get("epochs", c.epochs);
    get("backbone_lr_factor", c.backbone_lr_factor);
    get("spatial_size", c.spatial_size);
    get("max_frames", c.max_frames);
    get("channels", c.channels);
    get("heads", c.heads);
    get("precision", c.precision);
    get("seed", c.seed);
    if (j.contains("mode")) c.mode = mode_from_string(j.at("mode").get<std::string>());
    get("levels", c.levels);
    get("video_level", c.video_level);
    get("temporal_pyramid", c.temporal_pyramid);
    get("action_classes", c.action_classes);
    get("pool_grid", c.pool_grid);
    get("mlp_expansion", c.mlp_expansion);
    get("blocks_per_stage", c.blocks_per_stage);
    get("share_decoder_blocks", c.share_decoder_blocks);
    get("shared_backbone", c.shared_backbone);
    get("shared_input_proj", c.shared_input_proj);
    get("per_level_input_proj", c.per_level_input_proj);
    get("supervise_h", c.supervise_h);
    get("supervise_w", c.supervise_w);
    get("action_loss_weight", c.action_loss_weight);
    get("workers", c.workers);
    // epochs given without iterations: the alias drives the schedule
    if (j.contains("epochs") && !j.contains("iterations")) c.iterations = 0;
    return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::istringstream ss(io::read_text_file(path));
    json j = json::object();
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        auto colon = line.find(':');
        if (colon == std::string::npos) {
            bool blank = true;
            for (char ch : line)
                if (!std::isspace(static_cast<unsigned char>(ch))) blank = false;
            if (blank) continue;
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": expected 'key: value'");
        }
        auto trim = [](std::string s) {
            auto b = s.find_first_not_of(" \t\r");
            auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
        };
        std::string key = trim(line.substr(0, colon));
        std::string value = trim(line.substr(colon + 1));
        if (key.empty() || value.empty())
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty entry");
        if (key == "levels") {
            std::vector<int> lv;
            std::stringstream vs(value);
            std::string tok;
            while (std::getline(vs, tok, ',')) lv.push_back(std::stoi(tok));
            j[key] = lv;
        } else if (key == "optimizer" || key == "schedule" || key == "precision" ||
                   key == "mode") {
            j[key] = value;
        } else if (value == "true" || value == "false") {
            j[key] = (value == "true");
        } else if (value.find_first_of(".eE") != std::string::npos) {
            j[key] = std::stod(value);
        } else {
            j[key] = std::stoll(value);
        }
    }
    RunConfig c = from_json(j);
    c.validate();
    return c;
}

std::vector<SampleRecord> load_manifest(const std::string& path) {
    std::istringstream ss(io::read_text_file(path));
    fs::path base = fs::path(path).parent_path();
    auto resolve = [&](const std::string& ref) { return (base / ref).string(); };
    std::vector<SampleRecord> records;
    std::string line;
    while (std::getline(ss, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        SampleRecord rec;
        rec.video_ref = resolve(j.at("clip").get<std::string>());
        rec.image_ref = resolve(j.at("image").get<std::string>());
        rec.heatmap_ref = resolve(j.at("heatmap").get<std::string>());
        if (j.contains("action")) rec.action = j.at("action").get<int>();
        if (j.contains("annotation"))
            rec.annotation_ref = resolve(j.at("annotation").get<std::string>());
        records.push_back(std::move(rec));
    }
    return records;
}

void append_manifest_record(std::string& out, const SampleRecord& rec) {
    json j{{"clip", rec.video_ref}, {"image", rec.image_ref}, {"heatmap", rec.heatmap_ref}};
    if (rec.action) j["action"] = *rec.action;
    if (rec.annotation_ref) j["annotation"] = *rec.annotation_ref;
    out += j.dump();
    out += '\n';
}

double cosine_lr(double base, std::int64_t iter, std::int64_t total) {
    if (total < 1) throw std::invalid_argument("cosine_lr: total must be >= 1");
    if (iter < 0 || iter > total) throw std::invalid_argument("cosine_lr: iter out of range");
    return base * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(iter) / total));
}

namespace {

// IEEE binary16 round-trip, round-to-nearest-even; used by precision=mixed16
// to emulate 16-bit parameter storage between optimizer steps
std::uint16_t float_to_half(float f) {
    std::uint32_t x;
    std::memcpy(&x, &f, 4);
    std::uint32_t sign = (x >> 16) & 0x8000u;
    std::uint32_t mant = x & 0x007fffffu;
    std::int32_t exp = static_cast<std::int32_t>((x >> 23) & 0xff) - 127 + 15;
    if (exp >= 31) return static_cast<std::uint16_t>(sign | 0x7c00u);  // inf/overflow
    if (exp <= 0) {
        if (exp < -10) return static_cast<std::uint16_t>(sign);  // underflow to zero
        mant |= 0x00800000u;
        int shift = 14 - exp;
        std::uint32_t half_mant = mant >> shift;
        std::uint32_t rem = mant & ((1u << shift) - 1);
        std::uint32_t halfway = 1u << (shift - 1);
        if (rem > halfway || (rem == halfway && (half_mant & 1u))) ++half_mant;
        return static_cast<std::uint16_t>(sign | half_mant);
    }
    std::uint32_t half_mant = mant >> 13;
    std::uint32_t rem = mant & 0x1fffu;
    if (rem > 0x1000u || (rem == 0x1000u && (half_mant & 1u))) {
        ++half_mant;
        if (half_mant == 0x400u) {
            half_mant = 0;
            ++exp;
            if (exp >= 31) return static_cast<std::uint16_t>(sign | 0x7c00u);
        }
    }
    return static_cast<std::uint16_t>(sign | (static_cast<std::uint32_t>(exp) << 10) | half_mant);
}

float half_to_float(std::uint16_t h) {
    std::uint32_t sign = (static_cast<std::uint32_t>(h) & 0x8000u) << 16;
    std::uint32_t exp = (h >> 10) & 0x1f;
    std::uint32_t mant = h & 0x3ffu;
    std::uint32_t x;
    if (exp == 0) {
        if (mant == 0) {
            x = sign;
        } else {
            exp = 1;
            while (!(mant & 0x400u)) {
                mant <<= 1;
                --exp;
            }
            mant &= 0x3ffu;
            x = sign | ((exp + 127 - 15) << 23) | (mant << 13);
        }
    } else if (exp == 31) {
        x = sign | 0x7f800000u | (mant << 13);
    } else {
        x = sign | ((exp + 127 - 15) << 23) | (mant << 13);
    }
    float f;
    std::memcpy(&f, &x, 4);
    return f;
}

double quantize_half(double v) {
    return static_cast<double>(half_to_float(float_to_half(static_cast<float>(v))));
}

struct LoadedSample {
    Tensor clip;
    Tensor image;
    heatmaps::Heatmap gt;
    std::optional<int> action;
    std::optional<heatmaps::AffordanceAnnotation> annotation;
};

LoadedSample load_sample(const SampleRecord& rec, int max_frames, int spatial_size,
                         bool need_clip = true) {
    LoadedSample s;
    if (need_clip) s.clip = encoder::uniform_sample_frames(io::load_clip(rec.video_ref), max_frames);
    s.image = io::load_ppm(rec.image_ref);
    s.gt = io::load_heatmap(rec.heatmap_ref);
    if (s.gt.kind != heatmaps::HeatmapKind::sum_normalized)
        throw std::runtime_error("gt heatmap must be sum-normalized: " + rec.heatmap_ref);
    s.action = rec.action;
    if (rec.annotation_ref) s.annotation = io::load_annotation(*rec.annotation_ref);
    if (s.image.dim(1) != spatial_size || s.image.dim(2) != spatial_size)
        throw std::runtime_error("image resolution != configured spatial_size: " + rec.image_ref);
    if (s.gt.height() != spatial_size || s.gt.width() != spatial_size)
        throw std::runtime_error("gt heatmap resolution != spatial_size: " + rec.heatmap_ref);
    return s;
}

int resolve_action_classes(const RunConfig& cfg, const std::vector<SampleRecord>& dataset) {
    if (cfg.mode == RunMode::maskahand_pretrain) return 0;
    if (cfg.action_classes > 0) return cfg.action_classes;
    int with = 0, max_label = 0;
    for (const auto& r : dataset) {
        if (r.action) {
            ++with;
            max_label = std::max(max_label, *r.action);
        }
    }
    if (with == 0) return 0;
    if (with != static_cast<int>(dataset.size()))
        throw std::invalid_argument("dataset mixes labeled and unlabeled actions");
    return std::max(max_label, 2);
}

struct AdamW {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double weight_decay = 0.0;
    std::vector<Tensor> m, v;
    std::int64_t t = 0;

    void init(const ParamStore& ps) {
        for (const auto& p : ps.all()) {
            m.push_back(Tensor::zeros(p->value.shape));
            v.push_back(Tensor::zeros(p->value.shape));
        }
    }

    void step(ParamStore& ps, const std::vector<Tensor>& grads,
              const std::vector<double>& lr_per_param) {
        ++t;
        double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (std::size_t i = 0; i < ps.all().size(); ++i) {
            double lr = lr_per_param[i];
            Tensor& pv = ps.all()[i]->value;
            const Tensor& g = grads[i];
            double* pm = m[i].ptr();
            double* pvv = v[i].ptr();
            double* pp = pv.ptr();
            const double* pg = g.ptr();
            for (std::int64_t j = 0; j < pv.numel(); ++j) {
                pm[j] = beta1 * pm[j] + (1.0 - beta1) * pg[j];
                pvv[j] = beta2 * pvv[j] + (1.0 - beta2) * pg[j] * pg[j];
                double mhat = pm[j] / bc1;
                double vhat = pvv[j] / bc2;
                pp[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * pp[j]);
            }
        }
    }
};

}  // namespace

TrainResult train(const RunConfig& cfg, const std::vector<SampleRecord>& dataset,
                  const std::string& out_dir, const io::Checkpoint* init_from) {
    cfg.validate();
    if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
    if (cfg.mode == RunMode::zero_shot_eval)
        throw std::invalid_argument("zero_shot_eval mode does not train");

    int action_classes = resolve_action_classes(cfg, dataset);
    GroundingModel model(cfg.model_config(action_classes));
    if (init_from) io::restore_params(model.params(), *init_from, /*allow_missing=*/true);

    int n = static_cast<int>(dataset.size());
    std::vector<LoadedSample> samples;
    samples.reserve(dataset.size());
    for (const auto& rec : dataset)
        samples.push_back(load_sample(rec, cfg.max_frames, cfg.spatial_size));

    std::int64_t iterations = cfg.iterations;
    if (iterations == 0)
        iterations = static_cast<std::int64_t>(cfg.epochs) * ((n + cfg.batch_size - 1) / cfg.batch_size);

    AdamW opt;
    opt.weight_decay = cfg.weight_decay;
    opt.init(model.params());
    std::vector<double> lr_factor(model.params().size(), 1.0);
    for (std::size_t i = 0; i < model.params().size(); ++i)
        if (GroundingModel::is_backbone_param(model.params().all()[i]->name))
            lr_factor[i] = cfg.backbone_lr_factor;

    int batch = std::min(cfg.batch_size, n);
    Rng shuffle_rng(cfg.seed ^ 0x5deece66dULL);
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    auto reshuffle = [&]() {
        for (int i = n - 1; i > 0; --i)
            std::swap(order[static_cast<std::size_t>(i)],
                      order[static_cast<std::size_t>(shuffle_rng.integer(0, i))]);
    };
    reshuffle();
    int cursor = 0;

    TrainResult result;
    result.trace.reserve(static_cast<std::size_t>(iterations));
    fs::create_directories(out_dir);
    std::string trace_text;

    std::size_t np = model.params().size();
    int workers = std::min({cfg.workers, batch, static_cast<int>(std::thread::hardware_concurrency())});
    if (workers < 1) workers = 1;

    auto flush_trace = [&]() {
        io::write_text_file((fs::path(out_dir) / "loss_trace.jsonl").string(), trace_text);
    };

    for (std::int64_t it = 0; it < iterations; ++it) {
        if (cursor + batch > n) {
            reshuffle();
            cursor = 0;
        }
        std::vector<int> batch_idx(order.begin() + cursor, order.begin() + cursor + batch);
        cursor += batch;

        double lr = cosine_lr(cfg.lr, it, iterations);
        std::vector<std::vector<Tensor>> sample_grads(static_cast<std::size_t>(batch));
        std::vector<double> sample_loss(static_cast<std::size_t>(batch), 0.0);

        auto run_range = [&](int begin, int end) {
            for (int b = begin; b < end; ++b) {
                const LoadedSample& s = samples[static_cast<std::size_t>(batch_idx[b])];
                auto out = model.forward(s.clip, s.image);
                bool finite = true;
                for (double v : out.heatmap_logits->value.data)
                    if (!std::isfinite(v)) finite = false;
                if (out.action_logits)
                    for (double v : out.action_logits->value.data)
                        if (!std::isfinite(v)) finite = false;
                if (!finite) {  // divergence: poison the batch loss, keep the trace
                    sample_loss[static_cast<std::size_t>(b)] =
                        std::numeric_limits<double>::quiet_NaN();
                    auto& bad = sample_grads[static_cast<std::size_t>(b)];
                    for (const auto& p : model.params().all())
                        bad.push_back(Tensor::zeros(p->value.shape));
                    continue;
                }
                // heatmap-only training ignores any labels the dataset carries
                std::optional<int> label = model.has_action_head() ? s.action : std::optional<int>{};
                auto loss = model.loss(out, s.gt, label, cfg.supervise_h, cfg.supervise_w,
                                       cfg.action_loss_weight);
                auto scaled = ag::scale(loss, 1.0 / batch);
                sample_loss[static_cast<std::size_t>(b)] = loss->value.data[0];
                auto grads = ag::backward(scaled);
                auto& dst = sample_grads[static_cast<std::size_t>(b)];
                dst.reserve(np);
                for (const auto& p : model.params().all()) {
                    const Tensor* g = ag::find_grad(grads, p);
                    dst.push_back(g ? *g : Tensor::zeros(p->value.shape));
                }
            }
        };
        if (workers == 1 || batch == 1) {
            run_range(0, batch);
        } else {
            std::vector<std::thread> pool;
            std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
            int chunk = (batch + workers - 1) / workers;
            for (int w = 0; w < workers; ++w) {
                int begin = w * chunk, end = std::min(batch, begin + chunk);
                if (begin >= end) break;
                pool.emplace_back([&, begin, end, w] {
                    try {
                        run_range(begin, end);
                    } catch (...) {
                        errors[static_cast<std::size_t>(w)] = std::current_exception();
                    }
                });
            }
            for (auto& th : pool) th.join();
            for (const auto& e : errors)
                if (e) std::rethrow_exception(e);
        }

        // deterministic reduction: sample order, then parameter order
        std::vector<Tensor> grads;
        grads.reserve(np);
        for (std::size_t i = 0; i < np; ++i)
            grads.push_back(Tensor::zeros(model.params().all()[i]->value.shape));
        for (int b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < np; ++i) {
                const Tensor& g = sample_grads[static_cast<std::size_t>(b)][i];
                double* d = grads[i].ptr();
                for (std::int64_t j = 0; j < g.numel(); ++j) d[j] += g.data[static_cast<std::size_t>(j)];
            }

        double mean_loss = 0.0;
        for (double l : sample_loss) mean_loss += l;
        mean_loss /= batch;
        result.trace.push_back({static_cast<int>(it), lr, mean_loss});
        trace_text += json{{"iter", it}, {"lr", lr}, {"loss", mean_loss}}.dump();
        trace_text += '\n';
        if (!std::isfinite(mean_loss)) {
            flush_trace();
            throw DivergenceError("loss diverged at iteration " + std::to_string(it));
        }

        std::vector<double> lr_per_param(np);
        for (std::size_t i = 0; i < np; ++i) lr_per_param[i] = lr * lr_factor[i];
        opt.step(model.params(), grads, lr_per_param);
        if (cfg.precision == "mixed16")
            for (const auto& p : model.params().all())
                for (double& v : p->value.data) v = quantize_half(v);
    }

    flush_trace();
    json meta{{"config", cfg.to_json()}, {"action_classes", action_classes},
              {"iterations_run", iterations}};
    result.checkpoint_path = (fs::path(out_dir) / "checkpoint.af").string();
    io::save_checkpoint(result.checkpoint_path, model.params(), meta);
    return result;
}

namespace {

EvalResult run_eval(const std::vector<SampleRecord>& dataset, const EvalOptions& opts,
                    GroundingModel* model, const RunConfig* cfg,
                    const heatmaps::Heatmap* fixed_pred) {
    if (dataset.empty()) throw std::invalid_argument("evaluate: empty dataset");
    EvalResult res;
    std::string per_sample_text;
    int correct = 0, labeled = 0;
    int max_frames = cfg ? cfg->max_frames : 64;
    bool need_clip = model != nullptr && !opts.oracle_inject;
    int spatial = 0;
    for (std::size_t s = 0; s < dataset.size(); ++s) {
        int expected = cfg ? cfg->spatial_size : io::load_heatmap(dataset[s].heatmap_ref).height();
        LoadedSample sample = load_sample(dataset[s], max_frames, expected, need_clip);
        spatial = sample.gt.height();
        int rh = opts.res_h > 0 ? opts.res_h : spatial;
        int rw = opts.res_w > 0 ? opts.res_w : spatial;
        if (rh > spatial || rw > spatial)
            throw std::invalid_argument("evaluation resolution exceeds native resolution");

        heatmaps::Heatmap pred;
        std::optional<int> pred_action;
        if (opts.oracle_inject) {
            pred = sample.gt;
            pred_action = sample.action;
        } else if (fixed_pred) {
            pred = *fixed_pred;
        } else {
            decoder::AttnTrace trace;
            auto out = model->forward(sample.clip, sample.image,
                                      opts.attn_dump_dir.empty() ? nullptr : &trace);
            pred = heatmaps::softmax_normalize(
                heatmaps::Heatmap(out.heatmap_logits->value, heatmaps::HeatmapKind::logits));
            if (out.action_logits) {
                const auto& d = out.action_logits->value.data;
                pred_action = static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin()) + 1;
            }
            if (!opts.attn_dump_dir.empty()) {
                fs::path dir = fs::path(opts.attn_dump_dir) / ("sample" + std::to_string(s));
                for (const auto& [tag, weights] : trace.records)
                    io::save_npy((dir / (tag + ".npy")).string(), weights);
            }
        }

        auto rep = metrics::evaluate_at(sample.gt, pred, rh, rw, sample.annotation,
                                        sample.annotation ? metrics::AucSource::points
                                                          : metrics::AucSource::threshold);
        res.per_sample.push_back(rep);
        json line{{"index", s}, {"kld", rep.kld}, {"sim", rep.sim}, {"auc_j", rep.auc_j}};
        if (sample.action && pred_action) {
            ++labeled;
            bool ok = (*pred_action == *sample.action);
            if (ok) ++correct;
            line["action_correct"] = ok;
        }
        per_sample_text += line.dump();
        per_sample_text += '\n';
    }
    res.count = static_cast<int>(dataset.size());
    for (const auto& r : res.per_sample) {
        res.aggregate.kld += r.kld;
        res.aggregate.sim += r.sim;
        res.aggregate.auc_j += r.auc_j;
    }
    res.aggregate.kld /= res.count;
    res.aggregate.sim /= res.count;
    res.aggregate.auc_j /= res.count;
    res.aggregate.res_h = res.per_sample.front().res_h;
    res.aggregate.res_w = res.per_sample.front().res_w;
    if (labeled > 0) res.action_accuracy = static_cast<double>(correct) / labeled;
    if (!opts.per_sample_path.empty()) io::write_text_file(opts.per_sample_path, per_sample_text);
    return res;
}

}  // namespace

EvalResult evaluate(const io::Checkpoint& ckpt, const std::vector<SampleRecord>& dataset,
                    const EvalOptions& opts) {
    RunConfig cfg = RunConfig::from_json(ckpt.meta.at("config"));
    int action_classes = ckpt.meta.at("action_classes").get<int>();
    GroundingModel model(cfg.model_config(action_classes));
    io::restore_params(model.params(), ckpt);
    return run_eval(dataset, opts, &model, &cfg, nullptr);
}

EvalResult zero_shot_eval(const io::Checkpoint& ckpt, const std::vector<SampleRecord>& dataset,
                          EvalOptions opts) {
    RunConfig cfg = RunConfig::from_json(ckpt.meta.at("config"));
    if (cfg.mode != RunMode::maskahand_pretrain)
        throw std::invalid_argument("zero-shot evaluation expects a maskahand_pretrain checkpoint");
    if (opts.want_action) throw std::invalid_argument("action head absent");
    int action_classes = ckpt.meta.at("action_classes").get<int>();
    GroundingModel model(cfg.model_config(action_classes));
    io::restore_params(model.params(), ckpt);
    EvalResult res = run_eval(dataset, opts, &model, &cfg, nullptr);
    res.action_accuracy.reset();
    return res;
}

EvalResult center_bias_baseline(const std::vector<SampleRecord>& dataset,
                                const EvalOptions& opts) {
    if (dataset.empty()) throw std::invalid_argument("evaluate: empty dataset");
    heatmaps::Heatmap first_gt = io::load_heatmap(dataset.front().heatmap_ref);
    int h = first_gt.height(), w = first_gt.width();
    heatmaps::AffordanceAnnotation center;
    center.points.emplace_back(w / 2.0, h / 2.0);
    auto pred = heatmaps::points_to_target(center, h, w, heatmaps::default_target_spec(h, w));
    return run_eval(dataset, opts, nullptr, nullptr, &pred);
}

// ------------------------------------------------------------- corpus

void CorpusSpec::validate() const {
    if (image_size < 16) throw std::invalid_argument("image_size must be >= 16 pixels");
    if (n_samples < 1) throw std::invalid_argument("n_samples must be >= 1");
    if (clip_len < 4) throw std::invalid_argument("clip_len must be >= 4");
    if (gaussian_kernel < 0 || (gaussian_kernel > 0 && gaussian_kernel % 2 == 0))
        throw std::invalid_argument("gaussian_kernel must be odd");
}

namespace {

struct Shape {
    int kind = 0;  // 0 circle, 1 square, 2 diamond, 3 ring
    double cx = 0, cy = 0, r = 0;
    std::array<double, 3> color{};
};

bool inside_shape(const Shape& s, double x, double y) {
    double dx = x - s.cx, dy = y - s.cy;
    switch (s.kind) {
        case 0: return dx * dx + dy * dy <= s.r * s.r;
        case 1: return std::abs(dx) <= s.r && std::abs(dy) <= s.r;
        case 2: return std::abs(dx) + std::abs(dy) <= s.r;
        default: {
            double d2 = dx * dx + dy * dy;
            return d2 <= s.r * s.r && d2 >= 0.25 * s.r * s.r;
        }
    }
}

void paint_shapes(Tensor& img, const std::vector<Shape>& shapes,
                  const std::array<double, 3>& bg) {
    int h = img.dim(1), w = img.dim(2);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::array<double, 3>* color = &bg;
            for (const auto& s : shapes)
                if (inside_shape(s, x, y)) {
                    color = &s.color;
                    break;
                }
            for (int c = 0; c < 3; ++c)
                img.data[(static_cast<std::size_t>(c) * h + y) * w + x] =
                    (*color)[static_cast<std::size_t>(c)];
        }
}

void paint_rect(Tensor& img, double cx, double cy, double half, const std::array<double, 3>& color) {
    int h = img.dim(1), w = img.dim(2);
    int x0 = std::max(0, heatmaps::round_half_down(cx - half));
    int y0 = std::max(0, heatmaps::round_half_down(cy - half));
    int x1 = std::min(w, heatmaps::round_half_down(cx + half));
    int y1 = std::min(h, heatmaps::round_half_down(cy + half));
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x)
            for (int c = 0; c < 3; ++c)
                img.data[(static_cast<std::size_t>(c) * h + y) * w + x] =
                    color[static_cast<std::size_t>(c)];
}

}  // namespace

void generate_synthetic_corpus(const CorpusSpec& spec, const std::string& out_dir) {
    spec.validate();
    fs::create_directories(out_dir);
    const int S = spec.image_size;
    const int T = spec.clip_len;
    static constexpr std::array<std::array<double, 3>, 4> kPalette{
        {{220, 60, 50}, {60, 200, 80}, {70, 90, 220}, {230, 210, 60}}};
    const std::array<double, 3> hand_color{210, 170, 140};

    std::string manifest;
    for (int i = 0; i < spec.n_samples; ++i) {
        Rng rng(spec.seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(i + 1)));

        std::array<double, 3> bg{static_cast<double>(rng.integer(30, 90)),
                                 static_cast<double>(rng.integer(30, 90)),
                                 static_cast<double>(rng.integer(30, 90))};
        std::vector<Shape> shapes;
        for (int k = 0; k < 4; ++k) {
            Shape s;
            s.kind = static_cast<int>(rng.integer(0, 3));
            double gx = (k % 2) ? 0.72 : 0.28;
            double gy = (k / 2) ? 0.72 : 0.28;
            s.cx = gx * S + rng.real(-S / 16.0, S / 16.0);
            s.cy = gy * S + rng.real(-S / 16.0, S / 16.0);
            s.r = S / 8.0 + rng.real(-S / 32.0, S / 32.0);
            s.color = kPalette[static_cast<std::size_t>(k)];
            shapes.push_back(s);
        }
        int target_slot = static_cast<int>(rng.integer(0, 3));
        const Shape& target = shapes[static_cast<std::size_t>(target_slot)];

        // hand path: border start, linear to the target center, parked there
        double hand_half = S / 12.0;
        int side = static_cast<int>(rng.integer(0, 3));
        double along = rng.real(0.2, 0.8) * S;
        double sx = side == 0 ? along : (side == 1 ? S - 1.0 : (side == 2 ? along : 0.0));
        double sy = side == 0 ? 0.0 : (side == 1 ? along : (side == 2 ? S - 1.0 : along));
        int t_arrive = std::max(1, 3 * T / 4);

        Tensor scene({3, S, S});
        paint_shapes(scene, shapes, bg);

        Tensor clip({T, 3, S, S});
        std::vector<maskahand::HandDetection> detections;
        for (int t = 0; t < T; ++t) {
            double a = std::min(1.0, static_cast<double>(t) / t_arrive);
            double hx = sx + (target.cx - sx) * a;
            double hy = sy + (target.cy - sy) * a;
            Tensor frame = scene;
            paint_rect(frame, hx, hy, hand_half, hand_color);
            std::memcpy(clip.ptr() + static_cast<std::size_t>(t) * frame.numel(), frame.ptr(),
                        sizeof(double) * static_cast<std::size_t>(frame.numel()));
            maskahand::HandDetection det;
            det.frame_index = t;
            double jitter = rng.real(-1.0, 1.0);
            det.box = {std::max(0.0, hx - hand_half + jitter), std::max(0.0, hy - hand_half),
                       std::min<double>(S, hx + hand_half + jitter), std::min<double>(S, hy + hand_half)};
            if (det.box.x1 - det.box.x0 < 2.0) det.box.x1 = det.box.x0 + 2.0;
            if (det.box.y1 - det.box.y0 < 2.0) det.box.y1 = det.box.y0 + 2.0;
            double dist = std::hypot(hx - target.cx, hy - target.cy);
            det.interacting = dist <= target.r;
            det.score = det.interacting ? 0.991 + 0.008 * rng.real() : 0.2 + 0.5 * rng.real();
            detections.push_back(det);
        }

        // target image: the clean scene under a random perspective change
        maskahand::Homography hom = maskahand::random_homography(S, S, 0.35, rng);
        Tensor target_img = maskahand::warp_image_bilinear(scene, hom);
        auto [wx, wy] = hom.apply(target.cx, target.cy);
        wx = std::clamp(wx, 0.0, S - 1.0);
        wy = std::clamp(wy, 0.0, S - 1.0);
        heatmaps::AffordanceAnnotation ann;
        ann.action = target.kind + 1;
        for (int p = 0; p < 10; ++p) {
            double px = std::clamp(wx + rng.real(-target.r / 3.0, target.r / 3.0), 0.0, S - 1.0);
            double py = std::clamp(wy + rng.real(-target.r / 3.0, target.r / 3.0), 0.0, S - 1.0);
            ann.points.emplace_back(px, py);
        }
        heatmaps::GaussianTargetSpec tspec = heatmaps::default_target_spec(S, S);
        if (spec.gaussian_kernel > 0) {
            tspec.kernel_size = spec.gaussian_kernel;
            tspec.sigma = spec.gaussian_sigma > 0 ? spec.gaussian_sigma
                                                  : heatmaps::default_sigma(spec.gaussian_kernel);
        }
        auto gt = heatmaps::points_to_target(ann, S, S, tspec);

        char tag[32];
        std::snprintf(tag, sizeof(tag), "%04d", i);
        std::string vid_dir = "videos/vid" + std::string(tag);
        io::save_clip_frames((fs::path(out_dir) / vid_dir).string(), clip);
        maskahand::save_detections(
            (fs::path(out_dir) / vid_dir / "detections.jsonl").string(), detections);
        std::string img_file = "images/img" + std::string(tag) + ".ppm";
        io::save_ppm((fs::path(out_dir) / img_file).string(), target_img);
        std::string hm_file = "heatmaps/hm" + std::string(tag) + ".npy";
        io::save_heatmap((fs::path(out_dir) / hm_file).string(), gt,
                         "points_to_target default kernel");
        std::string ann_file = "annotations/ann" + std::string(tag) + ".json";
        io::save_annotation((fs::path(out_dir) / ann_file).string(), ann);

        json rec{{"clip", vid_dir},
                 {"image", img_file},
                 {"heatmap", hm_file},
                 {"annotation", ann_file},
                 {"action", *ann.action},
                 {"homography", hom.m}};
        manifest += rec.dump();
        manifest += '\n';
    }
    io::write_text_file((fs::path(out_dir) / "manifest.jsonl").string(), manifest);
}

json metric_report_json(const metrics::MetricReport& rep, const std::optional<double>& accuracy) {
    json j{{"kld", rep.kld},
           {"sim", rep.sim},
           {"auc_j", rep.auc_j},
           {"res", {rep.res_h, rep.res_w}}};
    if (accuracy) j["action_acc"] = *accuracy;
    return j;
}

}  // namespace affground::harness
