#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "affground/heatmaps.hpp"
#include "affground/params.hpp"
#include "affground/tensor.hpp"

namespace affground::io {

// npy v1.0, dtype <f8
void save_npy(const std::string& path, const Tensor& t);
Tensor load_npy(const std::string& path);

// heatmap = npy array + "<path>.meta" sidecar text header (shape, kind, spec)
void save_heatmap(const std::string& path, const heatmaps::Heatmap& hm,
                  const std::string& spec_desc = "");
heatmaps::Heatmap load_heatmap(const std::string& path);

// binary PPM (P6). Tensors are (3,h,w) doubles in [0,255].
void save_ppm(const std::string& path, const Tensor& img);
Tensor load_ppm(const std::string& path);

// clip = directory of .ppm frames (sorted by name) or a single (t,3,h,w) npy
Tensor load_clip(const std::string& path);
void save_clip_frames(const std::string& dir, const Tensor& clip);

void save_annotation(const std::string& path, const heatmaps::AffordanceAnnotation& ann);
heatmaps::AffordanceAnnotation load_annotation(const std::string& path);

// checkpoint: magic, JSON manifest (config + entry names/shapes), raw doubles
struct Checkpoint {
    nlohmann::json meta;
    std::vector<std::pair<std::string, Tensor>> params;
};
void save_checkpoint(const std::string& path, const ParamStore& store, nlohmann::json meta);
Checkpoint load_checkpoint(const std::string& path);
// copies values into an existing store by name; when allow_missing, store
// entries absent from the checkpoint keep their current values
void restore_params(ParamStore& store, const Checkpoint& ckpt, bool allow_missing = false);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace affground::io
