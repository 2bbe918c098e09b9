#include "affground/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace affground::io {

namespace {

std::ofstream open_out(const std::string& path) {
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    return out;
}

std::ifstream open_in(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    return in;
}

void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace

void save_npy(const std::string& path, const Tensor& t) {
    auto out = open_out(path);
    std::string shape;
    for (std::size_t i = 0; i < t.shape.size(); ++i) shape += std::to_string(t.shape[i]) + ", ";
    if (t.shape.size() > 1) shape.resize(shape.size() - 2);
    std::string header =
        "{'descr': '<f8', 'fortran_order': False, 'shape': (" + shape + "), }";
    std::size_t total = 10 + header.size() + 1;
    std::size_t padded = (total + 63) / 64 * 64;
    header.append(padded - total, ' ');
    header += '\n';
    out.write("\x93NUMPY\x01\x00", 8);
    std::uint16_t hlen = static_cast<std::uint16_t>(header.size());
    unsigned char lenb[2] = {static_cast<unsigned char>(hlen & 0xff),
                             static_cast<unsigned char>(hlen >> 8)};
    out.write(reinterpret_cast<const char*>(lenb), 2);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
}

Tensor load_npy(const std::string& path) {
    auto in = open_in(path);
    char magic[8];
    in.read(magic, 8);
    if (std::memcmp(magic, "\x93NUMPY", 6) != 0) throw std::runtime_error("not npy: " + path);
    unsigned char lenb[2];
    in.read(reinterpret_cast<char*>(lenb), 2);
    std::size_t hlen = lenb[0] | (static_cast<std::size_t>(lenb[1]) << 8);
    std::string header(hlen, '\0');
    in.read(header.data(), static_cast<std::streamsize>(hlen));
    if (header.find("'<f8'") == std::string::npos)
        throw std::runtime_error("npy dtype must be <f8: " + path);
    if (header.find("'fortran_order': False") == std::string::npos)
        throw std::runtime_error("npy must be C order: " + path);
    auto lp = header.find('(');
    auto rp = header.find(')', lp);
    std::vector<int> shape;
    std::stringstream ss(header.substr(lp + 1, rp - lp - 1));
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        std::string trimmed;
        for (char c : tok)
            if (!std::isspace(static_cast<unsigned char>(c))) trimmed += c;
        if (!trimmed.empty()) shape.push_back(std::stoi(trimmed));
    }
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!in) throw std::runtime_error("truncated npy: " + path);
    return t;
}

namespace {
std::string kind_name(heatmaps::HeatmapKind k) {
    switch (k) {
        case heatmaps::HeatmapKind::sum_normalized: return "sum_normalized";
        case heatmaps::HeatmapKind::logits: return "logits";
        default: return "raw";
    }
}
heatmaps::HeatmapKind kind_from(const std::string& s) {
    if (s == "sum_normalized") return heatmaps::HeatmapKind::sum_normalized;
    if (s == "logits") return heatmaps::HeatmapKind::logits;
    if (s == "raw") return heatmaps::HeatmapKind::raw;
    throw std::runtime_error("unknown heatmap kind: " + s);
}
}  // namespace

void save_heatmap(const std::string& path, const heatmaps::Heatmap& hm,
                  const std::string& spec_desc) {
    hm.validate();
    save_npy(path, hm.values);
    std::string meta = "shape: " + std::to_string(hm.height()) + " " +
                       std::to_string(hm.width()) + "\nkind: " + kind_name(hm.kind) +
                       "\nspec: " + spec_desc + "\n";
    write_text_file(path + ".meta", meta);
}

heatmaps::Heatmap load_heatmap(const std::string& path) {
    Tensor values = load_npy(path);
    heatmaps::HeatmapKind kind = heatmaps::HeatmapKind::raw;
    if (fs::exists(path + ".meta")) {
        std::istringstream ss(read_text_file(path + ".meta"));
        std::string line;
        while (std::getline(ss, line)) {
            if (line.rfind("kind: ", 0) == 0) kind = kind_from(line.substr(6));
        }
    }
    heatmaps::Heatmap hm(std::move(values), kind);
    hm.validate();
    return hm;
}

void save_ppm(const std::string& path, const Tensor& img) {
    if (img.ndim() != 3 || img.dim(0) != 3) throw std::invalid_argument("ppm: expects (3,h,w)");
    int h = img.dim(1), w = img.dim(2);
    auto out = open_out(path);
    out << "P6\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = img.data[(static_cast<std::size_t>(c) * h + y) * w + x];
                v = std::round(std::clamp(v, 0.0, 255.0));
                row[static_cast<std::size_t>(x) * 3 + c] = static_cast<unsigned char>(v);
            }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
}

Tensor load_ppm(const std::string& path) {
    auto in = open_in(path);
    std::string magic;
    in >> magic;
    if (magic != "P6") throw std::runtime_error("not P6 ppm: " + path);
    int w, h, maxval;
    in >> w >> h >> maxval;
    if (maxval != 255) throw std::runtime_error("ppm maxval must be 255: " + path);
    in.get();  // single whitespace after header
    Tensor img({3, h, w});
    std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * 3);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!in) throw std::runtime_error("truncated ppm: " + path);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.data[(static_cast<std::size_t>(c) * h + y) * w + x] =
                    static_cast<double>(buf[(static_cast<std::size_t>(y) * w + x) * 3 + c]);
    return img;
}

Tensor load_clip(const std::string& path) {
    if (fs::is_directory(path)) {
        std::vector<std::string> files;
        for (const auto& e : fs::directory_iterator(path))
            if (e.path().extension() == ".ppm") files.push_back(e.path().string());
        if (files.empty()) throw std::runtime_error("empty clip directory: " + path);
        std::sort(files.begin(), files.end());
        Tensor first = load_ppm(files[0]);
        int h = first.dim(1), w = first.dim(2);
        Tensor clip({static_cast<int>(files.size()), 3, h, w});
        std::int64_t per = first.numel();
        std::memcpy(clip.ptr(), first.ptr(), sizeof(double) * static_cast<std::size_t>(per));
        for (std::size_t i = 1; i < files.size(); ++i) {
            Tensor f = load_ppm(files[i]);
            if (!f.same_shape(first)) throw std::runtime_error("clip frame shape mismatch");
            std::memcpy(clip.ptr() + static_cast<std::size_t>(i) * per, f.ptr(),
                        sizeof(double) * static_cast<std::size_t>(per));
        }
        return clip;
    }
    Tensor t = load_npy(path);
    if (t.ndim() != 4 || t.dim(1) != 3) throw std::runtime_error("clip npy must be (t,3,h,w)");
    return t;
}

void save_clip_frames(const std::string& dir, const Tensor& clip) {
    if (clip.ndim() != 4 || clip.dim(1) != 3)
        throw std::invalid_argument("save_clip_frames: expects (t,3,h,w)");
    fs::create_directories(dir);
    int t = clip.dim(0), h = clip.dim(2), w = clip.dim(3);
    std::int64_t per = static_cast<std::int64_t>(3) * h * w;
    for (int i = 0; i < t; ++i) {
        Tensor frame({3, h, w});
        std::memcpy(frame.ptr(), clip.ptr() + static_cast<std::size_t>(i) * per,
                    sizeof(double) * static_cast<std::size_t>(per));
        char name[32];
        std::snprintf(name, sizeof(name), "frame%05d.ppm", i);
        save_ppm((fs::path(dir) / name).string(), frame);
    }
}

void save_annotation(const std::string& path, const heatmaps::AffordanceAnnotation& ann) {
    json j;
    j["points"] = json::array();
    for (const auto& [x, y] : ann.points) j["points"].push_back({x, y});
    if (ann.action) j["action"] = *ann.action;
    write_text_file(path, j.dump());
}

heatmaps::AffordanceAnnotation load_annotation(const std::string& path) {
    json j = json::parse(read_text_file(path));
    heatmaps::AffordanceAnnotation ann;
    for (const auto& p : j.at("points")) ann.points.emplace_back(p.at(0), p.at(1));
    if (j.contains("action")) ann.action = j.at("action").get<int>();
    return ann;
}

void save_checkpoint(const std::string& path, const ParamStore& store, nlohmann::json meta) {
    json manifest;
    manifest["meta"] = std::move(meta);
    manifest["entries"] = json::array();
    for (const auto& p : store.all())
        manifest["entries"].push_back({{"name", p->name}, {"shape", p->value.shape}});
    std::string mstr = manifest.dump();
    auto out = open_out(path);
    out.write("AFCKPT1\n", 8);
    write_u64(out, mstr.size());
    out.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
    for (const auto& p : store.all())
        out.write(reinterpret_cast<const char*>(p->value.data.data()),
                  static_cast<std::streamsize>(p->value.data.size() * sizeof(double)));
}

Checkpoint load_checkpoint(const std::string& path) {
    auto in = open_in(path);
    char magic[8];
    in.read(magic, 8);
    if (std::memcmp(magic, "AFCKPT1\n", 8) != 0)
        throw std::runtime_error("not a checkpoint: " + path);
    std::uint64_t mlen = read_u64(in);
    std::string mstr(mlen, '\0');
    in.read(mstr.data(), static_cast<std::streamsize>(mlen));
    json manifest = json::parse(mstr);
    Checkpoint ckpt;
    ckpt.meta = manifest.at("meta");
    for (const auto& e : manifest.at("entries")) {
        Tensor t(e.at("shape").get<std::vector<int>>());
        in.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        if (!in) throw std::runtime_error("truncated checkpoint: " + path);
        ckpt.params.emplace_back(e.at("name").get<std::string>(), std::move(t));
    }
    return ckpt;
}

void restore_params(ParamStore& store, const Checkpoint& ckpt, bool allow_missing) {
    std::unordered_map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : ckpt.params) by_name[name] = &t;
    for (const auto& p : store.all()) {
        auto it = by_name.find(p->name);
        if (it == by_name.end()) {
            if (allow_missing) continue;
            throw std::runtime_error("checkpoint missing parameter: " + p->name);
        }
        if (!it->second->same_shape(p->value))
            throw std::runtime_error("checkpoint shape mismatch for " + p->name);
        p->value = *it->second;
    }
}

std::string read_text_file(const std::string& path) {
    auto in = open_in(path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
    auto out = open_out(path);
    out << content;
}

}  // namespace affground::io
