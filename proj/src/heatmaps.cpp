#include "affground/heatmaps.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace affground::heatmaps {

Heatmap::Heatmap(Tensor v, HeatmapKind k) : values(std::move(v)), kind(k) {
    if (values.ndim() != 2) throw std::invalid_argument("heatmap must be 2-D");
}

double Heatmap::sum() const {
    double s = 0.0;
    for (double v : values.data) s += v;
    return s;
}

void Heatmap::validate() const {
    if (values.ndim() != 2) throw std::invalid_argument("heatmap must be 2-D");
    for (double v : values.data)
        if (!std::isfinite(v)) throw std::invalid_argument("heatmap has non-finite values");
    if (kind == HeatmapKind::sum_normalized) {
        for (double v : values.data)
            if (v < 0.0) throw std::invalid_argument("sum-normalized heatmap has negative values");
        if (std::abs(sum() - 1.0) > 1e-6)
            throw std::invalid_argument("sum-normalized heatmap does not sum to 1");
    }
}

void GaussianTargetSpec::validate() const {
    if (kernel_size < 1 || kernel_size % 2 == 0)
        throw std::invalid_argument("kernel_size must be odd and positive");
    if (!(sigma > 0.0)) throw std::invalid_argument("sigma must be positive");
}

int default_kernel_size(int h, int w) {
    int k = static_cast<int>(std::floor(std::sqrt(static_cast<double>(h) * w) / 3.0));
    if (k % 2 == 0) --k;
    return k < 1 ? 1 : k;
}

double default_sigma(int kernel_size) {
    return 0.3 * ((kernel_size - 1) / 2.0 - 1.0) + 0.8;
}

GaussianTargetSpec default_target_spec(int h, int w) {
    int k = default_kernel_size(h, w);
    return {k, default_sigma(k)};
}

int round_half_down(double x) { return static_cast<int>(std::ceil(x - 0.5)); }

namespace {

// mirror about edge pixel centers ("abc|cb"), repeated until in range
int reflect_index(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
    }
    return i;
}

std::vector<double> gaussian_kernel_1d(const GaussianTargetSpec& spec) {
    spec.validate();
    int k = spec.kernel_size;
    int c = (k - 1) / 2;
    std::vector<double> w(static_cast<std::size_t>(k));
    double denom = 2.0 * spec.sigma * spec.sigma;
    double total = 0.0;
    for (int i = 0; i < k; ++i) {
        double d = i - c;
        w[static_cast<std::size_t>(i)] = std::exp(-d * d / denom);
        total += w[static_cast<std::size_t>(i)];
    }
    for (double& v : w) v /= total;
    return w;
}

// scatter pass along one axis: every source cell distributes kernel mass,
// reflecting overflow back into the frame
void scatter_axis(const Tensor& in, Tensor& out, const std::vector<double>& kernel, bool along_x) {
    int h = in.dim(0), w = in.dim(1);
    int k = static_cast<int>(kernel.size());
    int c = (k - 1) / 2;
    std::fill(out.data.begin(), out.data.end(), 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double v = in.data[static_cast<std::size_t>(y) * w + x];
            if (v == 0.0) continue;
            for (int t = 0; t < k; ++t) {
                double m = v * kernel[static_cast<std::size_t>(t)];
                if (along_x) {
                    int tx = reflect_index(x + t - c, w);
                    out.data[static_cast<std::size_t>(y) * w + tx] += m;
                } else {
                    int ty = reflect_index(y + t - c, h);
                    out.data[static_cast<std::size_t>(ty) * w + x] += m;
                }
            }
        }
}

Heatmap normalized(Tensor values) {
    double s = 0.0;
    for (double v : values.data) s += v;
    if (!(s > 0.0)) throw std::invalid_argument("degenerate heatmap");
    for (double& v : values.data) v /= s;
    return Heatmap(std::move(values), HeatmapKind::sum_normalized);
}

}  // namespace

Tensor gaussian_blur(const Tensor& m, const GaussianTargetSpec& spec) {
    if (m.ndim() != 2) throw std::invalid_argument("gaussian_blur: expects (h,w)");
    auto kernel = gaussian_kernel_1d(spec);
    Tensor tmp(m.shape), out(m.shape);
    scatter_axis(m, tmp, kernel, /*along_x=*/true);
    scatter_axis(tmp, out, kernel, /*along_x=*/false);
    return out;
}

Heatmap points_to_target(const AffordanceAnnotation& annotation, int h, int w,
                         const GaussianTargetSpec& spec) {
    if (annotation.points.empty()) throw std::invalid_argument("no annotation points");
    Tensor impulses({h, w});
    for (const auto& [x, y] : annotation.points) {
        if (x < 0.0 || x >= w || y < 0.0 || y >= h)
            throw std::invalid_argument("annotation point out of frame: (" + std::to_string(x) +
                                        "," + std::to_string(y) + ")");
        int px = std::min(w - 1, std::max(0, round_half_down(x)));
        int py = std::min(h - 1, std::max(0, round_half_down(y)));
        impulses.data[static_cast<std::size_t>(py) * w + px] += 1.0;
    }
    return normalized(gaussian_blur(impulses, spec));
}

Heatmap sum_normalize(const Heatmap& m) {
    for (double v : m.values.data) {
        if (!std::isfinite(v)) throw std::invalid_argument("sum_normalize: non-finite values");
        if (v < 0.0) throw std::invalid_argument("sum_normalize: negative values");
    }
    return normalized(m.values);
}

Heatmap softmax_normalize(const Heatmap& m) {
    double mx = -1e300;
    for (double v : m.values.data) {
        if (!std::isfinite(v)) throw std::invalid_argument("softmax_normalize: non-finite logits");
        if (v > mx) mx = v;
    }
    Tensor out = m.values;
    double denom = 0.0;
    for (double& v : out.data) {
        v = std::exp(v - mx);
        denom += v;
    }
    for (double& v : out.data) v /= denom;
    return Heatmap(std::move(out), HeatmapKind::sum_normalized);
}

Heatmap box_to_mask_heatmap(const Box& box, int h, int w, const GaussianTargetSpec& spec) {
    if (!(box.x1 > box.x0) || !(box.y1 > box.y0))
        throw std::invalid_argument("box has non-positive area");
    int x0 = std::max(0, round_half_down(box.x0));
    int y0 = std::max(0, round_half_down(box.y0));
    int x1 = std::min(w, round_half_down(box.x1));
    int y1 = std::min(h, round_half_down(box.y1));
    if (x1 <= x0 || y1 <= y0) throw std::invalid_argument("zero-area box after clipping");
    Tensor mask({h, w});
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) mask.data[static_cast<std::size_t>(y) * w + x] = 1.0;
    return normalized(gaussian_blur(mask, spec));
}

}  // namespace affground::heatmaps
