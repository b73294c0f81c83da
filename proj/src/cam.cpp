#include "dclscam/cam.hpp"

#include <algorithm>
#include <cmath>

namespace dclscam {

namespace {

struct TapReadout {
    std::vector<float> maps;   // [channels, h, w] activations
    std::vector<float> alpha;  // [channels]
    int channels, h, w;
    int in_h, in_w;
};

// Steps shared by both methods: forward pass, class-score backward, gradient
// pooling over the tap layer.
TapReadout run_tap(const Model& model, const Tensor& image, int class_index,
                   const CamOptions& options) {
    if (image.rank() != 4 || image.dim(0) != 1)
        throw std::invalid_argument("cam: image must be [1,C,H,W], got " + shape_str(image.shape()));
    if (class_index < 0 || class_index >= model.classes())
        throw std::invalid_argument("cam: class " + std::to_string(class_index) +
                                    " out of range [0," + std::to_string(model.classes()) + ")");
    const Model::Trace trace = model.forward_traced(image);
    if (trace.tap.dim(0) != 1)
        throw std::invalid_argument("cam: tap layer must see a single image");
    const Tensor target = options.softmax_target
                              ? pick(softmax(trace.logits), class_index)
                              : pick(trace.logits, class_index);
    model.zero_grad();
    target.backward();

    TapReadout r;
    r.channels = trace.tap.dim(1);
    r.h = trace.tap.dim(2);
    r.w = trace.tap.dim(3);
    r.in_h = image.dim(2);
    r.in_w = image.dim(3);
    r.maps.assign(trace.tap.data().begin(), trace.tap.data().end());
    r.alpha = pool_gradients(trace.tap.grad(), r.channels, r.h, r.w);
    return r;
}

Heatmap resize_to_input(std::vector<float> feature_map, int h, int w, int in_h, int in_w,
                        bool degenerate_flag) {
    Heatmap out;
    out.height = in_h;
    out.width = in_w;
    out.degenerate = degenerate_flag;
    out.values.resize(static_cast<std::size_t>(in_h) * in_w);
    bilinear_resize_plane(feature_map, h, w, out.values, in_h, in_w);
    return out;
}

}  // namespace

std::vector<float> pool_gradients(std::span<const float> grads, int channels, int h, int w) {
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    std::vector<float> alpha(static_cast<std::size_t>(channels));
    for (int k = 0; k < channels; ++k) {
        double acc = 0.0;
        const float* g = grads.data() + k * plane;
        for (std::int64_t i = 0; i < plane; ++i) acc += g[i];
        alpha[static_cast<std::size_t>(k)] = static_cast<float>(acc / static_cast<double>(plane));
    }
    return alpha;
}

std::vector<float> weighted_combination_relu(std::span<const float> maps, int channels, int h,
                                             int w, std::span<const float> alpha) {
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    std::vector<float> out(static_cast<std::size_t>(plane));
    for (std::int64_t i = 0; i < plane; ++i) {
        double acc = 0.0;
        for (int k = 0; k < channels; ++k)
            acc += static_cast<double>(alpha[static_cast<std::size_t>(k)]) * maps[k * plane + i];
        out[static_cast<std::size_t>(i)] = acc > 0.0 ? static_cast<float>(acc) : 0.0f;
    }
    return out;
}

ThresholdMapResult threshold_combination(std::span<const float> maps, int channels, int h, int w,
                                         std::span<const float> alpha, float t) {
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    ThresholdMapResult r;
    r.values.assign(static_cast<std::size_t>(plane), 0.0f);
    for (std::int64_t i = 0; i < plane; ++i) {
        double acc = 0.0;
        for (int k = 0; k < channels; ++k) {
            const double v = static_cast<double>(alpha[static_cast<std::size_t>(k)]) * maps[k * plane + i];
            if (v > 0.0) acc += v;
        }
        r.values[static_cast<std::size_t>(i)] = static_cast<float>(acc);
    }
    const float peak = *std::max_element(r.values.begin(), r.values.end());
    if (peak <= 0.0f) {
        std::fill(r.values.begin(), r.values.end(), 0.0f);
        r.degenerate = true;
        return r;
    }
    for (float& v : r.values) {
        v /= peak;
        if (!(v >= t)) v = 0.0f;
    }
    return r;
}

bool minmax_normalize(std::vector<float>& values) {
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const float lo = *lo_it, hi = *hi_it;
    if (hi <= lo) {
        std::fill(values.begin(), values.end(), 0.0f);
        return false;
    }
    const float inv = 1.0f / (hi - lo);
    for (float& v : values) v = (v - lo) * inv;
    return true;
}

Heatmap gradcam(const Model& model, const Tensor& image, int class_index,
                const CamOptions& options) {
    const TapReadout r = run_tap(model, image, class_index, options);
    std::vector<float> combined = weighted_combination_relu(r.maps, r.channels, r.h, r.w, r.alpha);
    const bool all_zero =
        std::all_of(combined.begin(), combined.end(), [](float v) { return v == 0.0f; });
    if (all_zero) return Heatmap::zero(r.in_h, r.in_w, true);
    Heatmap out = resize_to_input(std::move(combined), r.h, r.w, r.in_h, r.in_w, false);
    if (!minmax_normalize(out.values)) out.degenerate = true;
    return out;
}

Heatmap threshold_gradcam(const Model& model, const Tensor& image, int class_index,
                          float threshold, const CamOptions& options) {
    if (!(threshold >= 0.0f && threshold <= 1.0f))
        throw std::invalid_argument("threshold_gradcam: t must be in [0,1], got " +
                                    std::to_string(threshold));
    const TapReadout r = run_tap(model, image, class_index, options);
    ThresholdMapResult tm = threshold_combination(r.maps, r.channels, r.h, r.w, r.alpha, threshold);
    if (tm.degenerate) return Heatmap::zero(r.in_h, r.in_w, true);
    return resize_to_input(std::move(tm.values), r.h, r.w, r.in_h, r.in_w, false);
}

Heatmap resize_heatmap(const Heatmap& hm, int out_h, int out_w) {
    Heatmap out;
    out.height = out_h;
    out.width = out_w;
    out.degenerate = hm.degenerate;
    out.values.resize(static_cast<std::size_t>(out_h) * out_w);
    bilinear_resize_plane(hm.values, hm.height, hm.width, out.values, out_h, out_w);
    return out;
}

void gaussian_blur(std::vector<float>& plane, int h, int w, float sigma) {
    if (sigma <= 0.0f) return;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0f * sigma)));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double v = std::exp(-(static_cast<double>(i) * i) / (2.0 * sigma * sigma));
        kernel[static_cast<std::size_t>(i + radius)] = v;
        total += v;
    }
    for (auto& v : kernel) v /= total;

    std::vector<float> tmp(plane.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                const int xx = std::clamp(x + i, 0, w - 1);
                acc += kernel[static_cast<std::size_t>(i + radius)] *
                       plane[static_cast<std::size_t>(y) * w + xx];
            }
            tmp[static_cast<std::size_t>(y) * w + x] = static_cast<float>(acc);
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                const int yy = std::clamp(y + i, 0, h - 1);
                acc += kernel[static_cast<std::size_t>(i + radius)] *
                       tmp[static_cast<std::size_t>(yy) * w + x];
            }
            plane[static_cast<std::size_t>(y) * w + x] = static_cast<float>(acc);
        }
}

const std::array<std::array<std::uint8_t, 3>, 256>& heat_colormap() {
    static const auto table = [] {
        std::array<std::array<std::uint8_t, 3>, 256> t{};
        auto ramp = [](double v) {
            const double c = std::clamp(v, 0.0, 1.0);
            return static_cast<std::uint8_t>(std::lround(c * 255.0));
        };
        for (int i = 0; i < 256; ++i) {
            const double x = static_cast<double>(i) / 255.0;
            t[static_cast<std::size_t>(i)] = {ramp(1.5 - std::fabs(4.0 * x - 3.0)),
                                              ramp(1.5 - std::fabs(4.0 * x - 2.0)),
                                              ramp(1.5 - std::fabs(4.0 * x - 1.0))};
        }
        return t;
    }();
    return table;
}

ImageU8 overlay(const ImageU8& image, const Heatmap& heatmap, float alpha) {
    if (!image.valid()) throw std::invalid_argument("overlay: malformed image");
    if (heatmap.height != image.height || heatmap.width != image.width)
        throw std::invalid_argument("overlay: heatmap " + std::to_string(heatmap.height) + "x" +
                                    std::to_string(heatmap.width) + " does not match image " +
                                    std::to_string(image.height) + "x" +
                                    std::to_string(image.width));
    if (!(alpha >= 0.0f && alpha <= 1.0f))
        throw std::invalid_argument("overlay: alpha must be in [0,1]");
    const auto& cmap = heat_colormap();
    ImageU8 out;
    out.height = image.height;
    out.width = image.width;
    out.rgb.resize(image.rgb.size());
    const std::size_t pixels = static_cast<std::size_t>(image.height) * image.width;
    for (std::size_t p = 0; p < pixels; ++p) {
        const float hv = std::clamp(heatmap.values[p], 0.0f, 1.0f);
        const auto& color = cmap[static_cast<std::size_t>(std::lround(hv * 255.0f))];
        for (int c = 0; c < 3; ++c) {
            const float blended = (1.0f - alpha) * static_cast<float>(image.rgb[p * 3 + c]) +
                                  alpha * static_cast<float>(color[static_cast<std::size_t>(c)]);
            out.rgb[p * 3 + c] = static_cast<std::uint8_t>(std::lround(blended));
        }
    }
    return out;
}

}  // namespace dclscam
