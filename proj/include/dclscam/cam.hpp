// cam.hpp: Grad-CAM and Threshold-Grad-CAM against a model's tap layer.
//
// Grad-CAM: forward, differentiate the class score w.r.t. the tap feature
// maps, pool the gradients spatially into channel weights, rectify the
// weighted sum, resize to input size, min-max normalize.
//
// Threshold-Grad-CAM rectifies each weighted channel map *before* summation
// (so negative channels cannot cancel positive ones), normalizes by the
// maximum, and zeroes everything below the threshold (default 0.3) at feature
// resolution before resizing.

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "dclscam/image.hpp"
#include "dclscam/zoo.hpp"

namespace dclscam {

struct Heatmap {
    int height = 0;
    int width = 0;
    std::vector<float> values;   // height*width, in [0,1] once normalized
    bool degenerate = false;     // all-zero map carrying no rank information

    static Heatmap zero(int h, int w, bool degenerate_flag) {
        return {h, w, std::vector<float>(static_cast<std::size_t>(h) * w, 0.0f), degenerate_flag};
    }
    float at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

struct CamOptions {
    // Differentiate the post-softmax probability instead of the raw logit.
    bool softmax_target = false;
};

constexpr float kDefaultCamThreshold = 0.3f;

Heatmap gradcam(const Model& model, const Tensor& image, int class_index,
                const CamOptions& options = {});

Heatmap threshold_gradcam(const Model& model, const Tensor& image, int class_index,
                          float threshold = kDefaultCamThreshold, const CamOptions& options = {});

// ---- feature-resolution building blocks (exposed for direct verification) ----

// Spatial mean of each channel's gradient plane: the alpha weights.
std::vector<float> pool_gradients(std::span<const float> grads, int channels, int h, int w);

// relu(sum_k alpha[k] * maps[k]) at feature resolution.
std::vector<float> weighted_combination_relu(std::span<const float> maps, int channels, int h,
                                             int w, std::span<const float> alpha);

struct ThresholdMapResult {
    std::vector<float> values;  // h*w
    bool degenerate = false;    // max of the rectified sum was zero
};

// sum_k relu(alpha[k] * maps[k]), divided by its max, thresholded at t
// (boundary kept: value survives when v >= t).
ThresholdMapResult threshold_combination(std::span<const float> maps, int channels, int h, int w,
                                         std::span<const float> alpha, float t);

// In-place min-max normalization to [0,1]; returns false when the plane is
// constant (the caller then degenerates to the all-zero map).
bool minmax_normalize(std::vector<float>& values);

Heatmap resize_heatmap(const Heatmap& hm, int out_h, int out_w);

// Separable Gaussian blur with replicated edges; sigma <= 0 is a no-op.
void gaussian_blur(std::vector<float>& plane, int h, int w, float sigma);

// ---- overlay -----------------------------------------------------------------

// Per-pixel blend (1-alpha)*image + alpha*colormap(heatmap). alpha=0 returns
// the image bytes unchanged; alpha=1 paints the pure colormap.
ImageU8 overlay(const ImageU8& image, const Heatmap& heatmap, float alpha);

// Fixed 256-entry blue->cyan->yellow->red table; entry i is the classic jet
// ramp evaluated at x = i/255: r = clip(1.5 - |4x-3|), g = clip(1.5 - |4x-2|),
// b = clip(1.5 - |4x-1|), each rounded to a byte.
const std::array<std::array<std::uint8_t, 3>, 256>& heat_colormap();

}  // namespace dclscam
