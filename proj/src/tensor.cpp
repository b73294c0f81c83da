#include "dclscam/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <unordered_set>

namespace dclscam {

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

namespace {

using detail::TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

void validate_shape(const Shape& shape, const char* who) {
    for (int d : shape) {
        if (d <= 0)
            throw std::invalid_argument(std::string(who) + ": non-positive extent in shape " +
                                        shape_str(shape));
    }
}

NodePtr make_leaf(Shape shape, std::vector<float> data, bool requires_grad) {
    validate_shape(shape, "tensor");
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
        throw std::invalid_argument("tensor: data length " + std::to_string(data.size()) +
                                    " does not match shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return n;
}

// Every op output passes through here: rejects NaN/Inf and flushes subnormal
// magnitudes to zero (squared activations can otherwise drag whole layers into
// the denormal range, where x86 arithmetic is pathologically slow).
void check_finite(TensorNode& n) {
    for (float& v : n.data) {
        if (!std::isfinite(v))
            throw NonFiniteError(std::string("non-finite value in output of ") + n.op);
        if (v != 0.0f && std::fabs(v) < std::numeric_limits<float>::min()) v = 0.0f;
    }
}

}  // namespace

namespace detail {

std::shared_ptr<TensorNode> make_op_node(const char* op, Shape shape, std::vector<float> data,
                                         std::vector<NodePtr> parents,
                                         std::function<void(TensorNode&)> backward) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->op = op;
    for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward);
    }
    check_finite(*n);
    return n;
}

}  // namespace detail

using detail::make_op_node;

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = shape_numel(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<float>(static_cast<std::size_t>(n), 0.0f),
                            requires_grad));
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    auto n = shape_numel(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<float>(static_cast<std::size_t>(n), value),
                            requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data, bool requires_grad) {
    return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::param(Shape shape, std::vector<float> data) {
    return from_data(std::move(shape), std::move(data), true);
}

std::span<const float> Tensor::grad() const {
    if (node_->grad.empty())
        throw std::logic_error("tensor: gradient requested but none was computed");
    return {node_->grad.data(), node_->grad.size()};
}

float Tensor::item() const {
    if (numel() != 1)
        throw std::logic_error("tensor: item() on non-scalar shape " + shape_str(shape()));
    return node_->data[0];
}

double Tensor::item_f64() const {
    if (node_->has_scalar_f64) return node_->scalar_f64;
    return static_cast<double>(item());
}

void Tensor::zero_grad() const {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

void Tensor::backward() const {
    TensorNode* root = node_.get();
    if (root->numel() != 1)
        throw std::logic_error("backward: root must be a scalar, got shape " + shape_str(root->shape));
    if (!root->backward_fn)
        throw std::logic_error("backward: no recorded tape reaches this value");
    if (root->backward_run)
        throw std::logic_error("backward: tape already consumed; run a fresh forward pass");
    root->backward_run = true;

    // Iterative post-order DFS over parents.
    std::vector<TensorNode*> topo;
    std::unordered_set<TensorNode*> seen;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorNode* p = node->parents[next++].get();
            if (seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }
    // topo is already children-before-parents from the root's perspective;
    // we need root first, so walk it reversed.
    root->ensure_grad();
    root->grad[0] = 1.0f;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward_fn && n->requires_grad && !n->grad.empty()) n->backward_fn(*n);
    }
}

// ---- convolution -----------------------------------------------------------

namespace {

struct ConvDims {
    int n, c, h, w;        // input
    int oc, icg, kh, kw;   // kernel
    int oh, ow;            // output
};

ConvDims conv_check(const TensorNode& x, const TensorNode& k, int stride, int padding, int groups,
                    int dilation) {
    auto fail = [&](const std::string& why) {
        throw std::invalid_argument("conv2d: input " + shape_str(x.shape) + " vs kernel " +
                                    shape_str(k.shape) + " (stride=" + std::to_string(stride) +
                                    ", padding=" + std::to_string(padding) +
                                    ", groups=" + std::to_string(groups) +
                                    ", dilation=" + std::to_string(dilation) + "): " + why);
    };
    if (x.shape.size() != 4) fail("input must be NCHW");
    if (k.shape.size() != 4) fail("kernel must be [out, in/groups, kh, kw]");
    if (stride < 1 || padding < 0 || groups < 1 || dilation < 1) fail("bad hyperparameters");
    ConvDims d{};
    d.n = x.shape[0]; d.c = x.shape[1]; d.h = x.shape[2]; d.w = x.shape[3];
    d.oc = k.shape[0]; d.icg = k.shape[1]; d.kh = k.shape[2]; d.kw = k.shape[3];
    if (d.c % groups != 0 || d.oc % groups != 0) fail("channels not divisible by groups");
    if (d.icg != d.c / groups) fail("kernel input-channel extent must equal channels/groups");
    const int ekh = (d.kh - 1) * dilation + 1;
    const int ekw = (d.kw - 1) * dilation + 1;
    if (d.h + 2 * padding < ekh || d.w + 2 * padding < ekw)
        fail("spatial extent smaller than (dilated) kernel");
    d.oh = (d.h + 2 * padding - ekh) / stride + 1;
    d.ow = (d.w + 2 * padding - ekw) / stride + 1;
    return d;
}

// Valid output range [lo, hi) for which in = out*stride - padding + tap*dilation
// lands inside [0, extent).
inline void tap_range(int out_extent, int in_extent, int stride, int padding, int tap, int dilation,
                      int& lo, int& hi) {
    const int off = tap * dilation - padding;
    lo = off < 0 ? (-off + stride - 1) / stride : 0;
    hi = std::min(out_extent, off < in_extent ? (in_extent - 1 - off) / stride + 1 : 0);
}

// Four-lane dot product: fixed reassociation that the compiler can keep in
// SIMD registers. Deterministic for a given build.
inline float dot4(const float* a, const float* b, std::int64_t n) {
    float s0 = 0.0f, s1 = 0.0f, s2 = 0.0f, s3 = 0.0f;
    std::int64_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    float tail = 0.0f;
    for (; i < n; ++i) tail += a[i] * b[i];
    return ((s0 + s1) + (s2 + s3)) + tail;
}

// Zero-padded copy of one input plane; lets the depthwise loops run
// full-width rows with no per-row bounds handling.
void pad_plane(const float* src, int h, int w, int padding, float* dst, int pw) {
    std::fill(dst, dst + static_cast<std::int64_t>(h + 2 * padding) * pw, 0.0f);
    for (int r = 0; r < h; ++r)
        std::copy_n(src + static_cast<std::int64_t>(r) * w, w,
                    dst + static_cast<std::int64_t>(r + padding) * pw + padding);
}

void conv_forward(const ConvDims& d, int stride, int padding, int groups, int dilation,
                  const float* x, const float* k, float* y) {
    const int ocg = d.oc / groups;
    const std::int64_t xplane = static_cast<std::int64_t>(d.h) * d.w;
    const std::int64_t yplane = static_cast<std::int64_t>(d.oh) * d.ow;

    // Pointwise: one fused multiply-add over the whole plane per (oc, ic).
    if (d.kh == 1 && d.kw == 1 && stride == 1 && padding == 0 && dilation == 1) {
        for (int n = 0; n < d.n; ++n)
            for (int g = 0; g < groups; ++g)
                for (int oc = g * ocg; oc < (g + 1) * ocg; ++oc) {
                    float* yp = y + (static_cast<std::int64_t>(n) * d.oc + oc) * yplane;
                    for (int ic = 0; ic < d.icg; ++ic) {
                        const float wv = k[static_cast<std::int64_t>(oc) * d.icg + ic];
                        if (wv == 0.0f) continue;
                        const float* xp =
                            x + (static_cast<std::int64_t>(n) * d.c + g * d.icg + ic) * xplane;
                        for (std::int64_t i = 0; i < xplane; ++i) yp[i] += wv * xp[i];
                    }
                }
        return;
    }

    // Depthwise stride-1: full-width rows over a padded scratch plane.
    if (d.icg == 1 && ocg == 1 && stride == 1) {
        const int pw = d.w + 2 * padding;
        const int ph = d.h + 2 * padding;
        std::vector<float> scratch(static_cast<std::size_t>(ph) * pw);
        for (int n = 0; n < d.n; ++n)
            for (int c = 0; c < d.c; ++c) {
                pad_plane(x + (static_cast<std::int64_t>(n) * d.c + c) * xplane, d.h, d.w, padding,
                          scratch.data(), pw);
                float* yp = y + (static_cast<std::int64_t>(n) * d.oc + c) * yplane;
                const float* kp = k + static_cast<std::int64_t>(c) * d.kh * d.kw;
                for (int kh = 0; kh < d.kh; ++kh)
                    for (int kw = 0; kw < d.kw; ++kw) {
                        const float wv = kp[kh * d.kw + kw];
                        if (wv == 0.0f) continue;
                        const float* base = scratch.data() +
                                            static_cast<std::int64_t>(kh) * dilation * pw +
                                            static_cast<std::int64_t>(kw) * dilation;
                        for (int oh = 0; oh < d.oh; ++oh) {
                            const float* xr = base + static_cast<std::int64_t>(oh) * pw;
                            float* yr = yp + static_cast<std::int64_t>(oh) * d.ow;
                            for (int ow = 0; ow < d.ow; ++ow) yr[ow] += wv * xr[ow];
                        }
                    }
            }
        return;
    }

    for (int n = 0; n < d.n; ++n) {
        for (int g = 0; g < groups; ++g) {
            for (int oc = g * ocg; oc < (g + 1) * ocg; ++oc) {
                float* yp = y + (static_cast<std::int64_t>(n) * d.oc + oc) * yplane;
                for (int ic = 0; ic < d.icg; ++ic) {
                    const float* xp = x + (static_cast<std::int64_t>(n) * d.c + g * d.icg + ic) * xplane;
                    const float* kp = k + ((static_cast<std::int64_t>(oc) * d.icg + ic) * d.kh) * d.kw;
                    for (int kh = 0; kh < d.kh; ++kh) {
                        int lo_h, hi_h;
                        tap_range(d.oh, d.h, stride, padding, kh, dilation, lo_h, hi_h);
                        for (int kw = 0; kw < d.kw; ++kw) {
                            const float wv = kp[kh * d.kw + kw];
                            if (wv == 0.0f) continue;
                            int lo_w, hi_w;
                            tap_range(d.ow, d.w, stride, padding, kw, dilation, lo_w, hi_w);
                            const int hoff = kh * dilation - padding;
                            const int woff = kw * dilation - padding;
                            for (int oh = lo_h; oh < hi_h; ++oh) {
                                const float* xr = xp + (oh * stride + hoff) * d.w + woff;
                                float* yr = yp + oh * d.ow;
                                if (stride == 1) {
                                    for (int ow = lo_w; ow < hi_w; ++ow) yr[ow] += wv * xr[ow];
                                } else {
                                    for (int ow = lo_w; ow < hi_w; ++ow)
                                        yr[ow] += wv * xr[ow * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

void conv_backward(const ConvDims& d, int stride, int padding, int groups, int dilation,
                   const float* x, const float* k, const float* gy, float* gx, float* gk) {
    const int ocg = d.oc / groups;
    const std::int64_t xplane = static_cast<std::int64_t>(d.h) * d.w;
    const std::int64_t yplane = static_cast<std::int64_t>(d.oh) * d.ow;

    if (d.kh == 1 && d.kw == 1 && stride == 1 && padding == 0 && dilation == 1) {
        for (int n = 0; n < d.n; ++n)
            for (int g = 0; g < groups; ++g)
                for (int oc = g * ocg; oc < (g + 1) * ocg; ++oc) {
                    const float* gyp = gy + (static_cast<std::int64_t>(n) * d.oc + oc) * yplane;
                    for (int ic = 0; ic < d.icg; ++ic) {
                        const std::int64_t xi =
                            (static_cast<std::int64_t>(n) * d.c + g * d.icg + ic) * xplane;
                        const std::int64_t ki = static_cast<std::int64_t>(oc) * d.icg + ic;
                        if (gk) gk[ki] += dot4(gyp, x + xi, xplane);
                        if (gx) {
                            const float wv = k[ki];
                            if (wv == 0.0f) continue;
                            float* gxp = gx + xi;
                            for (std::int64_t i = 0; i < xplane; ++i) gxp[i] += wv * gyp[i];
                        }
                    }
                }
        return;
    }

    if (d.icg == 1 && ocg == 1 && stride == 1) {
        const int pw = d.w + 2 * padding;
        const int ph = d.h + 2 * padding;
        std::vector<float> xpad(static_cast<std::size_t>(ph) * pw);
        std::vector<float> gxpad;
        if (gx) gxpad.resize(static_cast<std::size_t>(ph) * pw);
        for (int n = 0; n < d.n; ++n)
            for (int c = 0; c < d.c; ++c) {
                const std::int64_t xi = (static_cast<std::int64_t>(n) * d.c + c) * xplane;
                pad_plane(x + xi, d.h, d.w, padding, xpad.data(), pw);
                if (gx) std::fill(gxpad.begin(), gxpad.end(), 0.0f);
                const float* gyp = gy + (static_cast<std::int64_t>(n) * d.oc + c) * yplane;
                const std::int64_t ki = static_cast<std::int64_t>(c) * d.kh * d.kw;
                for (int kh = 0; kh < d.kh; ++kh)
                    for (int kw = 0; kw < d.kw; ++kw) {
                        const std::int64_t off = static_cast<std::int64_t>(kh) * dilation * pw +
                                                 static_cast<std::int64_t>(kw) * dilation;
                        if (gk) {
                            double acc = 0.0;
                            for (int oh = 0; oh < d.oh; ++oh)
                                acc += dot4(gyp + static_cast<std::int64_t>(oh) * d.ow,
                                            xpad.data() + off + static_cast<std::int64_t>(oh) * pw,
                                            d.ow);
                            gk[ki + kh * d.kw + kw] += static_cast<float>(acc);
                        }
                        if (gx) {
                            const float wv = k[ki + kh * d.kw + kw];
                            if (wv == 0.0f) continue;
                            for (int oh = 0; oh < d.oh; ++oh) {
                                float* gxr = gxpad.data() + off + static_cast<std::int64_t>(oh) * pw;
                                const float* gyr = gyp + static_cast<std::int64_t>(oh) * d.ow;
                                for (int ow = 0; ow < d.ow; ++ow) gxr[ow] += wv * gyr[ow];
                            }
                        }
                    }
                if (gx) {
                    float* gxp = gx + xi;
                    for (int r = 0; r < d.h; ++r) {
                        const float* src = gxpad.data() + static_cast<std::int64_t>(r + padding) * pw +
                                           padding;
                        float* dst = gxp + static_cast<std::int64_t>(r) * d.w;
                        for (int cidx = 0; cidx < d.w; ++cidx) dst[cidx] += src[cidx];
                    }
                }
            }
        return;
    }

    for (int n = 0; n < d.n; ++n) {
        for (int g = 0; g < groups; ++g) {
            for (int oc = g * ocg; oc < (g + 1) * ocg; ++oc) {
                const float* gyp = gy + (static_cast<std::int64_t>(n) * d.oc + oc) * yplane;
                for (int ic = 0; ic < d.icg; ++ic) {
                    const std::int64_t xi = (static_cast<std::int64_t>(n) * d.c + g * d.icg + ic) * xplane;
                    const float* xp = x + xi;
                    const std::int64_t ki = (static_cast<std::int64_t>(oc) * d.icg + ic) *
                                            static_cast<std::int64_t>(d.kh) * d.kw;
                    for (int kh = 0; kh < d.kh; ++kh) {
                        int lo_h, hi_h;
                        tap_range(d.oh, d.h, stride, padding, kh, dilation, lo_h, hi_h);
                        const int hoff = kh * dilation - padding;
                        for (int kw = 0; kw < d.kw; ++kw) {
                            int lo_w, hi_w;
                            tap_range(d.ow, d.w, stride, padding, kw, dilation, lo_w, hi_w);
                            const int woff = kw * dilation - padding;
                            if (gk) {
                                double acc = 0.0;
                                for (int oh = lo_h; oh < hi_h; ++oh) {
                                    const float* xr = xp + (oh * stride + hoff) * d.w + woff;
                                    const float* gyr = gyp + oh * d.ow;
                                    float row = 0.0f;
                                    if (stride == 1) {
                                        for (int ow = lo_w; ow < hi_w; ++ow) row += gyr[ow] * xr[ow];
                                    } else {
                                        for (int ow = lo_w; ow < hi_w; ++ow)
                                            row += gyr[ow] * xr[ow * stride];
                                    }
                                    acc += row;
                                }
                                gk[ki + kh * d.kw + kw] += static_cast<float>(acc);
                            }
                            if (gx) {
                                const float wv = k[ki + kh * d.kw + kw];
                                if (wv == 0.0f) continue;
                                for (int oh = lo_h; oh < hi_h; ++oh) {
                                    float* gxr = gx + xi + (oh * stride + hoff) * d.w + woff;
                                    const float* gyr = gyp + oh * d.ow;
                                    if (stride == 1) {
                                        for (int ow = lo_w; ow < hi_w; ++ow) gxr[ow] += wv * gyr[ow];
                                    } else {
                                        for (int ow = lo_w; ow < hi_w; ++ow)
                                            gxr[ow * stride] += wv * gyr[ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d_dilated(const Tensor& input, const Tensor& kernel, int stride, int padding,
                      int groups, int dilation) {
    TensorNode* xn = input.node();
    TensorNode* kn = kernel.node();
    const ConvDims d = conv_check(*xn, *kn, stride, padding, groups, dilation);
    std::vector<float> out(static_cast<std::size_t>(shape_numel({d.n, d.oc, d.oh, d.ow})), 0.0f);
    conv_forward(d, stride, padding, groups, dilation, xn->data.data(), kn->data.data(), out.data());

    auto backward = [d, stride, padding, groups, dilation](TensorNode& self) {
        TensorNode* x = self.parents[0].get();
        TensorNode* k = self.parents[1].get();
        float* gx = nullptr;
        float* gk = nullptr;
        if (x->requires_grad) { x->ensure_grad(); gx = x->grad.data(); }
        if (k->requires_grad) { k->ensure_grad(); gk = k->grad.data(); }
        conv_backward(d, stride, padding, groups, dilation, x->data.data(), k->data.data(),
                      self.grad.data(), gx, gk);
    };
    return Tensor(make_op_node("conv2d", {d.n, d.oc, d.oh, d.ow}, std::move(out),
                               {input.node_ptr(), kernel.node_ptr()}, std::move(backward)));
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding, int groups) {
    return conv2d_dilated(input, kernel, stride, padding, groups, 1);
}

// ---- elementwise / reductions ----------------------------------------------

Tensor relu(const Tensor& x) {
    const auto& xd = x.node()->data;
    std::vector<float> out(xd.size());
    for (std::size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] > 0.0f ? xd[i] : 0.0f;
    auto backward = [](TensorNode& self) {
        TensorNode* x = self.parents[0].get();
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (x->data[i] > 0.0f) x->grad[i] += self.grad[i];
    };
    return Tensor(make_op_node("relu", x.shape(), std::move(out), {x.node_ptr()}, std::move(backward)));
}

Tensor star_relu(const Tensor& x, const Tensor& scale, const Tensor& bias) {
    if (scale.numel() != 1 || bias.numel() != 1)
        throw std::invalid_argument("star_relu: scale and bias must be scalars");
    const float s = scale.data()[0];
    const float b = bias.data()[0];
    const auto& xd = x.node()->data;
    std::vector<float> out(xd.size());
    for (std::size_t i = 0; i < xd.size(); ++i) {
        const float r = xd[i] > 0.0f ? xd[i] : 0.0f;
        out[i] = s * r * r + b;
    }
    auto backward = [s](TensorNode& self) {
        TensorNode* x = self.parents[0].get();
        TensorNode* sc = self.parents[1].get();
        TensorNode* bi = self.parents[2].get();
        double gs = 0.0, gb = 0.0;
        const bool need_x = x->requires_grad;
        if (need_x) x->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const float g = self.grad[i];
            const float r = x->data[i] > 0.0f ? x->data[i] : 0.0f;
            if (need_x) x->grad[i] += g * 2.0f * s * r;
            gs += static_cast<double>(g) * r * r;
            gb += g;
        }
        if (sc->requires_grad) { sc->ensure_grad(); sc->grad[0] += static_cast<float>(gs); }
        if (bi->requires_grad) { bi->ensure_grad(); bi->grad[0] += static_cast<float>(gb); }
    };
    return Tensor(make_op_node("star_relu", x.shape(), std::move(out),
                               {x.node_ptr(), scale.node_ptr(), bias.node_ptr()}, std::move(backward)));
}

Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 4) throw std::invalid_argument("global_avg_pool: expected NCHW, got " + shape_str(x.shape()));
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    const float inv_z = 1.0f / static_cast<float>(plane);
    const float* xd = x.data().data();
    std::vector<float> out(static_cast<std::size_t>(n) * c);
    for (std::int64_t p = 0; p < static_cast<std::int64_t>(n) * c; ++p) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < plane; ++i) acc += xd[p * plane + i];
        out[static_cast<std::size_t>(p)] = static_cast<float>(acc / static_cast<double>(plane));
    }
    auto backward = [plane, inv_z](TensorNode& self) {
        TensorNode* x = self.parents[0].get();
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (std::size_t p = 0; p < self.grad.size(); ++p) {
            const float g = self.grad[p] * inv_z;
            float* gx = x->grad.data() + static_cast<std::int64_t>(p) * plane;
            for (std::int64_t i = 0; i < plane; ++i) gx[i] += g;
        }
    };
    return Tensor(make_op_node("global_avg_pool", {n, c}, std::move(out), {x.node_ptr()},
                               std::move(backward)));
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (x.rank() != 2 || weight.rank() != 2 || bias.rank() != 1 || x.dim(1) != weight.dim(1) ||
        bias.dim(0) != weight.dim(0))
        throw std::invalid_argument("linear: x " + shape_str(x.shape()) + " weight " +
                                    shape_str(weight.shape()) + " bias " + shape_str(bias.shape()));
    const int n = x.dim(0), f = x.dim(1), o = weight.dim(0);
    const float* xd = x.data().data();
    const float* wd = weight.data().data();
    const float* bd = bias.data().data();
    std::vector<float> out(static_cast<std::size_t>(n) * o);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < o; ++j) {
            double acc = bd[j];
            for (int k = 0; k < f; ++k) acc += static_cast<double>(xd[i * f + k]) * wd[j * f + k];
            out[static_cast<std::size_t>(i) * o + j] = static_cast<float>(acc);
        }
    auto backward = [n, f, o](TensorNode& self) {
        TensorNode* x = self.parents[0].get();
        TensorNode* w = self.parents[1].get();
        TensorNode* b = self.parents[2].get();
        const float* g = self.grad.data();
        if (x->requires_grad) {
            x->ensure_grad();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < o; ++j) {
                    const float gij = g[i * o + j];
                    for (int k = 0; k < f; ++k) x->grad[i * f + k] += gij * w->data[j * f + k];
                }
        }
        if (w->requires_grad) {
            w->ensure_grad();
            for (int j = 0; j < o; ++j)
                for (int k = 0; k < f; ++k) {
                    double acc = 0.0;
                    for (int i = 0; i < n; ++i)
                        acc += static_cast<double>(g[i * o + j]) * x->data[i * f + k];
                    w->grad[j * f + k] += static_cast<float>(acc);
                }
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int j = 0; j < o; ++j) {
                double acc = 0.0;
                for (int i = 0; i < n; ++i) acc += g[i * o + j];
                b->grad[j] += static_cast<float>(acc);
            }
        }
    };
    return Tensor(make_op_node("linear", {n, o}, std::move(out),
                               {x.node_ptr(), weight.node_ptr(), bias.node_ptr()}, std::move(backward)));
}

Tensor bias_add(const Tensor& x, const Tensor& bias) {
    if (x.rank() != 4 || bias.rank() != 1 || bias.dim(0) != x.dim(1))
        throw std::invalid_argument("bias_add: x " + shape_str(x.shape()) + " bias " +
                                    shape_str(bias.shape()));
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    const float* xd = x.data().data();
    const float* bd = bias.data().data();
    std::vector<float> out(x.node()->data.size());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) {
            const float b = bd[j];
            const std::int64_t base = (static_cast<std::int64_t>(i) * c + j) * plane;
            for (std::int64_t p = 0; p < plane; ++p) out[base + p] = xd[base + p] + b;
        }
    auto backward = [n, c, plane](TensorNode& self) {
        TensorNode* x = self.parents[0].get();
        TensorNode* b = self.parents[1].get();
        if (x->requires_grad) {
            x->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) x->grad[i] += self.grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int j = 0; j < c; ++j) {
                double acc = 0.0;
                for (int i = 0; i < n; ++i) {
                    const float* g = self.grad.data() + (static_cast<std::int64_t>(i) * c + j) * plane;
                    for (std::int64_t p = 0; p < plane; ++p) acc += g[p];
                }
                b->grad[j] += static_cast<float>(acc);
            }
        }
    };
    return Tensor(make_op_node("bias_add", x.shape(), std::move(out),
                               {x.node_ptr(), bias.node_ptr()}, std::move(backward)));
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2)
        throw std::invalid_argument("softmax_cross_entropy: logits must be [N,K], got " +
                                    shape_str(logits.shape()));
    const int n = logits.dim(0), k = logits.dim(1);
    if (static_cast<int>(labels.size()) != n)
        throw std::invalid_argument("softmax_cross_entropy: " + std::to_string(labels.size()) +
                                    " labels for batch of " + std::to_string(n));
    for (int i = 0; i < n; ++i)
        if (labels[i] < 0 || labels[i] >= k)
            throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(labels[i]) +
                                        " at index " + std::to_string(i) + " out of range [0," +
                                        std::to_string(k) + ")");
    const float* xd = logits.data().data();
    std::vector<float> probs(static_cast<std::size_t>(n) * k);
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const float* row = xd + static_cast<std::size_t>(i) * k;
        float m = row[0];
        for (int j = 1; j < k; ++j) m = std::max(m, row[j]);
        double z = 0.0;
        for (int j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j] - m));
        for (int j = 0; j < k; ++j)
            probs[static_cast<std::size_t>(i) * k + j] =
                static_cast<float>(std::exp(static_cast<double>(row[j] - m)) / z);
        loss -= static_cast<double>(row[labels[i]] - m) - std::log(z);
    }
    loss /= n;
    auto backward = [n, k, labels, probs](TensorNode& self) {
        TensorNode* x = self.parents[0].get();
        if (!x->requires_grad) return;
        x->ensure_grad();
        const float g = self.grad[0] / static_cast<float>(n);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < k; ++j) {
                const float p = probs[static_cast<std::size_t>(i) * k + j];
                x->grad[static_cast<std::size_t>(i) * k + j] +=
                    g * (p - (j == labels[i] ? 1.0f : 0.0f));
            }
    };
    auto node = make_op_node("softmax_cross_entropy", {1}, {static_cast<float>(loss)},
                             {logits.node_ptr()}, std::move(backward));
    node->has_scalar_f64 = true;
    node->scalar_f64 = loss;
    return Tensor(std::move(node));
}

Tensor softmax(const Tensor& logits) {
    if (logits.rank() != 2)
        throw std::invalid_argument("softmax: expected [N,K], got " + shape_str(logits.shape()));
    const int n = logits.dim(0), k = logits.dim(1);
    const float* xd = logits.data().data();
    std::vector<float> out(static_cast<std::size_t>(n) * k);
    for (int i = 0; i < n; ++i) {
        const float* row = xd + static_cast<std::size_t>(i) * k;
        float m = row[0];
        for (int j = 1; j < k; ++j) m = std::max(m, row[j]);
        double z = 0.0;
        for (int j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j] - m));
        for (int j = 0; j < k; ++j)
            out[static_cast<std::size_t>(i) * k + j] =
                static_cast<float>(std::exp(static_cast<double>(row[j] - m)) / z);
    }
    auto y = out;  // captured for backward
    auto backward = [n, k, y](TensorNode& self) {
        TensorNode* x = self.parents[0].get();
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int i = 0; i < n; ++i) {
            const float* g = self.grad.data() + static_cast<std::size_t>(i) * k;
            const float* yi = y.data() + static_cast<std::size_t>(i) * k;
            double dot = 0.0;
            for (int j = 0; j < k; ++j) dot += static_cast<double>(g[j]) * yi[j];
            for (int j = 0; j < k; ++j)
                x->grad[static_cast<std::size_t>(i) * k + j] +=
                    yi[j] * (g[j] - static_cast<float>(dot));
        }
    };
    return Tensor(make_op_node("softmax", logits.shape(), std::move(out), {logits.node_ptr()},
                               std::move(backward)));
}

Tensor pick(const Tensor& x, std::int64_t flat_index) {
    if (flat_index < 0 || flat_index >= x.numel())
        throw std::invalid_argument("pick: index " + std::to_string(flat_index) +
                                    " out of range for " + shape_str(x.shape()));
    auto backward = [flat_index](TensorNode& self) {
        TensorNode* x = self.parents[0].get();
        if (!x->requires_grad) return;
        x->ensure_grad();
        x->grad[static_cast<std::size_t>(flat_index)] += self.grad[0];
    };
    return Tensor(make_op_node("pick", {1}, {x.data()[static_cast<std::size_t>(flat_index)]},
                               {x.node_ptr()}, std::move(backward)));
}

Tensor weighted_sum(const Tensor& x, std::span<const float> weights) {
    if (static_cast<std::int64_t>(weights.size()) != x.numel())
        throw std::invalid_argument("weighted_sum: " + std::to_string(weights.size()) +
                                    " weights for tensor " + shape_str(x.shape()));
    const float* xd = x.data().data();
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i)
        acc += static_cast<double>(weights[i]) * xd[i];
    std::vector<float> w(weights.begin(), weights.end());
    auto backward = [w](TensorNode& self) {
        TensorNode* x = self.parents[0].get();
        if (!x->requires_grad) return;
        x->ensure_grad();
        const float g = self.grad[0];
        for (std::size_t i = 0; i < w.size(); ++i) x->grad[i] += g * w[i];
    };
    auto node = make_op_node("weighted_sum", {1}, {static_cast<float>(acc)}, {x.node_ptr()},
                             std::move(backward));
    node->has_scalar_f64 = true;
    node->scalar_f64 = acc;
    return Tensor(std::move(node));
}

Tensor rms_norm(const Tensor& x, float eps) {
    if (x.rank() < 2) throw std::invalid_argument("rms_norm: expected a batched tensor");
    if (!(eps > 0.0f)) throw std::invalid_argument("rms_norm: eps must be positive");
    const int n = x.dim(0);
    const std::int64_t m = x.numel() / n;
    const float* xd = x.data().data();
    std::vector<float> out(x.data().size());
    std::vector<float> inv_rms(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const float* row = xd + static_cast<std::int64_t>(i) * m;
        double acc = 0.0;
        for (std::int64_t j = 0; j < m; ++j) acc += static_cast<double>(row[j]) * row[j];
        const float inv = 1.0f / std::sqrt(static_cast<float>(acc / static_cast<double>(m)) + eps);
        inv_rms[static_cast<std::size_t>(i)] = inv;
        float* orow = out.data() + static_cast<std::int64_t>(i) * m;
        for (std::int64_t j = 0; j < m; ++j) orow[j] = row[j] * inv;
    }
    auto backward = [n, m, inv_rms](TensorNode& self) {
        TensorNode* x = self.parents[0].get();
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int i = 0; i < n; ++i) {
            const float* row = x->data.data() + static_cast<std::int64_t>(i) * m;
            const float* g = self.grad.data() + static_cast<std::int64_t>(i) * m;
            float* gx = x->grad.data() + static_cast<std::int64_t>(i) * m;
            const float inv = inv_rms[static_cast<std::size_t>(i)];
            double dot = 0.0;
            for (std::int64_t j = 0; j < m; ++j) dot += static_cast<double>(g[j]) * row[j];
            // d/dx_j of x_j*inv with inv = (mean(x^2)+eps)^-1/2:
            // g_j*inv - x_j * inv^3 * (sum_k g_k x_k) / m
            const float scale = static_cast<float>(dot / static_cast<double>(m)) * inv * inv * inv;
            for (std::int64_t j = 0; j < m; ++j) gx[j] += g[j] * inv - row[j] * scale;
        }
    };
    return Tensor(make_op_node("rms_norm", x.shape(), std::move(out), {x.node_ptr()},
                               std::move(backward)));
}

// ---- bilinear resize (no tape) ----------------------------------------------

void bilinear_resize_plane(std::span<const float> src, int h, int w, std::span<float> dst,
                           int out_h, int out_w) {
    if (out_h < 1 || out_w < 1)
        throw std::invalid_argument("bilinear_resize: non-positive target size " +
                                    std::to_string(out_h) + "x" + std::to_string(out_w));
    if (h < 1 || w < 1 || static_cast<std::int64_t>(src.size()) != static_cast<std::int64_t>(h) * w)
        throw std::invalid_argument("bilinear_resize: bad source plane");
    if (h == out_h && w == out_w) {
        std::copy(src.begin(), src.end(), dst.begin());
        return;
    }
    const float sy = static_cast<float>(h) / static_cast<float>(out_h);
    const float sx = static_cast<float>(w) / static_cast<float>(out_w);
    for (int oy = 0; oy < out_h; ++oy) {
        float fy = (static_cast<float>(oy) + 0.5f) * sy - 0.5f;
        fy = std::clamp(fy, 0.0f, static_cast<float>(h - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, h - 1);
        const float ty = fy - static_cast<float>(y0);
        for (int ox = 0; ox < out_w; ++ox) {
            float fx = (static_cast<float>(ox) + 0.5f) * sx - 0.5f;
            fx = std::clamp(fx, 0.0f, static_cast<float>(w - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, w - 1);
            const float tx = fx - static_cast<float>(x0);
            const float v00 = src[static_cast<std::size_t>(y0) * w + x0];
            const float v01 = src[static_cast<std::size_t>(y0) * w + x1];
            const float v10 = src[static_cast<std::size_t>(y1) * w + x0];
            const float v11 = src[static_cast<std::size_t>(y1) * w + x1];
            dst[static_cast<std::size_t>(oy) * out_w + ox] =
                (1.0f - ty) * ((1.0f - tx) * v00 + tx * v01) + ty * ((1.0f - tx) * v10 + tx * v11);
        }
    }
}

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
    if (x.rank() != 2)
        throw std::invalid_argument("bilinear_resize: expected HW plane, got " + shape_str(x.shape()));
    std::vector<float> out(static_cast<std::size_t>(out_h) * out_w);
    bilinear_resize_plane(x.data(), x.dim(0), x.dim(1), out, out_h, out_w);
    return Tensor::from_data({out_h, out_w}, std::move(out));
}

}  // namespace dclscam
