// tensor.hpp: dense float32 tensors with a minimal reverse-mode autodiff core.
//
// Every op records a tape point (op tag, parent references, backward closure)
// on its output node. backward() on a scalar replays the recorded graph in
// reverse topological order and accumulates gradients into every reachable
// node that requires them. Forward/backward run in 32-bit; reductions use
// 64-bit accumulators.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dclscam {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Thrown when an op produces NaN/Inf, or training diverges.
struct NonFiniteError : std::runtime_error {
    explicit NonFiniteError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

// One tape point: the op that produced this value, the inputs it read, and
// the closure that scatters this node's gradient back into them.
struct TensorNode {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // allocated lazily, same length as data
    bool requires_grad = false;
    bool backward_run = false;  // set on the node backward() was invoked on
    bool has_scalar_f64 = false;
    double scalar_f64 = 0.0;  // unrounded value of a 64-bit scalar reduction

    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
    }
};

// Records a tape point: the output requires grad iff any parent does, in which
// case it keeps the parent references and the backward closure. Output values
// are checked finite.
std::shared_ptr<TensorNode> make_op_node(const char* op, Shape shape, std::vector<float> data,
                                         std::vector<std::shared_ptr<TensorNode>> parents,
                                         std::function<void(TensorNode&)> backward);

}  // namespace detail

class Tensor {
 public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false);
    // A leaf that accumulates gradients (model parameter).
    static Tensor param(Shape shape, std::vector<float> data);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::int64_t numel() const { return node_->numel(); }
    bool requires_grad() const { return node_->requires_grad; }

    std::span<const float> data() const { return {node_->data.data(), node_->data.size()}; }
    // Direct mutation is for leaves (optimizer steps, checkpoint loads). The
    // handle is shared-ownership, so const here refers to the handle, not the
    // buffer.
    std::span<float> mutable_data() const { return {node_->data.data(), node_->data.size()}; }
    std::span<const float> grad() const;
    bool has_grad() const { return !node_->grad.empty(); }

    float item() const;
    // Scalar reductions accumulate in 64-bit; this returns that accumulator
    // before the float32 rounding (falls back to item() for other scalars).
    // The finite-difference oracle reads values through here.
    double item_f64() const;

    void zero_grad() const;

    // Reverse pass from this scalar. Errors if not a scalar or if backward
    // already ran on this tape point (explicit zero_grad does not re-arm a
    // consumed tape; run a fresh forward pass instead).
    void backward() const;

    detail::TensorNode* node() const { return node_.get(); }
    const std::shared_ptr<detail::TensorNode>& node_ptr() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}

 private:
    std::shared_ptr<detail::TensorNode> node_;
};

// ---- ops -------------------------------------------------------------------

// Cross-correlation (no kernel flip), NCHW input, kernel [Cout, Cin/groups, Kh, Kw],
// floor-division output size.
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding, int groups);

// Same contract with a dilation factor between kernel taps (dilation=1 is conv2d).
Tensor conv2d_dilated(const Tensor& input, const Tensor& kernel, int stride, int padding,
                      int groups, int dilation);

Tensor relu(const Tensor& x);

// s * relu(x)^2 + b with learnable scalars s, b (both shape [1]).
Tensor star_relu(const Tensor& x, const Tensor& scale, const Tensor& bias);

// NCHW -> NC per-channel spatial mean.
Tensor global_avg_pool(const Tensor& x);

// x [N,F], weight [O,F], bias [O] -> [N,O]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// x NCHW + bias [C]
Tensor bias_add(const Tensor& x, const Tensor& bias);

// logits [N,K], labels in [0,K) -> mean cross-entropy, scalar [1]
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Row-wise softmax of [N,K].
Tensor softmax(const Tensor& logits);

// Select one element as a scalar [1]; gradient scatters back to that slot.
Tensor pick(const Tensor& x, std::int64_t flat_index);

// Fixed-weight reduction to a scalar [1]: sum_i w[i] * x[i] (64-bit accumulated).
Tensor weighted_sum(const Tensor& x, std::span<const float> weights);

// Per-sample RMS normalization over all non-batch dims: x / sqrt(mean(x^2)+eps).
// Keeps squared activations on a stable scale in StarReLU blocks.
Tensor rms_norm(const Tensor& x, float eps = 1e-5f);

// Align-corners-false bilinear resampling of a 2-D plane. Not differentiated
// (consumes detached heatmaps). Identical sizes copy bit-exactly.
Tensor bilinear_resize(const Tensor& x, int out_h, int out_w);
void bilinear_resize_plane(std::span<const float> src, int h, int w,
                           std::span<float> dst, int out_h, int out_w);

}  // namespace dclscam
