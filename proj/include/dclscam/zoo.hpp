// zoo.hpp: tiny comparable architectures, SGD training, checkpoints.
//
// All variants share one layout: a stride-2 stem, three stages of
// [pointwise expand -> depthwise 5x5 -> pointwise project -> activation] with
// stride-2 downsamples between them, then global average pooling and a linear
// head. The dcls variants swap only the depthwise convolution implementation;
// the starrelu variants swap only the activation. The layer producing the last
// 4-D feature map (the stage-3 activation) is the tap for CAM methods.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dclscam/dcls.hpp"
#include "dclscam/tensor.hpp"

namespace dclscam {

enum class Arch { baseline, dcls, starrelu, starrelu_dcls, rigged_cancellation };

std::string arch_name(Arch a);
Arch parse_arch(const std::string& name);

struct TrainConfig {
    Arch arch = Arch::baseline;
    int epochs = 30;
    int batch_size = 32;
    float lr = 0.05f;
    float pos_lr_mult = 5.0f;  // applied to DCLS positions and sigma
    std::uint32_t seed = 7;
    int kernel_size = 5;   // K of the depthwise kernels
    int dcls_elements = 9; // m, comparable to the 3x3-at-dilation-2 grid in K=5
    Interp interp = Interp::bilinear;
    int classes = 3;
    int image_size = 32;

    std::string to_json() const;
    static TrainConfig from_json(const std::string& text);
};

enum class ParamKind { weight, dcls_position, dcls_sigma };

struct ParamEntry {
    std::string name;
    Tensor tensor;
    ParamKind kind = ParamKind::weight;
};

struct Layer {
    virtual ~Layer() = default;
    virtual Tensor forward(const Tensor& x) = 0;
    virtual void collect(const std::string& prefix, std::vector<ParamEntry>& out) = 0;
    virtual void post_step() {}  // constraint projection after an optimizer step
    virtual std::unique_ptr<Layer> clone() const = 0;
};

struct Conv2dLayer final : Layer {
    Tensor weight;  // [out, in/groups, k, k]
    Tensor bias;    // [out]
    int stride = 1, padding = 0, groups = 1;

    Tensor forward(const Tensor& x) override;
    void collect(const std::string& prefix, std::vector<ParamEntry>& out) override;
    std::unique_ptr<Layer> clone() const override;
};

struct DclsDepthwiseLayer final : Layer {
    DclsKernelSpec spec;
    Tensor bias;  // [channels]
    int stride = 1, padding = 0;

    Tensor forward(const Tensor& x) override;
    void collect(const std::string& prefix, std::vector<ParamEntry>& out) override;
    void post_step() override;  // clamp positions (and sigma)
    std::unique_ptr<Layer> clone() const override;
};

// Plain dilated depthwise convolution; the fixed-grid counterpart a DCLS layer
// generalizes. Used for trajectory-equivalence checks against DCLS.
struct DilatedDepthwiseLayer final : Layer {
    Tensor weight;  // [channels, 1, k, k]
    Tensor bias;    // [channels]
    int stride = 1, padding = 0, dilation = 1;

    Tensor forward(const Tensor& x) override;
    void collect(const std::string& prefix, std::vector<ParamEntry>& out) override;
    std::unique_ptr<Layer> clone() const override;
};

struct ReluLayer final : Layer {
    Tensor forward(const Tensor& x) override { return relu(x); }
    void collect(const std::string&, std::vector<ParamEntry>&) override {}
    std::unique_ptr<Layer> clone() const override { return std::make_unique<ReluLayer>(); }
};

struct StarReluLayer final : Layer {
    Tensor scale;  // [1], init 1
    Tensor bias;   // [1], init 0

    Tensor forward(const Tensor& x) override { return star_relu(x, scale, bias); }
    void collect(const std::string& prefix, std::vector<ParamEntry>& out) override;
    std::unique_ptr<Layer> clone() const override;
};

struct RmsNormLayer final : Layer {
    Tensor forward(const Tensor& x) override { return rms_norm(x); }
    void collect(const std::string&, std::vector<ParamEntry>&) override {}
    std::unique_ptr<Layer> clone() const override { return std::make_unique<RmsNormLayer>(); }
};

struct GlobalAvgPoolLayer final : Layer {
    Tensor forward(const Tensor& x) override { return global_avg_pool(x); }
    void collect(const std::string&, std::vector<ParamEntry>&) override {}
    std::unique_ptr<Layer> clone() const override { return std::make_unique<GlobalAvgPoolLayer>(); }
};

struct LinearLayer final : Layer {
    Tensor weight;  // [out, in]
    Tensor bias;    // [out]

    Tensor forward(const Tensor& x) override { return linear(x, weight, bias); }
    void collect(const std::string& prefix, std::vector<ParamEntry>& out) override;
    std::unique_ptr<Layer> clone() const override;
};

class Model {
 public:
    Model() = default;
    Model(Model&&) = default;
    Model& operator=(Model&&) = default;

    Tensor forward(const Tensor& x) const;

    struct Trace {
        Tensor logits;
        Tensor tap;  // 4-D NCHW activation of the tap layer
    };
    Trace forward_traced(const Tensor& x) const;

    // Stable, deterministic registry: every learnable parameter exactly once.
    std::vector<ParamEntry> parameters() const;
    std::int64_t parameter_count() const;
    void zero_grad() const;
    void post_step() const;

    Model clone() const;

    std::vector<std::unique_ptr<Layer>>& layers() { return layers_; }
    const std::vector<std::unique_ptr<Layer>>& layers() const { return layers_; }
    int tap_index() const { return tap_; }
    void set_tap_index(int i) { tap_ = i; }
    int classes() const { return classes_; }
    void set_classes(int c) { classes_ = c; }

 private:
    std::vector<std::unique_ptr<Layer>> layers_;
    int tap_ = -1;
    int classes_ = 0;
};

Model build(const TrainConfig& config);

// In-memory dataset view the trainer consumes (NCHW float pixels in [0,1]).
struct TrainSet {
    int count = 0;
    int channels = 3;
    int height = 0;
    int width = 0;
    std::vector<float> pixels;  // count * channels * height * width
    std::vector<int> labels;

    Tensor image(int index) const;  // [1,C,H,W]
};

struct EpochStats {
    int epoch = 0;
    double loss = 0.0;
    double train_accuracy = 0.0;
};

struct TrainLog {
    std::vector<EpochStats> epochs;
};

struct DivergenceError : NonFiniteError {
    std::int64_t step;
    DivergenceError(std::int64_t s, const std::string& msg) : NonFiniteError(msg), step(s) {}
};

// Called after each SGD step with the global step index and the batch loss.
using StepObserver = std::function<void(std::int64_t step, double loss, const Model& model)>;

// Plain SGD with the configured rates and a linear per-step decay to 10% of
// the base rate over the whole run; DCLS positions/sigma use lr * pos_lr_mult
// and are clamped after every step. Batch order is a deterministic function of
// config.seed. Throws DivergenceError (with the offending step index) if the
// loss goes non-finite.
TrainLog train(Model& model, const TrainSet& data, const TrainConfig& config,
               const StepObserver& observer = {});

std::vector<float> predict(const Model& model, const Tensor& image);
double top1(const Model& model, const TrainSet& data);

// ---- checkpoints ------------------------------------------------------------
// Binary: magic "DCLSCKPT", u32 version, then per parameter
// (u32 name length, name bytes, u8 dtype tag 0=f32, u32 rank, u32 dims...,
// little-endian f32 payload). A JSON TrainConfig sidecar lives at
// <path>.json so the model can be rebuilt before loading.

void save_checkpoint(const std::string& path, const Model& model, const TrainConfig& config);

struct Checkpoint {
    TrainConfig config;
    Model model;
};
Checkpoint load_checkpoint(const std::string& path);

// Raw parameter table of a checkpoint file, in file order.
std::vector<std::pair<std::string, Tensor>> read_checkpoint_params(const std::string& path);

// ---- equivalence helpers ----------------------------------------------------

// Pin every DCLS element onto the regular dilation grid its element count
// implies (m must be a square, grid must fit K). With position lr 0 this makes
// the model trainable as a plain dilated convolution.
void snap_positions_to_dilation_grid(Model& model);

// Same model with every DCLS depthwise layer replaced by a DilatedDepthwiseLayer
// carrying identical weights on the integer grid. Requires snapped positions.
Model build_dilated_twin(const Model& model);

}  // namespace dclscam
