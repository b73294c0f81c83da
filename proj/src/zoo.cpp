#include "dclscam/zoo.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

namespace dclscam {

std::string arch_name(Arch a) {
    switch (a) {
        case Arch::baseline: return "baseline";
        case Arch::dcls: return "dcls";
        case Arch::starrelu: return "starrelu";
        case Arch::starrelu_dcls: return "starrelu_dcls";
        case Arch::rigged_cancellation: return "rigged_cancellation";
    }
    return "?";
}

Arch parse_arch(const std::string& name) {
    if (name == "baseline") return Arch::baseline;
    if (name == "dcls") return Arch::dcls;
    if (name == "starrelu") return Arch::starrelu;
    if (name == "starrelu_dcls") return Arch::starrelu_dcls;
    if (name == "rigged_cancellation") return Arch::rigged_cancellation;
    throw std::invalid_argument("unknown architecture tag '" + name + "'");
}

std::string TrainConfig::to_json() const {
    nlohmann::json j;
    j["arch"] = arch_name(arch);
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["lr"] = lr;
    j["pos_lr_mult"] = pos_lr_mult;
    j["seed"] = seed;
    j["kernel_size"] = kernel_size;
    j["dcls_elements"] = dcls_elements;
    j["interp"] = interp_name(interp);
    j["classes"] = classes;
    j["image_size"] = image_size;
    return j.dump(2) + "\n";
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    TrainConfig c;
    c.arch = parse_arch(j.at("arch").get<std::string>());
    c.epochs = j.at("epochs").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.lr = j.at("lr").get<float>();
    c.pos_lr_mult = j.at("pos_lr_mult").get<float>();
    c.seed = j.at("seed").get<std::uint32_t>();
    c.kernel_size = j.at("kernel_size").get<int>();
    c.dcls_elements = j.at("dcls_elements").get<int>();
    c.interp = parse_interp(j.at("interp").get<std::string>());
    c.classes = j.at("classes").get<int>();
    c.image_size = j.at("image_size").get<int>();
    return c;
}

// ---- layers ------------------------------------------------------------------

Tensor Conv2dLayer::forward(const Tensor& x) {
    return bias_add(conv2d(x, weight, stride, padding, groups), bias);
}

void Conv2dLayer::collect(const std::string& prefix, std::vector<ParamEntry>& out) {
    out.push_back({prefix + ".weight", weight, ParamKind::weight});
    out.push_back({prefix + ".bias", bias, ParamKind::weight});
}

std::unique_ptr<Layer> Conv2dLayer::clone() const {
    auto l = std::make_unique<Conv2dLayer>();
    l->weight = Tensor::param(weight.shape(), {weight.data().begin(), weight.data().end()});
    l->bias = Tensor::param(bias.shape(), {bias.data().begin(), bias.data().end()});
    l->stride = stride; l->padding = padding; l->groups = groups;
    return l;
}

Tensor DclsDepthwiseLayer::forward(const Tensor& x) {
    return bias_add(dcls_conv(x, spec, stride, padding), bias);
}

void DclsDepthwiseLayer::collect(const std::string& prefix, std::vector<ParamEntry>& out) {
    out.push_back({prefix + ".weight", spec.weights, ParamKind::weight});
    out.push_back({prefix + ".pos", spec.positions, ParamKind::dcls_position});
    if (spec.mode == Interp::gaussian)
        out.push_back({prefix + ".sigma", spec.sigma, ParamKind::dcls_sigma});
    out.push_back({prefix + ".bias", bias, ParamKind::weight});
}

void DclsDepthwiseLayer::post_step() { clamp_positions(spec); }

std::unique_ptr<Layer> DclsDepthwiseLayer::clone() const {
    auto l = std::make_unique<DclsDepthwiseLayer>();
    l->spec.channels = spec.channels;
    l->spec.elements = spec.elements;
    l->spec.kernel_size = spec.kernel_size;
    l->spec.mode = spec.mode;
    l->spec.weights = Tensor::param(spec.weights.shape(),
                                    {spec.weights.data().begin(), spec.weights.data().end()});
    l->spec.positions = Tensor::param(spec.positions.shape(),
                                      {spec.positions.data().begin(), spec.positions.data().end()});
    if (spec.sigma.defined())
        l->spec.sigma = Tensor::param(spec.sigma.shape(),
                                      {spec.sigma.data().begin(), spec.sigma.data().end()});
    l->bias = Tensor::param(bias.shape(), {bias.data().begin(), bias.data().end()});
    l->stride = stride; l->padding = padding;
    return l;
}

Tensor DilatedDepthwiseLayer::forward(const Tensor& x) {
    return bias_add(conv2d_dilated(x, weight, stride, padding, weight.dim(0), dilation), bias);
}

void DilatedDepthwiseLayer::collect(const std::string& prefix, std::vector<ParamEntry>& out) {
    out.push_back({prefix + ".weight", weight, ParamKind::weight});
    out.push_back({prefix + ".bias", bias, ParamKind::weight});
}

std::unique_ptr<Layer> DilatedDepthwiseLayer::clone() const {
    auto l = std::make_unique<DilatedDepthwiseLayer>();
    l->weight = Tensor::param(weight.shape(), {weight.data().begin(), weight.data().end()});
    l->bias = Tensor::param(bias.shape(), {bias.data().begin(), bias.data().end()});
    l->stride = stride; l->padding = padding; l->dilation = dilation;
    return l;
}

void StarReluLayer::collect(const std::string& prefix, std::vector<ParamEntry>& out) {
    out.push_back({prefix + ".scale", scale, ParamKind::weight});
    out.push_back({prefix + ".bias", bias, ParamKind::weight});
}

std::unique_ptr<Layer> StarReluLayer::clone() const {
    auto l = std::make_unique<StarReluLayer>();
    l->scale = Tensor::param({1}, {scale.data()[0]});
    l->bias = Tensor::param({1}, {bias.data()[0]});
    return l;
}

void LinearLayer::collect(const std::string& prefix, std::vector<ParamEntry>& out) {
    out.push_back({prefix + ".weight", weight, ParamKind::weight});
    out.push_back({prefix + ".bias", bias, ParamKind::weight});
}

std::unique_ptr<Layer> LinearLayer::clone() const {
    auto l = std::make_unique<LinearLayer>();
    l->weight = Tensor::param(weight.shape(), {weight.data().begin(), weight.data().end()});
    l->bias = Tensor::param(bias.shape(), {bias.data().begin(), bias.data().end()});
    return l;
}

// ---- model -------------------------------------------------------------------

Tensor Model::forward(const Tensor& x) const {
    Tensor v = x;
    for (const auto& layer : layers_) v = layer->forward(v);
    return v;
}

Model::Trace Model::forward_traced(const Tensor& x) const {
    if (tap_ < 0 || tap_ >= static_cast<int>(layers_.size()))
        throw std::logic_error("model has no tap layer");
    Trace t;
    Tensor v = x;
    for (int i = 0; i < static_cast<int>(layers_.size()); ++i) {
        v = layers_[static_cast<std::size_t>(i)]->forward(v);
        if (i == tap_) {
            if (v.rank() != 4)
                throw std::logic_error("tap layer output must be NCHW, got " + shape_str(v.shape()));
            t.tap = v;
        }
    }
    t.logits = v;
    return t;
}

std::vector<ParamEntry> Model::parameters() const {
    std::vector<ParamEntry> out;
    for (std::size_t i = 0; i < layers_.size(); ++i)
        layers_[i]->collect("L" + std::to_string(i), out);
    return out;
}

std::int64_t Model::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
}

void Model::zero_grad() const {
    for (auto& p : parameters()) p.tensor.zero_grad();
}

void Model::post_step() const {
    for (const auto& layer : layers_) layer->post_step();
}

Model Model::clone() const {
    Model m;
    m.tap_ = tap_;
    m.classes_ = classes_;
    for (const auto& layer : layers_) m.layers_.push_back(layer->clone());
    return m;
}

// ---- build -------------------------------------------------------------------

namespace {

constexpr int kStageWidths[3] = {16, 32, 64};
constexpr int kExpansion = 2;

std::vector<float> normal_init(std::mt19937& rng, std::int64_t n, float stddev) {
    std::normal_distribution<float> dist(0.0f, stddev);
    std::vector<float> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = dist(rng);
    return v;
}

std::unique_ptr<Conv2dLayer> make_conv(std::mt19937& rng, int in, int out, int k, int stride,
                                       int padding, int groups = 1) {
    auto l = std::make_unique<Conv2dLayer>();
    const int icg = in / groups;
    const float stddev = std::sqrt(2.0f / static_cast<float>(icg * k * k));
    l->weight = Tensor::param({out, icg, k, k},
                              normal_init(rng, static_cast<std::int64_t>(out) * icg * k * k, stddev));
    l->bias = Tensor::param({out}, std::vector<float>(static_cast<std::size_t>(out), 0.0f));
    l->stride = stride; l->padding = padding; l->groups = groups;
    return l;
}

std::unique_ptr<Layer> make_depthwise(std::mt19937& rng, int channels, const TrainConfig& cfg,
                                      bool use_dcls) {
    const int k = cfg.kernel_size;
    const int pad = (k - 1) / 2;
    if (!use_dcls) return make_conv(rng, channels, channels, k, 1, pad, channels);
    auto l = std::make_unique<DclsDepthwiseLayer>();
    l->spec.channels = channels;
    l->spec.elements = cfg.dcls_elements;
    l->spec.kernel_size = k;
    l->spec.mode = cfg.interp;
    const float stddev = std::sqrt(2.0f / static_cast<float>(cfg.dcls_elements));
    l->spec.weights = Tensor::param(
        {channels, cfg.dcls_elements},
        normal_init(rng, static_cast<std::int64_t>(channels) * cfg.dcls_elements, stddev));
    std::uniform_real_distribution<float> upos(0.0f, static_cast<float>(k - 1));
    std::vector<float> pos(static_cast<std::size_t>(channels) * cfg.dcls_elements * 2);
    for (auto& p : pos) p = upos(rng);
    l->spec.positions = Tensor::param({channels, cfg.dcls_elements, 2}, std::move(pos));
    if (cfg.interp == Interp::gaussian) l->spec.sigma = Tensor::param({1}, {0.5f});
    l->bias = Tensor::param({channels}, std::vector<float>(static_cast<std::size_t>(channels), 0.0f));
    l->stride = 1; l->padding = pad;
    return l;
}

std::unique_ptr<Layer> make_act(bool star) {
    if (!star) return std::make_unique<ReluLayer>();
    auto l = std::make_unique<StarReluLayer>();
    l->scale = Tensor::param({1}, {1.0f});
    l->bias = Tensor::param({1}, {0.0f});
    return l;
}

// A two-channel tap whose weighted maps cancel under summation: the first
// channel sees +1 of the red plane, the second -2 of it, and the head weighs
// both equally for class 0. Grad-CAM's post-sum ReLU therefore wipes the map
// while the per-channel rectification keeps it.
Model build_rigged_cancellation() {
    Model m;
    auto conv = std::make_unique<Conv2dLayer>();
    conv->weight = Tensor::param({2, 3, 1, 1}, {1.0f, 0.0f, 0.0f, -2.0f, 0.0f, 0.0f});
    conv->bias = Tensor::param({2}, {0.0f, 0.0f});
    conv->stride = 1; conv->padding = 0; conv->groups = 1;
    m.layers().push_back(std::move(conv));
    m.set_tap_index(0);
    m.layers().push_back(std::make_unique<GlobalAvgPoolLayer>());
    auto head = std::make_unique<LinearLayer>();
    head->weight = Tensor::param({2, 2}, {4.0f, 4.0f, 0.0f, 0.0f});
    head->bias = Tensor::param({2}, {0.0f, 0.0f});
    m.layers().push_back(std::move(head));
    m.set_classes(2);
    return m;
}

}  // namespace

Model build(const TrainConfig& cfg) {
    if (cfg.arch == Arch::rigged_cancellation) return build_rigged_cancellation();
    if (cfg.classes < 2) throw std::invalid_argument("build: need at least 2 classes");
    if (cfg.kernel_size < 1 || cfg.dcls_elements < 1 ||
        cfg.dcls_elements > cfg.kernel_size * cfg.kernel_size)
        throw std::invalid_argument("build: invalid kernel_size/dcls_elements");
    const bool use_dcls = cfg.arch == Arch::dcls || cfg.arch == Arch::starrelu_dcls;
    const bool use_star = cfg.arch == Arch::starrelu || cfg.arch == Arch::starrelu_dcls;

    std::mt19937 rng(cfg.seed);
    Model m;
    auto& L = m.layers();
    L.push_back(make_conv(rng, 3, kStageWidths[0], 3, 2, 1));  // stem, /2
    L.push_back(make_act(false));
    for (int s = 0; s < 3; ++s) {
        const int c = kStageWidths[s];
        if (s > 0) {
            L.push_back(make_conv(rng, kStageWidths[s - 1], c, 2, 2, 0));  // downsample, /2
            L.push_back(make_act(false));
        }
        const int e = c * kExpansion;
        L.push_back(make_conv(rng, c, e, 1, 1, 0));              // pointwise expand
        L.push_back(make_depthwise(rng, e, cfg, use_dcls));      // spatial mixing
        L.push_back(make_conv(rng, e, c, 1, 1, 0));              // pointwise project
        // Squared activations have no stable scale without a norm in front.
        if (use_star) L.push_back(std::make_unique<RmsNormLayer>());
        L.push_back(make_act(use_star));
    }
    m.set_tap_index(static_cast<int>(L.size()) - 1);
    L.push_back(std::make_unique<GlobalAvgPoolLayer>());
    auto head = std::make_unique<LinearLayer>();
    {
        std::mt19937& r = rng;
        const float stddev = std::sqrt(2.0f / static_cast<float>(kStageWidths[2]));
        head->weight = Tensor::param(
            {cfg.classes, kStageWidths[2]},
            normal_init(r, static_cast<std::int64_t>(cfg.classes) * kStageWidths[2], stddev));
        head->bias = Tensor::param({cfg.classes},
                                   std::vector<float>(static_cast<std::size_t>(cfg.classes), 0.0f));
    }
    L.push_back(std::move(head));
    m.set_classes(cfg.classes);
    return m;
}

// ---- training ----------------------------------------------------------------

Tensor TrainSet::image(int index) const {
    const std::int64_t plane = static_cast<std::int64_t>(channels) * height * width;
    if (index < 0 || index >= count) throw std::out_of_range("TrainSet::image index");
    std::vector<float> px(pixels.begin() + index * plane, pixels.begin() + (index + 1) * plane);
    return Tensor::from_data({1, channels, height, width}, std::move(px));
}

namespace {

int count_correct(const Tensor& logits, const std::vector<int>& labels) {
    const int n = logits.dim(0), k = logits.dim(1);
    const float* d = logits.data().data();
    int correct = 0;
    for (int i = 0; i < n; ++i) {
        int best = 0;
        for (int j = 1; j < k; ++j)
            if (d[i * k + j] > d[i * k + best]) best = j;
        if (best == labels[i]) ++correct;
    }
    return correct;
}

Tensor gather_batch(const TrainSet& data, const std::vector<int>& idx, int start, int b,
                    std::vector<int>& labels) {
    const std::int64_t plane = static_cast<std::int64_t>(data.channels) * data.height * data.width;
    std::vector<float> px(static_cast<std::size_t>(b) * plane);
    labels.resize(static_cast<std::size_t>(b));
    for (int i = 0; i < b; ++i) {
        const int src = idx[static_cast<std::size_t>(start + i)];
        std::copy_n(data.pixels.begin() + src * plane, plane, px.begin() + i * plane);
        labels[static_cast<std::size_t>(i)] = data.labels[static_cast<std::size_t>(src)];
    }
    return Tensor::from_data({b, data.channels, data.height, data.width}, std::move(px));
}

}  // namespace

TrainLog train(Model& model, const TrainSet& data, const TrainConfig& cfg,
               const StepObserver& observer) {
    if (data.count <= 0) throw std::invalid_argument("train: empty dataset");
    if (static_cast<int>(data.labels.size()) != data.count)
        throw std::invalid_argument("train: label count mismatch");
    const auto params = model.parameters();
    // Distinct stream from the init rng; the seed still fully determines both.
    std::mt19937 order_rng(cfg.seed * 0x9E3779B9u + 0x1234567u);
    std::vector<int> idx(static_cast<std::size_t>(data.count));
    std::iota(idx.begin(), idx.end(), 0);

    const std::int64_t steps_per_epoch = (data.count + cfg.batch_size - 1) / cfg.batch_size;
    const std::int64_t total_steps = steps_per_epoch * cfg.epochs;

    TrainLog log;
    std::int64_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(idx.begin(), idx.end(), order_rng);
        double loss_sum = 0.0;
        std::int64_t correct = 0;
        for (int start = 0; start < data.count; start += cfg.batch_size) {
            const int b = std::min(cfg.batch_size, data.count - start);
            std::vector<int> labels;
            const Tensor x = gather_batch(data, idx, start, b, labels);
            double loss_value = 0.0;
            try {
                const Tensor logits = model.forward(x);
                const Tensor loss = softmax_cross_entropy(logits, labels);
                loss_value = loss.item();
                model.zero_grad();
                loss.backward();
                correct += count_correct(logits, labels);
            } catch (const NonFiniteError& e) {
                throw DivergenceError(step, "training diverged at step " + std::to_string(step) +
                                                ": " + e.what());
            }
            // Linear decay to 10% of the base rate; without any normalization
            // layers a constant rate is unstable late in training.
            const float decay =
                1.0f - 0.9f * static_cast<float>(step) / static_cast<float>(total_steps);
            for (const auto& p : params) {
                if (!p.tensor.has_grad()) continue;
                const float lr =
                    cfg.lr * decay * (p.kind == ParamKind::weight ? 1.0f : cfg.pos_lr_mult);
                if (lr == 0.0f) continue;
                auto d = p.tensor.mutable_data();
                auto g = p.tensor.grad();
                for (std::size_t i = 0; i < d.size(); ++i) d[i] -= lr * g[i];
            }
            model.post_step();
            loss_sum += loss_value * b;
            if (observer) observer(step, loss_value, model);
            ++step;
        }
        log.epochs.push_back({epoch, loss_sum / data.count,
                              static_cast<double>(correct) / data.count});
    }
    return log;
}

std::vector<float> predict(const Model& model, const Tensor& image) {
    const Tensor logits = model.forward(image);
    return {logits.data().begin(), logits.data().end()};
}

double top1(const Model& model, const TrainSet& data) {
    if (data.count <= 0) throw std::invalid_argument("top1: empty dataset");
    const int batch = 64;
    const std::int64_t plane = static_cast<std::int64_t>(data.channels) * data.height * data.width;
    std::int64_t correct = 0;
    for (int start = 0; start < data.count; start += batch) {
        const int b = std::min(batch, data.count - start);
        std::vector<float> px(data.pixels.begin() + start * plane,
                              data.pixels.begin() + (start + b) * plane);
        const Tensor x = Tensor::from_data({b, data.channels, data.height, data.width}, std::move(px));
        const Tensor logits = model.forward(x);
        std::vector<int> labels(data.labels.begin() + start, data.labels.begin() + start + b);
        correct += count_correct(logits, labels);
    }
    return static_cast<double>(correct) / data.count;
}

// ---- checkpoints ---------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'D', 'C', 'L', 'S', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    os.write(b, 4);
}

std::uint32_t get_u32(std::istream& is, const char* what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw std::runtime_error(std::string("checkpoint truncated while reading ") + what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, const TrainConfig& config) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    os.write(kMagic, 8);
    put_u32(os, kVersion);
    for (const auto& p : model.parameters()) {
        put_u32(os, static_cast<std::uint32_t>(p.name.size()));
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        os.put(0);  // dtype tag: f32
        put_u32(os, static_cast<std::uint32_t>(p.tensor.rank()));
        for (int d : p.tensor.shape()) put_u32(os, static_cast<std::uint32_t>(d));
        for (float v : p.tensor.data()) put_u32(os, std::bit_cast<std::uint32_t>(v));
    }
    if (!os) throw std::runtime_error("failed writing checkpoint: " + path);
    std::ofstream js(path + ".json");
    if (!js) throw std::runtime_error("cannot open sidecar for writing: " + path + ".json");
    js << config.to_json();
}

std::vector<std::pair<std::string, Tensor>> read_checkpoint_params(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    if (!is.read(magic, 8) || std::string(magic, 8) != std::string(kMagic, 8))
        throw std::runtime_error("not a DCLSCKPT file: " + path);
    const std::uint32_t version = get_u32(is, "version");
    if (version != kVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    std::vector<std::pair<std::string, Tensor>> out;
    while (is.peek() != std::char_traits<char>::eof()) {
        const std::uint32_t name_len = get_u32(is, "parameter name length");
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len))
            throw std::runtime_error("checkpoint truncated while reading a parameter name");
        const int dtype = is.get();
        if (dtype != 0)
            throw std::runtime_error("unsupported dtype tag " + std::to_string(dtype) + " for " + name);
        const std::uint32_t rank = get_u32(is, "rank");
        if (rank == 0 || rank > 8) throw std::runtime_error("bad rank for parameter " + name);
        Shape shape(rank);
        std::int64_t n = 1;
        for (auto& d : shape) {
            d = static_cast<int>(get_u32(is, "shape"));
            n *= d;
        }
        if (n <= 0 || n > (1 << 28)) throw std::runtime_error("bad shape for parameter " + name);
        std::vector<float> data(static_cast<std::size_t>(n));
        for (auto& v : data) v = std::bit_cast<float>(get_u32(is, name.c_str()));
        out.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
    }
    return out;
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream js(path + ".json");
    if (!js) throw std::runtime_error("missing checkpoint sidecar: " + path + ".json");
    std::stringstream ss;
    ss << js.rdbuf();
    Checkpoint ck;
    ck.config = TrainConfig::from_json(ss.str());
    ck.model = build(ck.config);

    auto params = ck.model.parameters();
    auto stored = read_checkpoint_params(path);
    if (stored.size() != params.size())
        throw std::runtime_error("checkpoint has " + std::to_string(stored.size()) +
                                 " parameters, model expects " + std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (stored[i].first != params[i].name)
            throw std::runtime_error("checkpoint parameter '" + stored[i].first +
                                     "' does not match model parameter '" + params[i].name + "'");
        if (stored[i].second.shape() != params[i].tensor.shape())
            throw std::runtime_error("shape mismatch for " + params[i].name + ": file " +
                                     shape_str(stored[i].second.shape()) + " vs model " +
                                     shape_str(params[i].tensor.shape()));
        auto dst = params[i].tensor.mutable_data();
        auto src = stored[i].second.data();
        std::copy(src.begin(), src.end(), dst.begin());
    }
    return ck;
}

// ---- equivalence helpers -------------------------------------------------------

namespace {

struct DilationGrid {
    int side;      // sqrt(m)
    int dilation;  // spacing between taps
};

DilationGrid grid_for(const DclsKernelSpec& spec) {
    const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(spec.elements))));
    if (side < 2 || side * side != spec.elements)
        throw std::invalid_argument("dilation grid: m=" + std::to_string(spec.elements) +
                                    " is not a square >= 4");
    if ((spec.kernel_size - 1) % (side - 1) != 0)
        throw std::invalid_argument("dilation grid: K-1 not divisible by sqrt(m)-1");
    return {side, (spec.kernel_size - 1) / (side - 1)};
}

}  // namespace

void snap_positions_to_dilation_grid(Model& model) {
    for (auto& layer : model.layers()) {
        auto* dcls = dynamic_cast<DclsDepthwiseLayer*>(layer.get());
        if (!dcls) continue;
        const DilationGrid g = grid_for(dcls->spec);
        auto pos = dcls->spec.positions.mutable_data();
        const int m = dcls->spec.elements;
        for (int c = 0; c < dcls->spec.channels; ++c)
            for (int e = 0; e < m; ++e) {
                pos[(c * m + e) * 2 + 0] = static_cast<float>(g.dilation * (e / g.side));
                pos[(c * m + e) * 2 + 1] = static_cast<float>(g.dilation * (e % g.side));
            }
    }
}

Model build_dilated_twin(const Model& model) {
    Model twin;
    twin.set_tap_index(model.tap_index());
    twin.set_classes(model.classes());
    for (const auto& layer : model.layers()) {
        const auto* dcls = dynamic_cast<const DclsDepthwiseLayer*>(layer.get());
        if (!dcls) {
            twin.layers().push_back(layer->clone());
            continue;
        }
        const DilationGrid g = grid_for(dcls->spec);
        auto pos = dcls->spec.positions.data();
        const int m = dcls->spec.elements;
        for (int c = 0; c < dcls->spec.channels; ++c)
            for (int e = 0; e < m; ++e) {
                if (pos[(c * m + e) * 2 + 0] != static_cast<float>(g.dilation * (e / g.side)) ||
                    pos[(c * m + e) * 2 + 1] != static_cast<float>(g.dilation * (e % g.side)))
                    throw std::invalid_argument(
                        "build_dilated_twin: positions are not on the dilation grid; "
                        "call snap_positions_to_dilation_grid first");
            }
        auto l = std::make_unique<DilatedDepthwiseLayer>();
        l->weight = Tensor::param({dcls->spec.channels, 1, g.side, g.side},
                                  {dcls->spec.weights.data().begin(), dcls->spec.weights.data().end()});
        l->bias = Tensor::param(dcls->bias.shape(), {dcls->bias.data().begin(), dcls->bias.data().end()});
        l->stride = dcls->stride;
        l->padding = dcls->padding;
        l->dilation = g.dilation;
        twin.layers().push_back(std::move(l));
    }
    return twin;
}

}  // namespace dclscam
