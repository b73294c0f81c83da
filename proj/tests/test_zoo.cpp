#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "dclscam/zoo.hpp"
#include "test_support.hpp"

using namespace dclscam;

namespace {

TrainConfig small_config(Arch arch, std::uint32_t seed = 7) {
    TrainConfig cfg;
    cfg.arch = arch;
    cfg.seed = seed;
    cfg.classes = 3;
    cfg.image_size = 16;
    cfg.epochs = 5;
    cfg.batch_size = 8;
    cfg.lr = 0.05f;
    return cfg;
}

// Random memorizable toy set: fixed pixels, round-robin labels.
TrainSet toy_set(int n, int size, int classes, std::uint32_t seed) {
    std::mt19937 rng(seed);
    TrainSet set;
    set.count = n;
    set.height = size;
    set.width = size;
    set.pixels = testsup::random_values(rng, static_cast<std::size_t>(n) * 3 * size * size, 0.0f, 1.0f);
    set.labels.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) set.labels[static_cast<std::size_t>(i)] = i % classes;
    return set;
}

std::vector<float> flatten_params(const Model& m) {
    std::vector<float> out;
    for (const auto& p : m.parameters())
        out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
    return out;
}

}  // namespace

TEST_CASE("build is deterministic under the seed") {
    auto a = build(small_config(Arch::dcls));
    auto b = build(small_config(Arch::dcls));
    auto pa = flatten_params(a);
    auto pb = flatten_params(b);
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i] == pb[i]);
}

TEST_CASE("baseline and dcls differ only by position (and sigma) parameters when m=K*K") {
    auto base_cfg = small_config(Arch::baseline);
    base_cfg.kernel_size = 5;
    auto dcls_cfg = small_config(Arch::dcls);
    dcls_cfg.kernel_size = 5;
    dcls_cfg.dcls_elements = 25;

    const auto nb = build(base_cfg).parameter_count();
    const auto nd = build(dcls_cfg).parameter_count();
    // Depthwise mixers run at the expanded widths 32/64/128.
    const std::int64_t dw_channels = 32 + 64 + 128;
    CHECK(nd == nb + dw_channels * 25 * 2);

    dcls_cfg.interp = Interp::gaussian;
    const auto ng = build(dcls_cfg).parameter_count();
    CHECK(ng == nd + 3);  // one sigma per DCLS layer
}

TEST_CASE("baseline and dcls are layer-for-layer shape compatible") {
    auto base = build(small_config(Arch::baseline));
    auto dcls = build(small_config(Arch::dcls));
    REQUIRE(base.layers().size() == dcls.layers().size());
    auto x = Tensor::full({2, 3, 16, 16}, 0.5f);
    Tensor vb = x, vd = x;
    for (std::size_t i = 0; i < base.layers().size(); ++i) {
        vb = base.layers()[i]->forward(vb);
        vd = dcls.layers()[i]->forward(vd);
        CHECK(vb.shape() == vd.shape());
    }
}

TEST_CASE("tap layer output is NCHW with the documented 4x4 shape for 32x32 inputs") {
    auto cfg = small_config(Arch::baseline);
    cfg.image_size = 32;
    auto m = build(cfg);
    auto trace = m.forward_traced(Tensor::full({1, 3, 32, 32}, 0.25f));
    CHECK(trace.tap.shape() == Shape{1, 64, 4, 4});
    CHECK(trace.logits.shape() == Shape{1, 3});
}

TEST_CASE("unknown architecture tag is rejected") {
    CHECK_THROWS_AS(parse_arch("mystery_net"), std::invalid_argument);
}

TEST_CASE("training memorizes a tiny dataset") {
    auto cfg = small_config(Arch::baseline);
    cfg.epochs = 200;
    cfg.batch_size = 10;
    cfg.lr = 0.05f;
    auto set = toy_set(10, 16, 3, 42);
    auto model = build(cfg);
    auto log = train(model, set, cfg);
    REQUIRE(static_cast<int>(log.epochs.size()) == cfg.epochs);
    CHECK(top1(model, set) == doctest::Approx(1.0));
    // and it got there within the budget, not just at the end
    bool reached = false;
    for (const auto& e : log.epochs) reached = reached || e.train_accuracy == 1.0;
    CHECK(reached);
}

TEST_CASE("constant-output model scores the majority-free baseline on a balanced set") {
    auto cfg = small_config(Arch::baseline);
    auto model = build(cfg);
    for (auto& p : model.parameters())
        std::fill(p.tensor.mutable_data().begin(), p.tensor.mutable_data().end(), 0.0f);
    auto set = toy_set(9, 16, 3, 43);
    CHECK(top1(model, set) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("identical config reproduces the TrainLog bit for bit") {
    auto cfg = small_config(Arch::dcls);
    cfg.epochs = 3;
    auto set = toy_set(12, 16, 3, 44);
    auto m1 = build(cfg);
    auto m2 = build(cfg);
    auto l1 = train(m1, set, cfg);
    auto l2 = train(m2, set, cfg);
    REQUIRE(l1.epochs.size() == l2.epochs.size());
    for (std::size_t i = 0; i < l1.epochs.size(); ++i) {
        CHECK(l1.epochs[i].loss == l2.epochs[i].loss);
        CHECK(l1.epochs[i].train_accuracy == l2.epochs[i].train_accuracy);
    }
    auto p1 = flatten_params(m1);
    auto p2 = flatten_params(m2);
    for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p1[i] == p2[i]);
}

TEST_CASE("dcls positions actually move during training") {
    auto cfg = small_config(Arch::dcls);
    cfg.epochs = 30;
    cfg.lr = 0.05f;
    cfg.pos_lr_mult = 5.0f;
    auto set = toy_set(12, 16, 3, 45);
    auto model = build(cfg);
    std::vector<float> before;
    for (const auto& p : model.parameters())
        if (p.kind == ParamKind::dcls_position)
            before.insert(before.end(), p.tensor.data().begin(), p.tensor.data().end());
    train(model, set, cfg);
    std::vector<float> after;
    for (const auto& p : model.parameters())
        if (p.kind == ParamKind::dcls_position)
            after.insert(after.end(), p.tensor.data().begin(), p.tensor.data().end());
    REQUIRE(before.size() == after.size());
    float max_move = 0.0f;
    for (std::size_t i = 0; i < before.size(); ++i)
        max_move = std::max(max_move, std::fabs(after[i] - before[i]));
    CHECK(max_move > 0.1f);
    // and all positions stayed clamped to the support
    const float hi = static_cast<float>(cfg.kernel_size - 1);
    for (float v : after) CHECK((v >= 0.0f && v <= hi));
}

TEST_CASE("divergence aborts with the offending step index") {
    auto cfg = small_config(Arch::baseline);
    cfg.lr = 1e8f;
    cfg.epochs = 5;
    auto set = toy_set(12, 16, 3, 46);
    auto model = build(cfg);
    try {
        train(model, set, cfg);
        FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
        CHECK(e.step >= 0);
        CHECK(std::string(e.what()).find(std::to_string(e.step)) != std::string::npos);
    }
}

TEST_CASE("checkpoint round-trips parameters exactly") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "dclscam_test_ckpt";
    fs::create_directories(dir);
    const auto path = (dir / "model.ckpt").string();

    auto cfg = small_config(Arch::dcls);
    cfg.interp = Interp::gaussian;
    auto model = build(cfg);
    auto set = toy_set(8, 16, 3, 47);
    cfg.epochs = 2;
    train(model, set, cfg);
    save_checkpoint(path, model, cfg);

    auto loaded = load_checkpoint(path);
    CHECK(loaded.config.arch == Arch::dcls);
    CHECK(loaded.config.interp == Interp::gaussian);
    auto p1 = flatten_params(model);
    auto p2 = flatten_params(loaded.model);
    REQUIRE(p1.size() == p2.size());
    for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p1[i] == p2[i]);

    // a truncated file is a hard error
    std::error_code ec;
    const auto full = fs::file_size(path, ec);
    std::vector<char> bytes(static_cast<std::size_t>(full) / 2);
    {
        std::ifstream is(path, std::ios::binary);
        is.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    const auto trunc = (dir / "trunc.ckpt").string();
    {
        std::ofstream os(trunc, std::ios::binary);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    CHECK_THROWS(read_checkpoint_params(trunc));
    fs::remove_all(dir);
}

TEST_CASE("dcls frozen on the dilation grid trains identically to a dilated convolution") {
    auto cfg = small_config(Arch::dcls);
    cfg.kernel_size = 5;
    cfg.dcls_elements = 9;
    cfg.pos_lr_mult = 0.0f;  // freeze the grid
    cfg.epochs = 1;
    cfg.batch_size = 2;
    cfg.lr = 0.05f;
    auto set = toy_set(20, 16, 3, 48);  // 10 steps

    auto dcls_model = build(cfg);
    snap_positions_to_dilation_grid(dcls_model);
    auto twin = build_dilated_twin(dcls_model);

    std::vector<double> dcls_losses, twin_losses;
    train(dcls_model, set, cfg,
          [&](std::int64_t, double loss, const Model&) { dcls_losses.push_back(loss); });
    train(twin, set, cfg,
          [&](std::int64_t, double loss, const Model&) { twin_losses.push_back(loss); });

    REQUIRE(dcls_losses.size() == 10);
    REQUIRE(twin_losses.size() == 10);
    for (std::size_t i = 0; i < dcls_losses.size(); ++i)
        CHECK(std::fabs(dcls_losses[i] - twin_losses[i]) < 1e-5);

    // parameters stay paired step after step: compare the depthwise weights
    auto dcls_params = dcls_model.parameters();
    auto twin_params = twin.parameters();
    REQUIRE(dcls_params.size() >= twin_params.size());
    for (const auto& dp : dcls_params) {
        if (dp.kind != ParamKind::weight) continue;
        for (const auto& tp : twin_params)
            if (tp.name == dp.name && tp.tensor.numel() == dp.tensor.numel()) {
                for (std::int64_t i = 0; i < dp.tensor.numel(); ++i)
                    CHECK(std::fabs(dp.tensor.data()[static_cast<std::size_t>(i)] -
                                    tp.tensor.data()[static_cast<std::size_t>(i)]) < 1e-5);
            }
    }
}

TEST_CASE("rigged cancellation fixture has the advertised weights") {
    TrainConfig cfg;
    cfg.arch = Arch::rigged_cancellation;
    auto m = build(cfg);
    CHECK(m.classes() == 2);
    CHECK(m.tap_index() == 0);
    auto trace = m.forward_traced(Tensor::from_data({1, 3, 2, 2},
        // red plane [[1,0],[0,0]], green and blue zero
        {1.0f, 0.0f, 0.0f, 0.0f,  0.0f, 0.0f, 0.0f, 0.0f,  0.0f, 0.0f, 0.0f, 0.0f}));
    CHECK(trace.tap.data()[0] == 1.0f);    // channel 0: +1 * red
    CHECK(trace.tap.data()[4] == -2.0f);   // channel 1: -2 * red
    CHECK(trace.logits.data()[0] == doctest::Approx(-1.0f));
}
