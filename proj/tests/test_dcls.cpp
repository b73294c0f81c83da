#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "dclscam/dcls.hpp"
#include "dclscam/gradcheck.hpp"
#include "test_support.hpp"

using namespace dclscam;
using testsup::conditioned_gradcheck;
using testsup::GradCheckFixture;
using testsup::random_values;
using testsup::random_values_off_zero;
using testsup::ref_construct_kernel;
using testsup::ref_conv2d;

namespace {

// Positions with fractional parts in [0.1, 0.9]: clear of the bilinear kinks
// at integer coordinates.
std::vector<float> off_kink_positions(std::mt19937& rng, int channels, int m, int k) {
    std::uniform_int_distribution<int> cell(0, k - 2);
    std::uniform_real_distribution<float> frac(0.1f, 0.9f);
    std::vector<float> pos(static_cast<std::size_t>(channels) * m * 2);
    for (auto& p : pos) p = static_cast<float>(cell(rng)) + frac(rng);
    return pos;
}

DclsKernelSpec make_spec(int channels, int m, int k, Interp mode, std::vector<float> weights,
                         std::vector<float> positions, float sigma = 0.5f) {
    DclsKernelSpec spec;
    spec.channels = channels;
    spec.elements = m;
    spec.kernel_size = k;
    spec.mode = mode;
    spec.weights = Tensor::param({channels, m}, std::move(weights));
    spec.positions = Tensor::param({channels, m, 2}, std::move(positions));
    if (mode == Interp::gaussian) spec.sigma = Tensor::param({1}, {sigma});
    return spec;
}

}  // namespace

TEST_CASE("construct_kernel bilinear at an integer position is a one-hot cell") {
    auto spec = make_spec(1, 1, 4, Interp::bilinear, {1.0f}, {2.0f, 0.0f});
    auto k = construct_kernel(spec);
    REQUIRE(k.shape() == Shape{1, 1, 4, 4});
    for (int i = 0; i < 16; ++i) CHECK(k.data()[static_cast<std::size_t>(i)] == (i == 2 * 4 + 0 ? 1.0f : 0.0f));
}

TEST_CASE("construct_kernel bilinear splits a half-integer position evenly") {
    auto spec = make_spec(1, 1, 4, Interp::bilinear, {1.0f}, {1.5f, 1.5f});
    auto k = construct_kernel(spec);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) {
            const bool corner = (r == 1 || r == 2) && (c == 1 || c == 2);
            CHECK(k.data()[static_cast<std::size_t>(r) * 4 + c] == (corner ? 0.25f : 0.0f));
        }
}

TEST_CASE("construct_kernel gaussian concentrates and normalizes") {
    auto spec = make_spec(1, 1, 5, Interp::gaussian, {1.0f}, {2.0f, 2.0f}, 0.1f);
    auto k = construct_kernel(spec);
    double sum = 0.0;
    for (float v : k.data()) sum += v;
    CHECK(std::fabs(sum - 1.0) < 1e-6);
    CHECK(k.data()[2 * 5 + 2] >= 0.99f);

    // independent evaluation of the normalized Gaussian on the grid
    const auto ref = ref_construct_kernel(spec);
    for (std::size_t i = 0; i < 25; ++i) CHECK(std::fabs(k.data()[i] - ref[i]) < 1e-6);
}

TEST_CASE("construct_kernel conserves mass per element") {
    std::mt19937 rng(7);
    const int ch = 3, m = 4, K = 5;
    auto weights = random_values_off_zero(rng, ch * m);
    auto spec = make_spec(ch, m, K, Interp::bilinear, weights, off_kink_positions(rng, ch, m, K));
    auto k = construct_kernel(spec);
    for (int c = 0; c < ch; ++c) {
        double kernel_sum = 0.0, weight_sum = 0.0;
        for (int i = 0; i < K * K; ++i) kernel_sum += k.data()[static_cast<std::size_t>(c) * K * K + i];
        for (int e = 0; e < m; ++e) weight_sum += weights[static_cast<std::size_t>(c) * m + e];
        CHECK(std::fabs(kernel_sum - weight_sum) < 1e-6);
    }

    auto gspec = make_spec(ch, m, K, Interp::gaussian, weights,
                           off_kink_positions(rng, ch, m, K), 0.8f);
    auto gk = construct_kernel(gspec);
    for (int c = 0; c < ch; ++c) {
        double kernel_sum = 0.0, weight_sum = 0.0;
        for (int i = 0; i < K * K; ++i) kernel_sum += gk.data()[static_cast<std::size_t>(c) * K * K + i];
        for (int e = 0; e < m; ++e) weight_sum += weights[static_cast<std::size_t>(c) * m + e];
        CHECK(std::fabs(kernel_sum - weight_sum) < 1e-6);
    }
}

TEST_CASE("construct_kernel is permutation-equivariant over elements") {
    std::mt19937 rng(8);
    const int ch = 2, m = 6, K = 5;
    auto weights = random_values(rng, ch * m, -1.0f, 1.0f);
    auto positions = off_kink_positions(rng, ch, m, K);
    auto base = construct_kernel(make_spec(ch, m, K, Interp::bilinear, weights, positions));

    std::vector<int> perm(m);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<float> sw(weights.size()), sp(positions.size());
    for (int c = 0; c < ch; ++c)
        for (int e = 0; e < m; ++e) {
            const auto src = static_cast<std::size_t>(c) * m + static_cast<std::size_t>(perm[static_cast<std::size_t>(e)]);
            const auto dst = static_cast<std::size_t>(c) * m + e;
            sw[dst] = weights[src];
            sp[dst * 2 + 0] = positions[src * 2 + 0];
            sp[dst * 2 + 1] = positions[src * 2 + 1];
        }
    auto shuffled = construct_kernel(make_spec(ch, m, K, Interp::bilinear, sw, sp));
    for (std::int64_t i = 0; i < base.numel(); ++i)
        CHECK(base.data()[static_cast<std::size_t>(i)] == shuffled.data()[static_cast<std::size_t>(i)]);
}

TEST_CASE("construct_kernel validates positions and sigma") {
    CHECK_THROWS_AS(construct_kernel(make_spec(1, 1, 5, Interp::bilinear, {1.0f}, {5.2f, 0.0f})),
                    std::invalid_argument);
    CHECK_THROWS_AS(construct_kernel(make_spec(1, 1, 5, Interp::bilinear, {1.0f}, {-0.3f, 0.0f})),
                    std::invalid_argument);
    CHECK_THROWS_AS(construct_kernel(make_spec(1, 1, 5, Interp::gaussian, {1.0f}, {2.0f, 2.0f}, -1.0f)),
                    std::invalid_argument);
    CHECK_THROWS_AS(construct_kernel(make_spec(1, 30, 5, Interp::bilinear,
                                               std::vector<float>(30, 0.0f),
                                               std::vector<float>(60, 0.0f))),
                    std::invalid_argument);
}

TEST_CASE("dcls_conv with integer grid positions equals a dilated depthwise convolution") {
    std::mt19937 rng(9);
    const int ch = 2, K = 5;
    auto weights = random_values(rng, ch * 9, -1.0f, 1.0f);
    std::vector<float> grid(static_cast<std::size_t>(ch) * 9 * 2);
    for (int c = 0; c < ch; ++c)
        for (int e = 0; e < 9; ++e) {
            grid[(static_cast<std::size_t>(c) * 9 + e) * 2 + 0] = static_cast<float>(2 * (e / 3));
            grid[(static_cast<std::size_t>(c) * 9 + e) * 2 + 1] = static_cast<float>(2 * (e % 3));
        }
    auto spec = make_spec(ch, 9, K, Interp::bilinear, weights, grid);

    // The dense kernel is exactly the sparse dilation-2 scatter.
    auto kernel = construct_kernel(spec);
    for (int c = 0; c < ch; ++c)
        for (int r = 0; r < K; ++r)
            for (int q = 0; q < K; ++q) {
                const float v = kernel.data()[(static_cast<std::size_t>(c) * K + r) * K + q];
                if (r % 2 == 0 && q % 2 == 0)
                    CHECK(v == weights[static_cast<std::size_t>(c) * 9 + (r / 2) * 3 + (q / 2)]);
                else
                    CHECK(v == 0.0f);
            }

    auto xv = random_values(rng, ch * 8 * 8, -1.0f, 1.0f);
    auto x = Tensor::from_data({1, ch, 8, 8}, xv);
    auto y = dcls_conv(x, spec, 1, 2);
    const auto oracle = ref_conv2d(std::span<const float>(xv), 1, ch, 8, 8,
                                   std::span<const float>(weights), ch, 3, 3, 1, 2, ch, 2);
    REQUIRE(y.numel() == static_cast<std::int64_t>(oracle.size()));
    for (std::size_t i = 0; i < oracle.size(); ++i)
        CHECK(std::fabs(y.data()[i] - oracle[i]) < 1e-6);
}

TEST_CASE("dcls_conv with zero weights gives zero output and zero position gradients") {
    std::mt19937 rng(10);
    const int ch = 2, m = 4, K = 5;
    auto spec = make_spec(ch, m, K, Interp::bilinear, std::vector<float>(ch * m, 0.0f),
                          off_kink_positions(rng, ch, m, K));
    auto x = Tensor::from_data({1, ch, 6, 6}, random_values(rng, ch * 36, -1.0f, 1.0f));
    auto y = dcls_conv(x, spec, 1, 2);
    for (float v : y.data()) CHECK(v == 0.0f);
    std::vector<float> w(static_cast<std::size_t>(y.numel()), 1.0f);
    weighted_sum(y, w).backward();
    for (float g : spec.positions.grad()) CHECK(g == 0.0f);
}

TEST_CASE("position gradient of a weight-zero element is exactly zero") {
    std::mt19937 rng(11);
    const int ch = 1, m = 3, K = 5;
    auto weights = random_values_off_zero(rng, m);
    weights[1] = 0.0f;
    auto spec = make_spec(ch, m, K, Interp::bilinear, weights, off_kink_positions(rng, ch, m, K));
    auto x = Tensor::from_data({1, ch, 6, 6}, random_values(rng, 36, -1.0f, 1.0f));
    auto y = dcls_conv(x, spec, 1, 2);
    std::vector<float> w(static_cast<std::size_t>(y.numel()), 1.0f);
    weighted_sum(y, w).backward();
    auto pg = spec.positions.grad();
    CHECK(pg[2] == 0.0f);
    CHECK(pg[3] == 0.0f);
}

TEST_CASE("construct_kernel gradients match finite differences (bilinear)") {
    auto make = [](std::mt19937& rng) {
        const int ch = 2, m = 3, K = 4;
        auto spec = make_spec(ch, m, K, Interp::bilinear, random_values_off_zero(rng, ch * m),
                              off_kink_positions(rng, ch, m, K));
        auto w = random_values(rng, ch * K * K, 0.5f, 1.5f);
        GradCheckFixture fx;
        fx.f = [spec, w] { return weighted_sum(construct_kernel(spec), w); };
        fx.f64 = [spec, w] {
            const auto k = ref_construct_kernel(spec);
            double acc = 0.0;
            for (std::size_t i = 0; i < k.size(); ++i) acc += w[i] * k[i];
            return acc;
        };
        fx.params = {spec.weights, spec.positions};
        return fx;
    };
    CHECK(conditioned_gradcheck(21, make, 1e-4) < 1e-3);
}

TEST_CASE("construct_kernel gradients match finite differences (gaussian, incl. sigma)") {
    auto make = [](std::mt19937& rng) {
        const int ch = 2, m = 3, K = 4;
        auto spec = make_spec(ch, m, K, Interp::gaussian, random_values_off_zero(rng, ch * m),
                              off_kink_positions(rng, ch, m, K), 0.7f);
        auto w = random_values(rng, ch * K * K, 0.5f, 1.5f);
        GradCheckFixture fx;
        fx.f = [spec, w] { return weighted_sum(construct_kernel(spec), w); };
        fx.f64 = [spec, w] {
            const auto k = ref_construct_kernel(spec);
            double acc = 0.0;
            for (std::size_t i = 0; i < k.size(); ++i) acc += w[i] * k[i];
            return acc;
        };
        fx.params = {spec.weights, spec.positions, spec.sigma};
        return fx;
    };
    CHECK(conditioned_gradcheck(22, make, 1e-4) < 1e-3);
}

TEST_CASE("dcls_conv gradients reach weights and positions through the tape") {
    auto make = [](std::mt19937& rng) {
        const int ch = 2, m = 3, K = 5;
        auto spec = make_spec(ch, m, K, Interp::bilinear, random_values_off_zero(rng, ch * m),
                              off_kink_positions(rng, ch, m, K));
        auto xv = random_values_off_zero(rng, ch * 6 * 6);
        auto x = Tensor::from_data({1, ch, 6, 6}, xv);
        auto w = random_values(rng, ch * 6 * 6, 0.5f, 1.5f);
        GradCheckFixture fx;
        fx.f = [spec, x, w] { return weighted_sum(dcls_conv(x, spec, 1, 2), w); };
        fx.f64 = [spec, xv, w] {
            const int chn = spec.channels;
            const auto kernel = ref_construct_kernel(spec);
            const auto y = ref_conv2d(std::span<const float>(xv), 1, chn, 6, 6,
                                      std::span<const double>(kernel), chn, 5, 5, 1, 2, chn);
            double acc = 0.0;
            for (std::size_t i = 0; i < y.size(); ++i) acc += w[i] * y[i];
            return acc;
        };
        fx.params = {spec.weights, spec.positions};
        return fx;
    };
    CHECK(conditioned_gradcheck(23, make, 1e-4) < 1e-3);
}

TEST_CASE("clamp_positions projects into the support") {
    auto spec = make_spec(1, 2, 5, Interp::bilinear, {1.0f, 1.0f}, {-0.3f, 5.2f, 2.0f, 3.5f});
    clamp_positions(spec);
    auto p = spec.positions.data();
    CHECK(p[0] == 0.0f);
    CHECK(p[1] == 4.0f);
    CHECK(p[2] == 2.0f);  // in-range coordinates unchanged
    CHECK(p[3] == 3.5f);

    auto g = make_spec(1, 1, 5, Interp::gaussian, {1.0f}, {1.0f, 1.0f}, 1e-7f);
    clamp_positions(g);
    CHECK(g.sigma.data()[0] == 1e-3f);
}
