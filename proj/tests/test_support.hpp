// Shared helpers for the test suites: independent double-precision reference
// forwards (the oracle side of gradient checks and equivalence tests) and a
// conditioned gradient-check driver.

#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>
#include <vector>

#include "dclscam/dcls.hpp"
#include "dclscam/gradcheck.hpp"
#include "dclscam/tensor.hpp"

namespace testsup {

inline std::vector<float> random_values(std::mt19937& rng, std::size_t n, float lo, float hi) {
    std::uniform_real_distribution<float> dist(lo, hi);
    std::vector<float> v(n);
    for (auto& x : v) x = dist(rng);
    return v;
}

// Magnitudes bounded away from zero so ReLU kinks stay clear of eps probes.
inline std::vector<float> random_values_off_zero(std::mt19937& rng, std::size_t n,
                                                 float mag_lo = 0.2f, float mag_hi = 1.2f) {
    std::uniform_real_distribution<float> mag(mag_lo, mag_hi);
    std::bernoulli_distribution sign(0.5);
    std::vector<float> v(n);
    for (auto& x : v) x = (sign(rng) ? 1.0f : -1.0f) * mag(rng);
    return v;
}

// ---- double-precision reference forwards ----------------------------------------

// 6-loop convolution definition evaluated entirely in double.
template <typename XSpan, typename KSpan>
inline std::vector<double> ref_conv2d(const XSpan& x, int n, int c, int h, int w, const KSpan& k,
                                      int oc, int kh, int kw, int stride, int padding, int groups,
                                      int dilation = 1) {
    const int icg = c / groups;
    const int ocg = oc / groups;
    const int oh = (h + 2 * padding - ((kh - 1) * dilation + 1)) / stride + 1;
    const int ow = (w + 2 * padding - ((kw - 1) * dilation + 1)) / stride + 1;
    std::vector<double> y(static_cast<std::size_t>(n) * oc * oh * ow, 0.0);
    for (int ni = 0; ni < n; ++ni)
        for (int g = 0; g < groups; ++g)
            for (int o = g * ocg; o < (g + 1) * ocg; ++o)
                for (int yy = 0; yy < oh; ++yy)
                    for (int xx = 0; xx < ow; ++xx) {
                        double acc = 0.0;
                        for (int ic = 0; ic < icg; ++ic)
                            for (int ky = 0; ky < kh; ++ky)
                                for (int kx = 0; kx < kw; ++kx) {
                                    const int iy = yy * stride - padding + ky * dilation;
                                    const int ix = xx * stride - padding + kx * dilation;
                                    if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                                    acc += static_cast<double>(
                                               x[((static_cast<std::size_t>(ni) * c + g * icg + ic) * h +
                                                  iy) * w + ix]) *
                                           k[((static_cast<std::size_t>(o) * icg + ic) * kh + ky) * kw +
                                             kx];
                                }
                        y[((static_cast<std::size_t>(ni) * oc + o) * oh + yy) * ow + xx] = acc;
                    }
    return y;
}

// Same definition rounded to float, for output-equality comparisons.
inline std::vector<float> naive_conv2d(const std::vector<float>& x, int n, int c, int h, int w,
                                       const std::vector<float>& k, int oc, int kh, int kw,
                                       int stride, int padding, int groups, int dilation = 1) {
    const auto y = ref_conv2d(x, n, c, h, w, k, oc, kh, kw, stride, padding, groups, dilation);
    std::vector<float> out(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) out[i] = static_cast<float>(y[i]);
    return out;
}

inline double ref_softmax_cross_entropy(const std::vector<double>& logits, int n, int k,
                                        const std::vector<int>& labels) {
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const double* row = logits.data() + static_cast<std::size_t>(i) * k;
        double m = row[0];
        for (int j = 1; j < k; ++j) m = std::max(m, row[j]);
        double z = 0.0;
        for (int j = 0; j < k; ++j) z += std::exp(row[j] - m);
        loss -= row[labels[static_cast<std::size_t>(i)]] - m - std::log(z);
    }
    return loss / n;
}

// Dense kernel from a DCLS spec, evaluated in double from the interpolation
// formulas directly (bilinear 4-cell scatter / grid-normalized Gaussian).
inline std::vector<double> ref_construct_kernel(const dclscam::DclsKernelSpec& spec) {
    const int ch = spec.channels, m = spec.elements, k = spec.kernel_size;
    auto wd = spec.weights.data();
    auto pd = spec.positions.data();
    std::vector<double> out(static_cast<std::size_t>(ch) * k * k, 0.0);
    for (int c = 0; c < ch; ++c)
        for (int e = 0; e < m; ++e) {
            const double w = wd[c * m + e];
            const double p = pd[(c * m + e) * 2 + 0];
            const double q = pd[(c * m + e) * 2 + 1];
            double* cell = out.data() + static_cast<std::size_t>(c) * k * k;
            if (spec.mode == dclscam::Interp::bilinear) {
                const int r0 = static_cast<int>(std::floor(p));
                const int c0 = static_cast<int>(std::floor(q));
                const double fr = p - r0, fc = q - c0;
                cell[r0 * k + c0] += w * (1 - fr) * (1 - fc);
                if (c0 + 1 < k) cell[r0 * k + c0 + 1] += w * (1 - fr) * fc;
                if (r0 + 1 < k) cell[(r0 + 1) * k + c0] += w * fr * (1 - fc);
                if (r0 + 1 < k && c0 + 1 < k) cell[(r0 + 1) * k + c0 + 1] += w * fr * fc;
            } else {
                const double sig = spec.sigma.data()[0];
                double total = 0.0;
                for (int i = 0; i < k; ++i)
                    for (int j = 0; j < k; ++j)
                        total += std::exp(-((i - p) * (i - p) + (j - q) * (j - q)) / (2 * sig * sig));
                for (int i = 0; i < k; ++i)
                    for (int j = 0; j < k; ++j)
                        cell[i * k + j] +=
                            w * std::exp(-((i - p) * (i - p) + (j - q) * (j - q)) / (2 * sig * sig)) /
                            total;
            }
        }
    return out;
}

// ---- conditioned gradient checks -------------------------------------------------

struct GradCheckFixture {
    std::function<dclscam::Tensor()> f;  // float32 op pipeline; analytic side via backward
    std::function<double()> f64;         // independent double forward for the numeric side
    std::vector<dclscam::Tensor> params;
    // Extra acceptance predicate (e.g. pre-activation values clear of kinks).
    std::function<bool()> well_posed = [] { return true; };
};

inline double run_gradcheck(GradCheckFixture& fx, double eps) {
    if (!fx.f64) return dclscam::finite_diff_check(fx.f, fx.params, eps);
    for (auto& p : fx.params) p.zero_grad();
    dclscam::Tensor loss = fx.f();
    loss.backward();
    std::vector<std::vector<double>> analytic;
    analytic.reserve(fx.params.size());
    for (auto& p : fx.params) {
        std::vector<double> g(static_cast<std::size_t>(p.numel()), 0.0);
        if (p.has_grad()) {
            auto gs = p.grad();
            for (std::size_t i = 0; i < gs.size(); ++i) g[i] = gs[i];
        }
        analytic.push_back(std::move(g));
    }
    return dclscam::finite_diff_check_against(fx.f64, fx.params, analytic, eps);
}

// Float32 forwards cannot resolve gradients arbitrarily close to zero, so draw
// fixtures until every analytic gradient is either exactly zero (a hard mask)
// or at least g_min in magnitude, then run the check on the surviving fixture.
inline double conditioned_gradcheck(std::uint32_t base_seed,
                                    const std::function<GradCheckFixture(std::mt19937&)>& make,
                                    double g_min = 1e-3, double eps = 1e-3, int max_tries = 200) {
    for (int t = 0; t < max_tries; ++t) {
        std::mt19937 rng(base_seed + static_cast<std::uint32_t>(t) * 7919u);
        GradCheckFixture fx = make(rng);
        if (!fx.well_posed()) continue;
        for (auto& p : fx.params) p.zero_grad();
        dclscam::Tensor loss = fx.f();
        loss.backward();
        const double floor = g_min * std::max(1.0, std::fabs(loss.item_f64()));
        bool conditioned = true;
        for (auto& p : fx.params) {
            if (!p.has_grad()) { conditioned = false; break; }
            for (float g : p.grad())
                if (g != 0.0f && std::fabs(g) < floor) { conditioned = false; break; }
            if (!conditioned) break;
        }
        if (!conditioned) continue;
        return run_gradcheck(fx, eps);
    }
    throw std::runtime_error("conditioned_gradcheck: no well-conditioned fixture found");
}

}  // namespace testsup
