#include "dclscam/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace dclscam {

namespace {

double check_finite(double v) {
    if (!std::isfinite(v)) throw NonFiniteError("finite_diff_check: f returned a non-finite value");
    return v;
}

}  // namespace

double finite_diff_check_against(const std::function<double()>& f, std::span<Tensor> params,
                                 const std::vector<std::vector<double>>& analytic, double eps) {
    if (analytic.size() != params.size())
        throw std::invalid_argument("finite_diff_check: analytic gradient count mismatch");
    double worst = 0.0;
    for (std::size_t p = 0; p < params.size(); ++p) {
        auto values = params[p].mutable_data();
        if (analytic[p].size() != values.size())
            throw std::invalid_argument("finite_diff_check: analytic gradient length mismatch");
        for (std::size_t i = 0; i < values.size(); ++i) {
            const float saved = values[i];
            const float plus = static_cast<float>(static_cast<double>(saved) + eps);
            const float minus = static_cast<float>(static_cast<double>(saved) - eps);
            values[i] = plus;
            const double f_plus = check_finite(f());
            values[i] = minus;
            const double f_minus = check_finite(f());
            values[i] = saved;
            // Divide by the perturbation actually applied after float
            // quantization, not the nominal 2*eps.
            const double numeric =
                (f_plus - f_minus) / (static_cast<double>(plus) - static_cast<double>(minus));
            const double a = analytic[p][i];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-6});
            worst = std::max(worst, std::fabs(a - numeric) / denom);
        }
    }
    return worst;
}

double finite_diff_check(const std::function<Tensor()>& f, std::span<Tensor> params, double eps) {
    for (auto& p : params) {
        if (!p.requires_grad())
            throw std::invalid_argument("finite_diff_check: parameter does not require grad");
        p.zero_grad();
    }
    Tensor loss = f();
    check_finite(loss.item());
    loss.backward();
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) {
        std::vector<double> g(static_cast<std::size_t>(p.numel()), 0.0);
        if (p.has_grad()) {
            auto gs = p.grad();
            for (std::size_t i = 0; i < gs.size(); ++i) g[i] = gs[i];
        }
        analytic.push_back(std::move(g));
    }
    auto f_value = [&f] { return f().item_f64(); };
    return finite_diff_check_against(f_value, params, analytic, eps);
}

}  // namespace dclscam
