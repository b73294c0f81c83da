#include "dclscam/dcls.hpp"

#include <algorithm>
#include <cmath>

namespace dclscam {

const char* interp_name(Interp mode) {
    return mode == Interp::bilinear ? "bilinear" : "gaussian";
}

Interp parse_interp(const std::string& name) {
    if (name == "bilinear") return Interp::bilinear;
    if (name == "gaussian") return Interp::gaussian;
    throw std::invalid_argument("unknown interpolation mode '" + name + "'");
}

void DclsKernelSpec::validate() const {
    if (channels < 1 || elements < 1 || kernel_size < 1)
        throw std::invalid_argument("dcls: channels, elements and kernel_size must be positive");
    if (elements > kernel_size * kernel_size)
        throw std::invalid_argument("dcls: m=" + std::to_string(elements) + " exceeds K*K=" +
                                    std::to_string(kernel_size * kernel_size));
    if (!weights.defined() || weights.shape() != Shape{channels, elements})
        throw std::invalid_argument("dcls: weights must be [channels, m]");
    if (!positions.defined() || positions.shape() != Shape{channels, elements, 2})
        throw std::invalid_argument("dcls: positions must be [channels, m, 2]");
    const float hi = static_cast<float>(kernel_size - 1);
    for (float p : positions.data())
        if (!(p >= 0.0f && p <= hi))
            throw std::invalid_argument("dcls: position " + std::to_string(p) +
                                        " outside [0, K-1]; clamp_positions before use");
    if (mode == Interp::gaussian) {
        if (!sigma.defined() || sigma.numel() != 1)
            throw std::invalid_argument("dcls: gaussian mode needs a scalar sigma");
        if (!(sigma.data()[0] > 0.0f))
            throw std::invalid_argument("dcls: sigma must be positive, got " +
                                        std::to_string(sigma.data()[0]));
    }
}

namespace {

using detail::TensorNode;

struct BilinearScatter {
    // The four surrounding integer cells and their area weights. Cells that
    // fall off the grid (only possible with zero coefficient, at p or q equal
    // to K-1) are marked invalid.
    int r0, c0, r1, c1;
    float fr, fc;
    bool r1_ok, c1_ok;
};

inline BilinearScatter bilinear_cells(float p, float q, int k) {
    BilinearScatter s{};
    s.r0 = static_cast<int>(std::floor(p));
    s.c0 = static_cast<int>(std::floor(q));
    s.fr = p - static_cast<float>(s.r0);
    s.fc = q - static_cast<float>(s.c0);
    s.r1 = s.r0 + 1;
    s.c1 = s.c0 + 1;
    s.r1_ok = s.r1 < k;
    s.c1_ok = s.c1 < k;
    return s;
}

}  // namespace

Tensor construct_kernel(const DclsKernelSpec& spec) {
    spec.validate();
    const int ch = spec.channels, m = spec.elements, k = spec.kernel_size;
    const int kk = k * k;
    const float* wd = spec.weights.data().data();
    const float* pd = spec.positions.data().data();
    const bool gaussian = spec.mode == Interp::gaussian;
    const double sig = gaussian ? static_cast<double>(spec.sigma.data()[0]) : 0.0;

    // Accumulate in 64-bit so the dense kernel is independent of element order.
    std::vector<double> acc(static_cast<std::size_t>(ch) * kk, 0.0);
    for (int c = 0; c < ch; ++c) {
        double* cell = acc.data() + static_cast<std::size_t>(c) * kk;
        for (int e = 0; e < m; ++e) {
            const float w = wd[c * m + e];
            const float p = pd[(c * m + e) * 2 + 0];
            const float q = pd[(c * m + e) * 2 + 1];
            if (!gaussian) {
                const BilinearScatter s = bilinear_cells(p, q, k);
                cell[s.r0 * k + s.c0] += static_cast<double>(w) * (1.0f - s.fr) * (1.0f - s.fc);
                if (s.c1_ok) cell[s.r0 * k + s.c1] += static_cast<double>(w) * (1.0f - s.fr) * s.fc;
                if (s.r1_ok) cell[s.r1 * k + s.c0] += static_cast<double>(w) * s.fr * (1.0f - s.fc);
                if (s.r1_ok && s.c1_ok) cell[s.r1 * k + s.c1] += static_cast<double>(w) * s.fr * s.fc;
            } else {
                double total = 0.0;
                for (int i = 0; i < k; ++i)
                    for (int j = 0; j < k; ++j) {
                        const double di = i - static_cast<double>(p);
                        const double dj = j - static_cast<double>(q);
                        total += std::exp(-(di * di + dj * dj) / (2.0 * sig * sig));
                    }
                for (int i = 0; i < k; ++i)
                    for (int j = 0; j < k; ++j) {
                        const double di = i - static_cast<double>(p);
                        const double dj = j - static_cast<double>(q);
                        const double g = std::exp(-(di * di + dj * dj) / (2.0 * sig * sig));
                        cell[i * k + j] += static_cast<double>(w) * g / total;
                    }
            }
        }
    }
    std::vector<float> out(acc.size());
    for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i]);

    const DclsKernelSpec cfg = spec;  // shallow copy; tensors share nodes
    auto backward = [cfg, ch, m, k, kk, gaussian, sig](TensorNode& self) {
        TensorNode* wn = cfg.weights.node();
        TensorNode* pn = cfg.positions.node();
        TensorNode* sn = gaussian ? cfg.sigma.node() : nullptr;
        const bool need_w = wn->requires_grad;
        const bool need_p = pn->requires_grad;
        const bool need_s = sn && sn->requires_grad;
        if (need_w) wn->ensure_grad();
        if (need_p) pn->ensure_grad();
        if (need_s) sn->ensure_grad();
        if (!(need_w || need_p || need_s)) return;
        const float* gk = self.grad.data();
        double gsig = 0.0;
        for (int c = 0; c < ch; ++c) {
            const float* gc = gk + static_cast<std::size_t>(c) * kk;
            for (int e = 0; e < m; ++e) {
                const float w = wn->data[c * m + e];
                const float p = pn->data[(c * m + e) * 2 + 0];
                const float q = pn->data[(c * m + e) * 2 + 1];
                if (!gaussian) {
                    const BilinearScatter s = bilinear_cells(p, q, k);
                    const float g00 = gc[s.r0 * k + s.c0];
                    const float g01 = s.c1_ok ? gc[s.r0 * k + s.c1] : 0.0f;
                    const float g10 = s.r1_ok ? gc[s.r1 * k + s.c0] : 0.0f;
                    const float g11 = (s.r1_ok && s.c1_ok) ? gc[s.r1 * k + s.c1] : 0.0f;
                    if (need_w)
                        wn->grad[c * m + e] += (1.0f - s.fr) * (1.0f - s.fc) * g00 +
                                               (1.0f - s.fr) * s.fc * g01 +
                                               s.fr * (1.0f - s.fc) * g10 + s.fr * s.fc * g11;
                    if (need_p) {
                        pn->grad[(c * m + e) * 2 + 0] +=
                            w * ((1.0f - s.fc) * (g10 - g00) + s.fc * (g11 - g01));
                        pn->grad[(c * m + e) * 2 + 1] +=
                            w * ((1.0f - s.fr) * (g01 - g00) + s.fr * (g11 - g10));
                    }
                } else {
                    // Recompute the normalized Gaussian footprint; cheaper than
                    // saving K*K doubles per element on the tape.
                    double total = 0.0;
                    double mean_di = 0.0, mean_dj = 0.0, mean_d2 = 0.0;
                    for (int i = 0; i < k; ++i)
                        for (int j = 0; j < k; ++j) {
                            const double di = i - static_cast<double>(p);
                            const double dj = j - static_cast<double>(q);
                            const double d2 = di * di + dj * dj;
                            const double g = std::exp(-d2 / (2.0 * sig * sig));
                            total += g;
                            mean_di += g * di;
                            mean_dj += g * dj;
                            mean_d2 += g * d2;
                        }
                    mean_di /= total;
                    mean_dj /= total;
                    mean_d2 /= total;
                    double gw = 0.0, gp = 0.0, gq = 0.0, gs = 0.0;
                    for (int i = 0; i < k; ++i)
                        for (int j = 0; j < k; ++j) {
                            const double di = i - static_cast<double>(p);
                            const double dj = j - static_cast<double>(q);
                            const double d2 = di * di + dj * dj;
                            const double u = std::exp(-d2 / (2.0 * sig * sig)) / total;
                            const double g = gc[i * k + j];
                            gw += g * u;
                            gp += g * u * (di - mean_di) / (sig * sig);
                            gq += g * u * (dj - mean_dj) / (sig * sig);
                            gs += g * u * (d2 - mean_d2) / (sig * sig * sig);
                        }
                    if (need_w) wn->grad[c * m + e] += static_cast<float>(gw);
                    if (need_p) {
                        pn->grad[(c * m + e) * 2 + 0] += static_cast<float>(w * gp);
                        pn->grad[(c * m + e) * 2 + 1] += static_cast<float>(w * gq);
                    }
                    if (need_s) gsig += w * gs;
                }
            }
        }
        if (need_s) sn->grad[0] += static_cast<float>(gsig);
    };

    std::vector<std::shared_ptr<TensorNode>> parents{spec.weights.node_ptr(), spec.positions.node_ptr()};
    if (gaussian) parents.push_back(spec.sigma.node_ptr());
    return Tensor(detail::make_op_node("construct_kernel", {ch, 1, k, k}, std::move(out),
                                       std::move(parents), std::move(backward)));
}

Tensor dcls_conv(const Tensor& input, const DclsKernelSpec& spec, int stride, int padding) {
    if (input.rank() != 4 || input.dim(1) != spec.channels)
        throw std::invalid_argument("dcls_conv: input " + shape_str(input.shape()) +
                                    " does not have the spec's " + std::to_string(spec.channels) +
                                    " channels");
    return conv2d(input, construct_kernel(spec), stride, padding, spec.channels);
}

void clamp_positions(DclsKernelSpec& spec) {
    const float hi = static_cast<float>(spec.kernel_size - 1);
    for (float& p : spec.positions.mutable_data()) p = std::clamp(p, 0.0f, hi);
    if (spec.mode == Interp::gaussian && spec.sigma.defined()) {
        float& s = spec.sigma.mutable_data()[0];
        s = std::max(s, 1e-3f);
    }
}

}  // namespace dclscam
