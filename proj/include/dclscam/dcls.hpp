// dcls.hpp: dilated convolution with learnable spacings.
//
// A DCLS kernel stores m weights per channel together with continuous 2-D
// positions inside a KxK support. construct_kernel materializes them onto the
// dense grid (bilinear 4-cell scatter, or grid-normalized Gaussian) with
// gradients flowing to weights, positions and sigma, so the spacings
// themselves are learned by backpropagation.

#pragma once

#include "dclscam/tensor.hpp"

namespace dclscam {

enum class Interp { bilinear, gaussian };

const char* interp_name(Interp mode);
Interp parse_interp(const std::string& name);

struct DclsKernelSpec {
    int channels = 0;
    int elements = 0;     // m, at most K*K
    int kernel_size = 0;  // K: dense target grid is KxK
    Interp mode = Interp::bilinear;
    Tensor weights;    // [channels, m]
    Tensor positions;  // [channels, m, 2], (row, col) in [0, K-1]
    Tensor sigma;      // [1], positive; gaussian mode only

    void validate() const;
};

// Dense depthwise kernel [channels, 1, K, K]. Bilinear mode scatters each
// weight onto the four surrounding integer cells by fractional area; at exact
// integer coordinates the lower/left branch is used, so the whole weight lands
// on one cell. Gaussian mode spreads each weight as exp(-d^2 / (2 sigma^2))
// normalized over the grid, so per-element mass is conserved exactly.
// Positions must already lie inside [0, K-1] (call clamp_positions first).
Tensor construct_kernel(const DclsKernelSpec& spec);

// conv2d(input, construct_kernel(spec), stride, padding, groups=channels).
Tensor dcls_conv(const Tensor& input, const DclsKernelSpec& spec, int stride, int padding);

// Project positions back into [0, K-1] componentwise and keep sigma positive
// (>= 1e-3). Call after every optimizer step.
void clamp_positions(DclsKernelSpec& spec);

}  // namespace dclscam
