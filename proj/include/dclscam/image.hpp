// image.hpp: 8-bit RGB raster shared by the CAM and I/O layers.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "dclscam/tensor.hpp"

namespace dclscam {

struct ImageU8 {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> rgb;  // height*width*3, row-major, interleaved

    bool valid() const {
        return height > 0 && width > 0 &&
               rgb.size() == static_cast<std::size_t>(height) * width * 3;
    }
};

// Planar [1,3,H,W] float tensor with values in [0,1] (byte / 255).
inline Tensor image_to_tensor(const ImageU8& img) {
    if (!img.valid()) throw std::invalid_argument("image_to_tensor: malformed image");
    const int h = img.height, w = img.width;
    std::vector<float> px(static_cast<std::size_t>(3) * h * w);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                px[(static_cast<std::size_t>(c) * h + y) * w + x] =
                    static_cast<float>(img.rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c]) /
                    255.0f;
    return Tensor::from_data({1, 3, h, w}, std::move(px));
}

}  // namespace dclscam
