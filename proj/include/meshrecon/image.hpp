#pragma once

#include <string>

#include "meshrecon/tensor.hpp"

namespace meshrecon {

// Images are tensors in [0,1]: [3,H,W] for RGB, [H,W] for grayscale masks.

// Reads an 8-bit PNG.  Grayscale files come back as [H,W]; everything else
// (RGB, RGBA, palette) is converted to [3,H,W].
Tensor read_png(const std::string& path);

// Writes an 8-bit PNG ([3,H,W] -> RGB, [H,W] -> grayscale).  Values are
// clamped to [0,1] and quantized with round-half-to-even.
void write_png(const Tensor& img, const std::string& path);

// bilinear resample of a [c,H,W] image to [c,side,side]
Tensor resize_bilinear(const Tensor& img, std::size_t side);

// [H,W] image flipped left-right (also works per-channel for [3,H,W])
Tensor flip_horizontal(const Tensor& img);

// per-channel product of a [3,H,W] image with a [H,W] mask
Tensor apply_mask(const Tensor& rgb, const Tensor& mask);

}  // namespace meshrecon
