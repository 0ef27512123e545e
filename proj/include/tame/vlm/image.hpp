#pragma once

#include "tame/autodiff/tensor.hpp"

#include <random>
#include <vector>

namespace tame::vlm {

// Single-channel pixel grid with values in [0, 1].
using Image = ad::Matrix;

// Stacks images as rows of a (N x side*side) matrix, row-major pixels.
ad::Matrix stack_images(const std::vector<Image>& images);
Image unstack_image(const ad::Matrix& rows, ad::Index row, ad::Index side);

struct CropBox {
    double top = 0.0;
    double left = 0.0;
    double height = 0.0;
    double width = 0.0;
};

// Bilinear resample of the crop box back to the full grid.
Image resized_crop(const Image& img, const CropBox& box);
Image hflip(const Image& img);

// Random resized crop box (area fraction in [scale_lo, scale_hi], log-uniform
// aspect ratio in [3/4, 4/3]); falls back to the full image after 10 misses.
CropBox sample_crop(std::mt19937_64& rng, ad::Index side, double scale_lo, double scale_hi);

}  // namespace tame::vlm
