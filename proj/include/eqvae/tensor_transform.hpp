#pragma once

#include <torch/torch.h>

#include "eqvae/feature_grid.hpp"
#include "eqvae/transform2d.hpp"

namespace eqvae {

// Differentiable counterparts of the FeatureGrid resampler for (N, C, H, W)
// tensors. Both paths are built from the same ResampleTaps.

torch::Tensor resize_bicubic(const torch::Tensor& x, int64_t out_height, int64_t out_width);
torch::Tensor rotate_quarter_turns(const torch::Tensor& x, int quarter_turns);
torch::Tensor apply_transform(const torch::Tensor& x, const Transform2D& tau);
torch::Tensor apply_transform_sized(const torch::Tensor& x, const Transform2D& tau,
                                    GridShape out_shape);

inline GridShape spatial_shape(const torch::Tensor& x) { return {x.size(-2), x.size(-1)}; }

torch::Tensor to_tensor(const FeatureGrid& grid);  // (1, C, H, W) float32
FeatureGrid to_grid(const torch::Tensor& x);       // accepts (C, H, W) or (1, C, H, W)

}  // namespace eqvae
