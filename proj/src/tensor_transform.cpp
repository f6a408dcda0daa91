#include "eqvae/tensor_transform.hpp"

#include <vector>

#include "eqvae/error.hpp"

namespace eqvae {

namespace {

torch::Tensor interpolation_matrix(int64_t in_size, int64_t out_size, const torch::TensorOptions& opts) {
  const auto dense = ResampleTaps::build(in_size, out_size).dense();
  return torch::tensor(dense, torch::kFloat64).reshape({out_size, in_size}).to(opts);
}

}  // namespace

torch::Tensor resize_bicubic(const torch::Tensor& x, int64_t out_height, int64_t out_width) {
  if (out_height < 1 || out_width < 1) throw DegenerateOutputError("resize target has a zero-sized axis");
  const int64_t h = x.size(-2);
  const int64_t w = x.size(-1);
  auto opts = x.options().requires_grad(false);
  torch::Tensor out = x;
  if (out_height != h) out = torch::matmul(interpolation_matrix(h, out_height, opts), out);
  if (out_width != w) out = torch::matmul(out, interpolation_matrix(w, out_width, opts).t());
  return out;
}

torch::Tensor rotate_quarter_turns(const torch::Tensor& x, int quarter_turns) {
  const int k = ((quarter_turns % 4) + 4) % 4;
  if (k == 0) return x;
  return torch::rot90(x, k, {-2, -1});
}

torch::Tensor apply_transform(const torch::Tensor& x, const Transform2D& tau) {
  if (tau.is_identity()) return x;
  const GridShape out = transformed_shape(spatial_shape(x), tau);
  return resize_bicubic(rotate_quarter_turns(x, tau.quarter_turns), out.height, out.width);
}

torch::Tensor apply_transform_sized(const torch::Tensor& x, const Transform2D& tau,
                                    GridShape out_shape) {
  return resize_bicubic(rotate_quarter_turns(x, tau.quarter_turns), out_shape.height,
                        out_shape.width);
}

torch::Tensor to_tensor(const FeatureGrid& grid) {
  auto values = grid.values();
  return torch::from_blob(const_cast<float*>(values.data()),
                          {1, grid.channels(), grid.height(), grid.width()}, torch::kFloat32)
      .clone();
}

FeatureGrid to_grid(const torch::Tensor& x) {
  auto t = x.detach().to(torch::kCPU, torch::kFloat32).contiguous();
  if (t.dim() == 4) {
    if (t.size(0) != 1) throw ShapeError("to_grid expects a single-item batch");
    t = t.squeeze(0);
  }
  if (t.dim() != 3) throw ShapeError("to_grid expects a (C, H, W) tensor");
  const float* p = t.data_ptr<float>();
  std::vector<float> values(p, p + t.numel());
  return FeatureGrid(t.size(0), t.size(1), t.size(2), std::move(values));
}

}  // namespace eqvae
