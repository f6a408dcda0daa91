#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "eqvae/feature_grid.hpp"

namespace eqvae {

using Rng = std::mt19937_64;

// Derives an independent seed for worker/stream `stream` from a base seed (splitmix64).
uint64_t split_seed(uint64_t base, uint64_t stream) noexcept;

enum class TransformKind { kIdentity, kRotation, kScale, kComposed };

// tau = S(s_x, s_y) * R(theta) with theta restricted to quarter turns.
struct Transform2D {
  std::array<double, 4> matrix{1.0, 0.0, 0.0, 1.0};  // row-major 2x2
  TransformKind kind = TransformKind::kIdentity;
  double scale_x = 1.0;
  double scale_y = 1.0;
  int quarter_turns = 0;  // theta = quarter_turns * pi / 2, counter-clockwise

  double theta() const noexcept;
  bool is_identity() const noexcept { return kind == TransformKind::kIdentity; }
  // Stable human-readable key, e.g. "R(90)", "S(0.50)", "S(0.40,0.80)R(180)".
  std::string descriptor() const;
};

Transform2D make_transform(double scale_x, double scale_y, double theta);
Transform2D identity_transform();
Transform2D rotation_transform(int quarter_turns);
Transform2D scale_transform(double scale);

// Standard evaluation sets: rotations {pi/2, pi, 3pi/2} and scales {0.25, 0.5, 0.75}.
std::vector<Transform2D> rotation_set();
std::vector<Transform2D> scale_set();

struct GridShape {
  int64_t height = 0;
  int64_t width = 0;
  friend bool operator==(const GridShape&, const GridShape&) = default;
};

// Output spatial shape of apply_transform: rotate (quarter turns swap axes), then
// round(s * dim) half away from zero. Throws DegenerateOutputError below 1.
GridShape transformed_shape(GridShape in, const Transform2D& tau);
int64_t scaled_extent(int64_t extent, double scale);

// Catmull-Rom (a = -0.5) resampling taps for one axis, pixel-centre aligned,
// edge-replicate boundary.
struct ResampleTaps {
  int64_t in_size = 0;
  int64_t out_size = 0;
  std::vector<std::array<int64_t, 4>> index;
  std::vector<std::array<double, 4>> weight;

  static ResampleTaps build(int64_t in_size, int64_t out_size);
  bool is_identity() const noexcept { return in_size == out_size; }
  // Dense (out_size x in_size) row-major interpolation matrix.
  std::vector<double> dense() const;
};

double catmull_rom(double x) noexcept;

FeatureGrid rotate_quarter_turns(const FeatureGrid& grid, int quarter_turns);
FeatureGrid resize_bicubic(const FeatureGrid& grid, int64_t out_height, int64_t out_width);

FeatureGrid apply_transform(const FeatureGrid& grid, const Transform2D& tau);
// Rotates by tau then resamples to an explicit spatial size (used to keep pixel
// targets at exactly f times the transformed latent size).
FeatureGrid apply_transform_sized(const FeatureGrid& grid, const Transform2D& tau,
                                  GridShape out_shape);

struct TransformSamplerConfig {
  double p_alpha = 0.5;
  double scale_min = 0.25;
  double scale_max = 1.0;
  bool isotropic = true;
  bool enable_rotation = true;
  bool enable_scale = true;
  uint64_t seed = 0;

  void validate() const;
};

Transform2D sample_transform(Rng& rng, const TransformSamplerConfig& cfg);

}  // namespace eqvae
