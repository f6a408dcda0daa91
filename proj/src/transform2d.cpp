#include "eqvae/transform2d.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "eqvae/error.hpp"

namespace eqvae {

uint64_t split_seed(uint64_t base, uint64_t stream) noexcept {
  uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double Transform2D::theta() const noexcept { return quarter_turns * std::numbers::pi / 2.0; }

std::string Transform2D::descriptor() const {
  if (is_identity()) return "I";
  std::string out;
  char buf[64];
  if (scale_x != 1.0 || scale_y != 1.0) {
    if (scale_x == scale_y) {
      std::snprintf(buf, sizeof(buf), "S(%.2f)", scale_x);
    } else {
      std::snprintf(buf, sizeof(buf), "S(%.2f,%.2f)", scale_x, scale_y);
    }
    out += buf;
  }
  if (quarter_turns != 0) {
    std::snprintf(buf, sizeof(buf), "R(%d)", quarter_turns * 90);
    out += buf;
  }
  return out;
}

namespace {

constexpr std::array<int, 4> kCos{1, 0, -1, 0};
constexpr std::array<int, 4> kSin{0, 1, 0, -1};

Transform2D compose(double sx, double sy, int turns) {
  Transform2D t;
  t.scale_x = sx;
  t.scale_y = sy;
  t.quarter_turns = turns;
  const double c = kCos[turns];
  const double s = kSin[turns];
  t.matrix = {sx * c, -sx * s, sy * s, sy * c};
  const bool unit_scale = sx == 1.0 && sy == 1.0;
  if (unit_scale && turns == 0) {
    t.kind = TransformKind::kIdentity;
  } else if (unit_scale) {
    t.kind = TransformKind::kRotation;
  } else if (turns == 0) {
    t.kind = TransformKind::kScale;
  } else {
    t.kind = TransformKind::kComposed;
  }
  return t;
}

void check_scale(double s, const char* name) {
  if (!(s > 0.0 && s <= 1.0)) {
    throw DomainError(std::string(name) + " must lie in (0, 1], got " + std::to_string(s));
  }
}

}  // namespace

Transform2D make_transform(double scale_x, double scale_y, double theta) {
  check_scale(scale_x, "s_x");
  check_scale(scale_y, "s_y");
  const double turns = theta / (std::numbers::pi / 2.0);
  const double nearest = std::round(turns);
  if (!std::isfinite(theta) || std::abs(turns - nearest) > 1e-9 || nearest < 0.0 || nearest > 3.0) {
    throw DomainError("theta must be one of {0, pi/2, pi, 3pi/2}, got " + std::to_string(theta));
  }
  return compose(scale_x, scale_y, static_cast<int>(nearest));
}

Transform2D identity_transform() { return compose(1.0, 1.0, 0); }

Transform2D rotation_transform(int quarter_turns) {
  if (quarter_turns < 0 || quarter_turns > 3) throw DomainError("quarter_turns must be in [0, 3]");
  return compose(1.0, 1.0, quarter_turns);
}

Transform2D scale_transform(double scale) {
  check_scale(scale, "s");
  return compose(scale, scale, 0);
}

std::vector<Transform2D> rotation_set() {
  return {rotation_transform(1), rotation_transform(2), rotation_transform(3)};
}

std::vector<Transform2D> scale_set() {
  return {scale_transform(0.25), scale_transform(0.50), scale_transform(0.75)};
}

int64_t scaled_extent(int64_t extent, double scale) {
  if (scale == 1.0) return extent;
  // std::round rounds half away from zero.
  const auto n = static_cast<int64_t>(std::round(scale * static_cast<double>(extent)));
  if (n < 1) {
    throw DegenerateOutputError("scaling extent " + std::to_string(extent) + " by " +
                                std::to_string(scale) + " rounds to zero");
  }
  return n;
}

GridShape transformed_shape(GridShape in, const Transform2D& tau) {
  if (tau.quarter_turns % 2 == 1) std::swap(in.height, in.width);
  return {scaled_extent(in.height, tau.scale_y), scaled_extent(in.width, tau.scale_x)};
}

double catmull_rom(double x) noexcept {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

ResampleTaps ResampleTaps::build(int64_t in_size, int64_t out_size) {
  if (in_size < 1 || out_size < 1) throw DegenerateOutputError("resample sizes must be >= 1");
  ResampleTaps taps;
  taps.in_size = in_size;
  taps.out_size = out_size;
  taps.index.resize(static_cast<size_t>(out_size));
  taps.weight.resize(static_cast<size_t>(out_size));
  const double ratio = static_cast<double>(in_size) / static_cast<double>(out_size);
  for (int64_t i = 0; i < out_size; ++i) {
    const double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    const double base = std::floor(src);
    const double t = src - base;
    const auto i0 = static_cast<int64_t>(base);
    const std::array<double, 4> w{catmull_rom(1.0 + t), catmull_rom(t), catmull_rom(1.0 - t),
                                  catmull_rom(2.0 - t)};
    for (int k = 0; k < 4; ++k) {
      taps.index[i][k] = std::clamp<int64_t>(i0 - 1 + k, 0, in_size - 1);
      taps.weight[i][k] = w[k];
    }
  }
  return taps;
}

std::vector<double> ResampleTaps::dense() const {
  std::vector<double> m(static_cast<size_t>(out_size * in_size), 0.0);
  for (int64_t i = 0; i < out_size; ++i) {
    for (int k = 0; k < 4; ++k) m[i * in_size + index[i][k]] += weight[i][k];
  }
  return m;
}

FeatureGrid rotate_quarter_turns(const FeatureGrid& grid, int quarter_turns) {
  const int k = ((quarter_turns % 4) + 4) % 4;
  if (k == 0) return grid;
  const int64_t c = grid.channels();
  const int64_t h = grid.height();
  const int64_t w = grid.width();
  const int64_t oh = (k % 2 == 1) ? w : h;
  const int64_t ow = (k % 2 == 1) ? h : w;
  FeatureGrid out(c, oh, ow);
  out.value_range = grid.value_range;
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t i = 0; i < oh; ++i) {
      for (int64_t j = 0; j < ow; ++j) {
        float v = 0.0f;
        switch (k) {
          case 1: v = grid.at(ch, j, w - 1 - i); break;
          case 2: v = grid.at(ch, h - 1 - i, w - 1 - j); break;
          default: v = grid.at(ch, h - 1 - j, i); break;
        }
        out.at(ch, i, j) = v;
      }
    }
  }
  return out;
}

FeatureGrid resize_bicubic(const FeatureGrid& grid, int64_t out_height, int64_t out_width) {
  const int64_t c = grid.channels();
  const int64_t h = grid.height();
  const int64_t w = grid.width();
  if (out_height == h && out_width == w) return grid;

  FeatureGrid rows(c, out_height, w);
  if (out_height == h) {
    rows = grid;
  } else {
    const auto taps = ResampleTaps::build(h, out_height);
    for (int64_t ch = 0; ch < c; ++ch) {
      for (int64_t i = 0; i < out_height; ++i) {
        for (int64_t x = 0; x < w; ++x) {
          double acc = 0.0;
          for (int k = 0; k < 4; ++k) acc += taps.weight[i][k] * grid.at(ch, taps.index[i][k], x);
          rows.at(ch, i, x) = static_cast<float>(acc);
        }
      }
    }
  }
  if (out_width == w) {
    rows.value_range = grid.value_range;
    return rows;
  }
  const auto taps = ResampleTaps::build(w, out_width);
  FeatureGrid out(c, out_height, out_width);
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t y = 0; y < out_height; ++y) {
      for (int64_t j = 0; j < out_width; ++j) {
        double acc = 0.0;
        for (int k = 0; k < 4; ++k) acc += taps.weight[j][k] * rows.at(ch, y, taps.index[j][k]);
        out.at(ch, y, j) = static_cast<float>(acc);
      }
    }
  }
  out.value_range = grid.value_range;
  return out;
}

FeatureGrid apply_transform(const FeatureGrid& grid, const Transform2D& tau) {
  if (tau.is_identity()) return grid;
  const GridShape out = transformed_shape({grid.height(), grid.width()}, tau);
  return resize_bicubic(rotate_quarter_turns(grid, tau.quarter_turns), out.height, out.width);
}

FeatureGrid apply_transform_sized(const FeatureGrid& grid, const Transform2D& tau,
                                  GridShape out_shape) {
  if (out_shape.height < 1 || out_shape.width < 1) {
    throw DegenerateOutputError("requested output shape has a zero-sized axis");
  }
  return resize_bicubic(rotate_quarter_turns(grid, tau.quarter_turns), out_shape.height,
                        out_shape.width);
}

void TransformSamplerConfig::validate() const {
  if (!(p_alpha >= 0.0 && p_alpha <= 1.0)) throw ConfigError("p_alpha must lie in [0, 1]");
  if (!(scale_min > 0.0 && scale_min < scale_max && scale_max <= 1.0)) {
    throw ConfigError("scale bounds must satisfy 0 < scale_min < scale_max <= 1");
  }
  if (p_alpha < 1.0 && !enable_rotation && !enable_scale) {
    throw ConfigError("at least one of rotation/scale must be enabled when p_alpha < 1");
  }
}

Transform2D sample_transform(Rng& rng, const TransformSamplerConfig& cfg) {
  cfg.validate();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (unit(rng) < cfg.p_alpha) return identity_transform();
  double sx = 1.0;
  double sy = 1.0;
  int turns = 0;
  if (cfg.enable_scale) {
    std::uniform_real_distribution<double> scale(cfg.scale_min, cfg.scale_max);
    auto draw = [&] {
      double s = scale(rng);
      while (s <= cfg.scale_min) s = scale(rng);  // open interval
      return s;
    };
    sx = draw();
    sy = cfg.isotropic ? sx : draw();
  }
  if (cfg.enable_rotation) {
    std::uniform_int_distribution<int> angle(1, 3);
    turns = angle(rng);
  }
  return compose(sx, sy, turns);
}

}  // namespace eqvae
