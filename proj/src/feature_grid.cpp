#include "eqvae/feature_grid.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "eqvae/error.hpp"

namespace eqvae {

namespace {

void check_dims(int64_t c, int64_t h, int64_t w) {
  if (c < 1 || h < 1 || w < 1) {
    throw ShapeError("feature grid dims must be >= 1, got " + std::to_string(c) + "x" +
                     std::to_string(h) + "x" + std::to_string(w));
  }
}

}  // namespace

FeatureGrid::FeatureGrid(int64_t channels, int64_t height, int64_t width, float fill)
    : channels_(channels), height_(height), width_(width) {
  check_dims(channels, height, width);
  values_.assign(static_cast<size_t>(channels * height * width), fill);
}

FeatureGrid::FeatureGrid(int64_t channels, int64_t height, int64_t width, std::vector<float> values)
    : channels_(channels), height_(height), width_(width), values_(std::move(values)) {
  check_dims(channels, height, width);
  if (static_cast<int64_t>(values_.size()) != channels * height * width) {
    throw ShapeError("feature grid value count does not match its shape");
  }
  if (!all_finite()) throw DataError("feature grid contains non-finite values");
}

bool FeatureGrid::all_finite() const noexcept {
  return std::all_of(values_.begin(), values_.end(), [](float v) { return std::isfinite(v); });
}

}  // namespace eqvae
