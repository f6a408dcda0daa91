#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace eqvae {

struct ValueRange {
  float lo = -1.0f;
  float hi = 1.0f;
};

// Dense (channels, height, width) array of finite values, row-major.
class FeatureGrid {
 public:
  FeatureGrid() = default;
  FeatureGrid(int64_t channels, int64_t height, int64_t width, float fill = 0.0f);
  FeatureGrid(int64_t channels, int64_t height, int64_t width, std::vector<float> values);

  int64_t channels() const noexcept { return channels_; }
  int64_t height() const noexcept { return height_; }
  int64_t width() const noexcept { return width_; }
  int64_t size() const noexcept { return static_cast<int64_t>(values_.size()); }
  bool empty() const noexcept { return values_.empty(); }

  float& at(int64_t c, int64_t y, int64_t x) { return values_[index(c, y, x)]; }
  float at(int64_t c, int64_t y, int64_t x) const { return values_[index(c, y, x)]; }

  std::span<float> values() noexcept { return values_; }
  std::span<const float> values() const noexcept { return values_; }

  std::optional<ValueRange> value_range;

  bool same_shape(const FeatureGrid& other) const noexcept {
    return channels_ == other.channels_ && height_ == other.height_ && width_ == other.width_;
  }
  bool all_finite() const noexcept;

  friend bool operator==(const FeatureGrid& a, const FeatureGrid& b) {
    return a.same_shape(b) && a.values_ == b.values_;
  }

 private:
  int64_t index(int64_t c, int64_t y, int64_t x) const noexcept {
    return (c * height_ + y) * width_ + x;
  }

  int64_t channels_ = 0;
  int64_t height_ = 0;
  int64_t width_ = 0;
  std::vector<float> values_;
};

}  // namespace eqvae
