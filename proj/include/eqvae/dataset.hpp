#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

namespace eqvae {

struct ShapesCorpusConfig {
  int64_t count = 5556;  // ~5 000 train images after the 90/10 split
  int64_t image_size = 64;
  int64_t max_shapes = 3;
  uint64_t seed = 0;
};

inline constexpr int64_t kShapeClasses = 4;  // triangle, quadrilateral, hexagon, ellipse

// Writes img_%05d.png plus labels.csv (file,label; label = class of the largest shape).
void generate_shapes_corpus(const std::string& dir, const ShapesCorpusConfig& cfg);

struct DatasetHandle {
  torch::Tensor train;  // (N, 3, S, S) float32 in [-1, 1]
  torch::Tensor val;
  torch::Tensor train_labels;  // int64 (N), undefined when no labels.csv
  torch::Tensor val_labels;
  std::vector<std::string> train_files;  // relative paths, sorted
  std::vector<std::string> val_files;
  int64_t skipped = 0;
  std::vector<std::string> warnings;

  int64_t size() const { return static_cast<int64_t>(train_files.size() + val_files.size()); }
  bool has_labels() const { return train_labels.defined(); }
};

// Fraction of files routed to validation by the seeded filename hash.
inline constexpr int kValBuckets = 10;

bool is_validation_file(const std::string& relative_path, uint64_t seed);

// Loads every image under `path` (recursively, sorted by relative path), center-crops
// to square, resizes to image_size and normalises to [-1, 1]. Unreadable files are
// skipped and counted; an empty result is a DataError.
DatasetHandle ingest_dataset(const std::string& path, int64_t image_size, uint64_t seed);

// (3, H, W) or (N, 3, H, W) in [-1, 1] -> 8-bit RGB PNG (first image of a batch).
void write_png(const std::string& path, const torch::Tensor& image, int64_t upscale = 1);

}  // namespace eqvae
