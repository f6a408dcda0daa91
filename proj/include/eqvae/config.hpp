#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "eqvae/autoencoder.hpp"
#include "eqvae/objectives.hpp"
#include "eqvae/transform2d.hpp"

namespace eqvae {

enum class RunMode { kBaselineVae, kEqvaeFinetune, kExplicitAblation, kExplicitSgAblation };

std::string to_string(RunMode mode);
RunMode run_mode_from_string(const std::string& s);

struct ExperimentConfig {
  std::string dataset_path;
  std::string run_dir = "runs/default";
  std::string init_checkpoint;        // weights to start from (fine-tuning); empty = random init
  std::string feature_net = "auto";   // "auto", "random" or a path
  AutoencoderConfig autoencoder;
  TransformSamplerConfig sampler;
  LossWeights weights;
  RunMode mode = RunMode::kEqvaeFinetune;
  int64_t epochs = 5;
  int64_t batch_size = 16;
  double lr = 1e-4;
  double disc_lr = 1e-4;
  uint64_t seed = 0;
  uint64_t split_seed = 0;
  bool transform_sample = true;
  int64_t max_train_images = 0;  // 0 = all
  int64_t eval_images = 0;       // validation images used for the report, 0 = all
  int64_t id_max_points = 50000;
  bool id_whole_latent = false;

  // Keys accepted by load/set, in echo order.
  static const std::vector<std::string>& keys();
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;

  // "key = value" lines; '#' starts a comment.
  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig load(const std::string& path);
  // Applies the keys present in `text` / the file on top of the current values.
  void update(const std::string& text);
  void update_from_file(const std::string& path);
  std::string echo() const;
  // Hash of every field that affects training results (run_dir excluded).
  uint64_t hash() const;
  std::string hash_hex() const;

  void validate(bool check_paths = true) const;
};

}  // namespace eqvae
