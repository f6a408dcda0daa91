#pragma once

#include <torch/torch.h>

#include <chrono>
#include <cstdint>
#include <functional>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "eqvae/autoencoder.hpp"
#include "eqvae/config.hpp"
#include "eqvae/dataset.hpp"
#include "eqvae/feature_net.hpp"
#include "eqvae/latentgen.hpp"
#include "eqvae/objectives.hpp"

namespace eqvae {

inline constexpr const char* kCheckpointFormat = "eqvae-ckpt-v1";

struct MetricsRow {
  int64_t step = 0;
  int64_t epoch = 0;
  double rec_pixel = 0.0;
  double rec_perceptual = 0.0;
  double gan_g = 0.0;
  double gan_d = 0.0;
  double reg = 0.0;
  double explicit_eq = 0.0;
  double total = 0.0;
  double gan_weight = 0.0;
  double identity_fraction = 1.0;
  double wall_time = 0.0;
  std::string rng_fingerprint;

  static std::string csv_header();
  std::string to_csv() const;
  static MetricsRow from_csv(const std::string& line);
};

std::vector<MetricsRow> read_metrics_csv(const std::string& path);

// Owns the networks, optimisers and random streams of one training run.
class Trainer {
 public:
  Trainer(ExperimentConfig cfg, torch::Tensor train_images, FeatureNet feature_net);

  MetricsRow train_step(const torch::Tensor& batch);
  // One pass over the training set in the seeded order for the current epoch.
  void run_epoch(const std::function<void(const MetricsRow&)>& on_row = {});
  // Runs `count` steps, continuing into following epochs as needed.
  void run_steps(int64_t count, const std::function<void(const MetricsRow&)>& on_row = {});

  void save_checkpoint(const std::string& path) const;
  // Full state restore; refuses a checkpoint written under a different config hash.
  void load_checkpoint(const std::string& path);
  // Autoencoder and discriminator weights only (fresh optimisers), any config hash.
  void load_weights(const std::string& path);

  Autoencoder& autoencoder() { return ae_; }
  PatchDiscriminator& discriminator() { return disc_; }
  int64_t global_step() const { return step_; }
  int64_t epoch() const { return epoch_; }
  int64_t steps_per_epoch() const;
  std::string rng_fingerprint() const;

 private:
  torch::Tensor epoch_order() const;

  ExperimentConfig cfg_;
  torch::Tensor train_;
  FeatureNet feat_;
  Autoencoder ae_{nullptr};
  PatchDiscriminator disc_{nullptr};
  std::unique_ptr<torch::optim::Adam> opt_ae_;
  std::unique_ptr<torch::optim::Adam> opt_disc_;
  Rng rng_;
  at::Generator gen_;
  int64_t step_ = 0;
  int64_t epoch_ = 0;
  int64_t cursor_ = 0;  // position inside the current epoch's order
  std::chrono::steady_clock::time_point start_;
  double wall_offset_ = 0.0;
};

// Loads or prepares the feature network named by cfg.feature_net. "auto" pretrains
// on labelled data once and caches feature_net_<size>.pt in the dataset directory.
FeatureNet resolve_feature_net(const ExperimentConfig& cfg, const DatasetHandle& data);

struct LoadedAutoencoder {
  Autoencoder model{nullptr};
  ExperimentConfig config;
};
LoadedAutoencoder load_autoencoder(const std::string& checkpoint);

// Encoder outputs used for diagnostics: posterior means (continuous) or
// pre-quantisation features (discrete).
torch::Tensor encode_means(Autoencoder& ae, const torch::Tensor& images, int64_t chunk = 128);
torch::Tensor reconstruct(Autoencoder& ae, const torch::Tensor& images, int64_t chunk = 128);

// Frechet proxy between D(tau E(x)) and tau(x) for every latent-space transform.
nlohmann::json probe_latent_transforms(Autoencoder& ae, const torch::Tensor& images, FeatureNet& feat);

// Reconstruction, equivariance, intrinsic-dimension and latent-transform metrics.
nlohmann::json evaluate_autoencoder(Autoencoder& ae, const torch::Tensor& val, const torch::Tensor& train,
                                    FeatureNet& feat, const ExperimentConfig& cfg);

void write_pca_maps(Autoencoder& ae, const torch::Tensor& images, const std::string& viz_dir, int64_t count = 8);

struct RunOptions {
  std::string resume_from;     // checkpoint to continue from
  bool reuse_existing = true;  // return a finished run with a matching config hash as is
  bool verbose = false;
};

struct RunResult {
  std::string run_dir;
  nlohmann::json report;
  bool reused = false;
};

RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {});

nlohmann::json load_report(const std::string& run_dir);

// Writes comparison.json, deltas.csv, probe_bars.csv and id.csv into out_dir.
nlohmann::json compare_runs(const std::string& run_a, const std::string& run_b, const std::string& out_dir);

// ---- latent generation pipeline ------------------------------------------------

LatentDataset build_latent_dataset(const std::string& checkpoint, const torch::Tensor& images);

struct LatentGenConfig {
  DenoiserConfig denoiser;
  DenoiserTrainConfig train;
  int64_t samples = 500;
  uint64_t sample_seed = 1;
};

// Samples from `model`, decodes with `ae` and scores against the reference images;
// also reports the real-vs-real split-half noise floor of the reference set.
nlohmann::json score_generation(Autoencoder& ae, NoisePredictor& model, const LatentDataset& data,
                                const torch::Tensor& reference_images, FeatureNet& feat, int64_t samples,
                                uint64_t seed, const std::string& viz_dir = {});

// Trains a denoiser on the dataset, samples, decodes with the checkpoint's decoder and
// scores against the reference images. Writes gen_report.json (and the denoiser) to out_dir.
nlohmann::json run_latentgen(const std::string& checkpoint, const LatentDataset& data,
                             const torch::Tensor& reference_images, FeatureNet& feat,
                             const LatentGenConfig& cfg, const std::string& out_dir);

}  // namespace eqvae
