#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "eqvae/feature_grid.hpp"
#include "eqvae/probes.hpp"

namespace eqvae {

struct NoiseSchedule {
  int64_t T = 1000;
  std::vector<double> betas;       // betas[t - 1] for t = 1..T
  std::vector<double> alpha_bars;  // alpha_bars[t] for t = 0..T, alpha_bars[0] = 1

  static NoiseSchedule linear(int64_t steps = 1000, double beta_start = 1e-4, double beta_end = 0.02);
  void validate() const;
  double beta(int64_t t) const { return betas.at(static_cast<size_t>(t - 1)); }
  double alpha_bar(int64_t t) const { return alpha_bars.at(static_cast<size_t>(t)); }
};

// sqrt(abar_t) z0 + sqrt(1 - abar_t) noise.
FeatureGrid diffusion_forward(const FeatureGrid& z0, int64_t t, const FeatureGrid& noise,
                              const NoiseSchedule& sched);
// Batched form: `t` holds one step per sample (int64, N).
torch::Tensor diffusion_forward(const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& noise,
                                const NoiseSchedule& sched);

struct LatentDataset {
  torch::Tensor latents;             // (N, c, h, w) float32, normalised
  std::vector<double> scale_factor;  // per channel: normalised = raw * scale_factor
  std::string source_checkpoint;

  // Measures per-channel scales from raw latents and applies them.
  static LatentDataset from_raw(const torch::Tensor& raw, std::string source);
  torch::Tensor denormalize(const torch::Tensor& z) const;
  std::vector<double> channel_std() const;
  void validate() const;  // per-channel std in [0.8, 1.2]

  // <stem>.bin (raw little-endian float32) + <stem>.json (shape, scales, source).
  void save(const std::string& stem) const;
  static LatentDataset load(const std::string& stem);
};

class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  // Predicted noise for z_t at steps t (int64, N).
  virtual torch::Tensor predict_noise(const torch::Tensor& z_t, const torch::Tensor& t) = 0;
};

struct DenoiserConfig {
  int64_t latent_channels = 4;
  int64_t latent_size = 8;
  int64_t width = 64;
  int64_t time_dim = 128;
};

struct DenoiserBlockImpl : torch::nn::Module {
  DenoiserBlockImpl(int64_t in_channels, int64_t out_channels, int64_t time_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);

  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  torch::nn::Linear time_proj{nullptr};
};
TORCH_MODULE(DenoiserBlock);

// Two-level conv U-Net with sinusoidal step embedding.
class LatentDenoiserImpl : public torch::nn::Module, public NoisePredictor {
 public:
  explicit LatentDenoiserImpl(DenoiserConfig cfg);
  torch::Tensor forward(const torch::Tensor& z_t, const torch::Tensor& t);
  torch::Tensor predict_noise(const torch::Tensor& z_t, const torch::Tensor& t) override {
    return forward(z_t, t);
  }
  const DenoiserConfig& config() const { return cfg_; }

 private:
  DenoiserConfig cfg_;
  torch::nn::Linear time1{nullptr}, time2{nullptr};
  torch::nn::Conv2d conv_in{nullptr}, down{nullptr}, conv_out{nullptr};
  torch::nn::ConvTranspose2d up{nullptr};
  DenoiserBlock enc1{nullptr}, enc2{nullptr}, mid{nullptr}, dec2{nullptr}, dec1{nullptr};
  torch::nn::GroupNorm norm_out{nullptr};
};
TORCH_MODULE(LatentDenoiser);

torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim);

struct DenoiserTrainConfig {
  int64_t steps = 20000;
  int64_t batch_size = 64;
  double lr = 2e-4;
  uint64_t seed = 0;
  int64_t log_every = 1;
};

// Trains with the MSE noise-prediction objective; returns the per-step losses.
std::vector<double> train_latent_denoiser(LatentDenoiser& model, const LatentDataset& data,
                                          const NoiseSchedule& sched, const DenoiserTrainConfig& cfg,
                                          const std::function<void(int64_t, double)>& on_step = {});

void save_denoiser(LatentDenoiser& model, const std::string& path);
LatentDenoiser load_denoiser(const std::string& path);

inline constexpr int64_t kMinGenerationSamples = 500;

using LatentDecodeFn = std::function<torch::Tensor(const torch::Tensor&)>;
using FeatureFn = std::function<torch::Tensor(const torch::Tensor&)>;

struct GenerationScore {
  torch::Tensor samples;  // decoded outputs (N, ...)
  double frechet_proxy = 0.0;
};

// Ancestral DDPM sampling of normalised latents of `shape` (c, h, w).
torch::Tensor ancestral_sample(NoisePredictor& model, const NoiseSchedule& sched,
                               const std::vector<int64_t>& shape, int64_t n, uint64_t seed,
                               int64_t chunk = 500);

// Samples n latents, applies `denormalize`, decodes, embeds with `features` and
// scores against `reference`. Refuses n < kMinGenerationSamples.
GenerationScore sample_and_score(NoisePredictor& model, const NoiseSchedule& sched,
                                 const std::vector<int64_t>& shape, const LatentDecodeFn& decode,
                                 const FeatureFn& features, const FrechetStats& reference, int64_t n,
                                 uint64_t seed);

// Real-vs-real Frechet distance of random n-subsets against the complementary
// reference set: returns mean + 3 std over `repeats` draws.
double calibrate_noise_floor(const torch::Tensor& real_features, int64_t n, int64_t repeats, uint64_t seed);

}  // namespace eqvae
