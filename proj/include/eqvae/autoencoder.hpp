#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

#include "eqvae/transform2d.hpp"

namespace eqvae {

enum class LatentMode { kContinuous, kDiscrete };

std::string to_string(LatentMode mode);
LatentMode latent_mode_from_string(const std::string& s);

struct AutoencoderConfig {
  int64_t image_size = 64;
  int64_t compression = 8;  // f
  int64_t latent_channels = 4;
  int64_t base_width = 32;
  LatentMode latent_mode = LatentMode::kContinuous;
  int64_t codebook_size = 512;
  int64_t disc_width = 32;

  void validate() const;
  int64_t latent_size() const { return image_size / compression; }
};

inline constexpr double kLogvarMin = -30.0;
inline constexpr double kLogvarMax = 20.0;
inline constexpr double kCommitmentBeta = 0.25;

struct GaussianPosterior {
  torch::Tensor mean;
  torch::Tensor logvar;

  void validate() const;
};

// Continuous mode: posterior mean + log-variance. Discrete mode: `features`
// holds the pre-quantization encoder output and `logvar` is undefined.
struct EncoderOutput {
  torch::Tensor features;
  torch::Tensor logvar;

  bool is_posterior() const { return logvar.defined(); }
  GaussianPosterior posterior() const;
};

struct QuantizerOutput {
  torch::Tensor quantized;        // straight-through: forward = codebook rows, grad -> z
  torch::Tensor indices;          // (N, H, W) int64
  torch::Tensor commitment_loss;  // mean ||z - q||^2 (value), >= 0
  torch::Tensor training_loss;    // ||sg(z) - q||^2 + beta ||z - sg(q)||^2
};

torch::Tensor reparameterize(const GaussianPosterior& post, at::Generator& gen);

// Nearest entry per spatial site under Euclidean distance, ties to the lowest index.
QuantizerOutput quantize(const torch::Tensor& z, const torch::Tensor& codebook);

// Anything with an encoder/decoder pair: the trained network, or analytic toy
// models used as references in tests.
class LatentCodec {
 public:
  virtual ~LatentCodec() = default;
  virtual LatentMode latent_mode() const = 0;
  virtual int64_t compression() const = 0;
  virtual EncoderOutput encode(const torch::Tensor& x) = 0;
  virtual torch::Tensor decode(const torch::Tensor& z) = 0;
  virtual QuantizerOutput quantize(const torch::Tensor& z);
};

struct ResBlockImpl : torch::nn::Module {
  ResBlockImpl(int64_t in_channels, int64_t out_channels);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
};
TORCH_MODULE(ResBlock);

struct EncoderImpl : torch::nn::Module {
  explicit EncoderImpl(const AutoencoderConfig& cfg);
  torch::Tensor forward(torch::Tensor x);

  torch::nn::Conv2d conv_in{nullptr}, conv_out{nullptr};
  torch::nn::Sequential body{nullptr};
  torch::nn::GroupNorm norm_out{nullptr};
};
TORCH_MODULE(Encoder);

struct DecoderImpl : torch::nn::Module {
  explicit DecoderImpl(const AutoencoderConfig& cfg);
  torch::Tensor forward(torch::Tensor z);

  torch::nn::Conv2d conv_in{nullptr}, conv_out{nullptr};
  torch::nn::Sequential body{nullptr};
  torch::nn::GroupNorm norm_out{nullptr};
};
TORCH_MODULE(Decoder);

class AutoencoderImpl : public torch::nn::Module, public LatentCodec {
 public:
  explicit AutoencoderImpl(AutoencoderConfig cfg);

  const AutoencoderConfig& config() const { return cfg_; }
  LatentMode latent_mode() const override { return cfg_.latent_mode; }
  int64_t compression() const override { return cfg_.compression; }

  EncoderOutput encode(const torch::Tensor& x) override;
  torch::Tensor decode(const torch::Tensor& z) override;
  QuantizerOutput quantize(const torch::Tensor& z) override;

  // Parameters excluding the discriminator (which lives in its own module).
  std::vector<torch::Tensor> codec_parameters() { return parameters(); }

  torch::Tensor& codebook() { return codebook_; }
  std::vector<int64_t>& usage_counts() { return usage_; }
  const std::vector<int64_t>& usage_counts() const { return usage_; }
  void record_usage(const torch::Tensor& indices);
  // Re-seeds entries unused since the last call to random rows of `pool` (M, c).
  int64_t reseed_dead_entries(const torch::Tensor& pool, Rng& rng);

 private:
  AutoencoderConfig cfg_;
  Encoder encoder_{nullptr};
  Decoder decoder_{nullptr};
  torch::Tensor codebook_;
  std::vector<int64_t> usage_;
};
TORCH_MODULE(Autoencoder);

// Three-layer fully convolutional patch discriminator.
struct PatchDiscriminatorImpl : torch::nn::Module {
  explicit PatchDiscriminatorImpl(int64_t width);
  torch::Tensor forward(const torch::Tensor& x);

  static constexpr int64_t kMinInputSize = 8;

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
  torch::nn::GroupNorm norm2{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

torch::Tensor discriminate(const torch::Tensor& x, PatchDiscriminator& disc);

int64_t count_parameters(torch::nn::Module& module);

}  // namespace eqvae
