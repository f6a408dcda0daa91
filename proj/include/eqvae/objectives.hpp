#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "eqvae/autoencoder.hpp"
#include "eqvae/feature_net.hpp"
#include "eqvae/transform2d.hpp"

namespace eqvae {

struct LossWeights {
  double lambda_gan = 0.1;
  double lambda_reg = 1e-6;
  double lambda_explicit = 0.1;
  double perceptual_weight = 1.0;
  int64_t gan_warmup_steps = 0;

  void validate() const;
  // Adversarial weight in effect at `step` (zero during warm-up).
  double gan_weight_at(int64_t step) const { return step >= gan_warmup_steps ? lambda_gan : 0.0; }
};

// Scalar decomposition of one optimisation step, averaged over the batch.
//   total = rec_pixel + perceptual_weight * rec_perceptual + gan_weight * gan_g
//           + lambda_reg * reg + lambda_explicit * explicit_eq
struct LossBreakdown {
  double rec_pixel = 0.0;
  double rec_perceptual = 0.0;
  double gan_g = 0.0;
  double gan_d = 0.0;
  double reg = 0.0;
  double explicit_eq = 0.0;
  double total = 0.0;
  double gan_weight = 0.0;
  std::vector<Transform2D> tau_used;  // one per sample
  std::vector<bool> was_identity;     // one per sample
  // Discrete path: indices were computed from tau(E(x)), i.e. after the transform.
  bool quantized_after_transform = false;

  double identity_fraction() const;
  double weighted_sum(const LossWeights& w) const;
};

struct StepOptions {
  // Apply tau to the reparameterised sample (true) or to the posterior mean.
  bool transform_sample = true;
};

// Differentiable step objective plus what the discriminator update needs.
struct StepLoss {
  torch::Tensor total;
  LossBreakdown breakdown;
  std::vector<torch::Tensor> real_buckets;  // tau(x) targets per shape bucket
  std::vector<torch::Tensor> fake_buckets;  // detached reconstructions per bucket
  std::vector<torch::Tensor> indices;       // discrete mode: per-sample code indices
};

// Mean absolute pixel error + perceptual_weight * feature MSE. Per-sample values (N).
torch::Tensor reconstruction_loss_per_sample(const torch::Tensor& x_hat, const torch::Tensor& x_target,
                                             FeatureNet& feat, const LossWeights& w);
torch::Tensor reconstruction_loss(const torch::Tensor& x_hat, const torch::Tensor& x_target,
                                  FeatureNet& feat, const LossWeights& w);

// Mean over elements of 0.5 * (mu^2 + exp(logvar) - 1 - logvar).
torch::Tensor kl_regularizer(const GaussianPosterior& post);

torch::Tensor hinge_d_loss(const torch::Tensor& real_logits, const torch::Tensor& fake_logits);
torch::Tensor hinge_g_loss(const torch::Tensor& fake_logits);

// Hinge losses; d_loss sees a detached x_hat. Returns {g_loss, d_loss}.
std::pair<torch::Tensor, torch::Tensor> adversarial_losses(const torch::Tensor& x_hat,
                                                           const torch::Tensor& x_real,
                                                           PatchDiscriminator& disc);

// ||tau(E(x)) - E(tau(x))||^2 averaged over elements, on posterior means. The
// pixel input tau(x) is produced at f times the transformed latent size.
torch::Tensor explicit_equivariance_loss(const torch::Tensor& x, const Transform2D& tau,
                                         LatentCodec& codec, bool stop_gradient);
// Per-sample transforms, averaged over samples.
torch::Tensor explicit_equivariance_loss(const torch::Tensor& x, std::span<const Transform2D> taus,
                                         LatentCodec& codec, bool stop_gradient);

// Plain autoencoder objective: rec(x, D(z)) + gan + reg.
StepLoss standard_step_loss(const torch::Tensor& x, LatentCodec& codec, PatchDiscriminator& disc,
                            FeatureNet& feat, const LossWeights& w, int64_t step,
                            at::Generator& gen, const StepOptions& opts = {});

// Implicit equivariance objective with one transform per sample:
// rec(tau(x), D(tau(E(x)))) + gan(D(tau(E(x)))) + reg.
StepLoss eqvae_step_loss(const torch::Tensor& x, std::span<const Transform2D> taus,
                         LatentCodec& codec, PatchDiscriminator& disc, FeatureNet& feat,
                         const LossWeights& w, int64_t step, at::Generator& gen,
                         const StepOptions& opts = {});

// Per-sample gate: identity with probability p_alpha, otherwise a sampled transform.
std::vector<Transform2D> draw_gated_transforms(int64_t count, const TransformSamplerConfig& cfg,
                                               Rng& rng);

StepLoss total_training_step(const torch::Tensor& x, const TransformSamplerConfig& cfg, Rng& rng,
                             LatentCodec& codec, PatchDiscriminator& disc, FeatureNet& feat,
                             const LossWeights& w, int64_t step, at::Generator& gen,
                             const StepOptions& opts = {});

// Adds lambda_explicit * explicit to a step objective.
void add_explicit_term(StepLoss& loss, const torch::Tensor& explicit_eq, const LossWeights& w);

// Discriminator objective over the buckets recorded by a step (per-sample averaged).
torch::Tensor discriminator_loss(const StepLoss& loss, PatchDiscriminator& disc);

}  // namespace eqvae
