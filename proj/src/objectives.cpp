#include "eqvae/objectives.hpp"

#include <cmath>

#include "eqvae/error.hpp"
#include "eqvae/tensor_transform.hpp"

namespace eqvae {

void LossWeights::validate() const {
  for (double v : {lambda_gan, lambda_reg, lambda_explicit, perceptual_weight}) {
    if (!std::isfinite(v) || v < 0.0) throw ConfigError("loss weights must be finite and >= 0");
  }
  if (gan_warmup_steps < 0) throw ConfigError("gan_warmup_steps must be >= 0");
}

double LossBreakdown::identity_fraction() const {
  if (was_identity.empty()) return 1.0;
  double n = 0.0;
  for (bool b : was_identity) n += b ? 1.0 : 0.0;
  return n / static_cast<double>(was_identity.size());
}

double LossBreakdown::weighted_sum(const LossWeights& w) const {
  return rec_pixel + w.perceptual_weight * rec_perceptual + gan_weight * gan_g + w.lambda_reg * reg +
         w.lambda_explicit * explicit_eq;
}

namespace {

torch::Tensor per_sample_mean(const torch::Tensor& t) {
  std::vector<int64_t> dims;
  for (int64_t d = 1; d < t.dim(); ++d) dims.push_back(d);
  return t.mean(dims);
}

struct Bucket {
  GridShape latent;
  std::vector<int64_t> members;
};

std::vector<Bucket> bucket_by_shape(GridShape latent, std::span<const Transform2D> taus) {
  std::vector<Bucket> buckets;
  for (size_t i = 0; i < taus.size(); ++i) {
    const GridShape s = transformed_shape(latent, taus[i]);
    auto it = std::find_if(buckets.begin(), buckets.end(), [&](const Bucket& b) { return b.latent == s; });
    if (it == buckets.end()) {
      buckets.push_back({s, {}});
      it = std::prev(buckets.end());
    }
    it->members.push_back(static_cast<int64_t>(i));
  }
  return buckets;
}

bool all_identity(std::span<const Transform2D> taus) {
  return std::all_of(taus.begin(), taus.end(), [](const Transform2D& t) { return t.is_identity(); });
}

torch::Tensor transform_members(const torch::Tensor& t, std::span<const Transform2D> taus,
                                 const std::vector<int64_t>& members, GridShape out) {
  std::vector<torch::Tensor> parts;
  parts.reserve(members.size());
  for (int64_t i : members) {
    parts.push_back(apply_transform_sized(t.slice(0, i, i + 1), taus[static_cast<size_t>(i)], out));
  }
  return parts.size() == 1 ? parts.front() : torch::cat(parts, 0);
}

// Restores original sample order from bucket-concatenated per-sample values.
torch::Tensor unbucket(const std::vector<torch::Tensor>& parts, const std::vector<Bucket>& buckets,
                       int64_t batch) {
  if (buckets.size() == 1) {
    const auto& m = buckets.front().members;
    bool in_order = true;
    for (size_t i = 0; i < m.size(); ++i) in_order = in_order && m[i] == static_cast<int64_t>(i);
    if (in_order) return parts.front();
  }
  std::vector<int64_t> order;
  for (const auto& b : buckets) order.insert(order.end(), b.members.begin(), b.members.end());
  std::vector<int64_t> inverse(static_cast<size_t>(batch));
  for (size_t pos = 0; pos < order.size(); ++pos) inverse[static_cast<size_t>(order[pos])] = static_cast<int64_t>(pos);
  return torch::cat(parts, 0).index_select(0, torch::tensor(inverse, torch::kLong));
}

void check_batch(const torch::Tensor& x, std::span<const Transform2D> taus) {
  if (x.dim() != 4) throw ShapeError("expected an (N, C, H, W) batch");
  if (static_cast<int64_t>(taus.size()) != x.size(0)) {
    throw ShapeError("need exactly one transform per sample");
  }
}

}  // namespace

torch::Tensor reconstruction_loss_per_sample(const torch::Tensor& x_hat, const torch::Tensor& x_target,
                                             FeatureNet& feat, const LossWeights& w) {
  if (x_hat.sizes() != x_target.sizes()) throw ShapeError("reconstruction loss: shape mismatch");
  auto loss = per_sample_mean((x_hat - x_target).abs());
  if (w.perceptual_weight > 0.0) loss = loss + w.perceptual_weight * feat->perceptual_distance(x_hat, x_target);
  return loss;
}

torch::Tensor reconstruction_loss(const torch::Tensor& x_hat, const torch::Tensor& x_target,
                                  FeatureNet& feat, const LossWeights& w) {
  return reconstruction_loss_per_sample(x_hat, x_target, feat, w).mean();
}

torch::Tensor kl_regularizer(const GaussianPosterior& post) {
  return (0.5 * (post.mean.pow(2) + torch::exp(post.logvar) - 1.0 - post.logvar)).mean();
}

torch::Tensor hinge_d_loss(const torch::Tensor& real_logits, const torch::Tensor& fake_logits) {
  return torch::relu(1.0 - real_logits).mean() + torch::relu(1.0 + fake_logits).mean();
}

torch::Tensor hinge_g_loss(const torch::Tensor& fake_logits) { return -fake_logits.mean(); }

std::pair<torch::Tensor, torch::Tensor> adversarial_losses(const torch::Tensor& x_hat,
                                                           const torch::Tensor& x_real,
                                                           PatchDiscriminator& disc) {
  auto g = hinge_g_loss(discriminate(x_hat, disc));
  auto d = hinge_d_loss(discriminate(x_real, disc), discriminate(x_hat.detach(), disc));
  return {g, d};
}

torch::Tensor explicit_equivariance_loss(const torch::Tensor& x, const Transform2D& tau,
                                         LatentCodec& codec, bool stop_gradient) {
  std::vector<Transform2D> taus(static_cast<size_t>(x.size(0)), tau);
  return explicit_equivariance_loss(x, taus, codec, stop_gradient);
}

torch::Tensor explicit_equivariance_loss(const torch::Tensor& x, std::span<const Transform2D> taus,
                                         LatentCodec& codec, bool stop_gradient) {
  check_batch(x, taus);
  const int64_t batch = x.size(0);
  auto z = codec.encode(x).features;
  const int64_t f = codec.compression();
  auto buckets = bucket_by_shape(spatial_shape(z), taus);
  torch::Tensor sum = torch::zeros({}, z.options());
  for (const auto& b : buckets) {
    std::vector<int64_t> active;
    for (int64_t i : b.members) {
      if (!taus[static_cast<size_t>(i)].is_identity()) active.push_back(i);
    }
    if (active.empty()) continue;  // identity contributes exactly zero
    auto z_tau = transform_members(z, taus, active, b.latent);
    auto x_tau = transform_members(x, taus, active, {f * b.latent.height, f * b.latent.width});
    auto e_tau = codec.encode(x_tau).features;
    if (stop_gradient) e_tau = e_tau.detach();
    sum = sum + per_sample_mean((z_tau - e_tau).pow(2)).sum();
  }
  return sum / static_cast<double>(batch);
}

StepLoss standard_step_loss(const torch::Tensor& x, LatentCodec& codec, PatchDiscriminator& disc,
                            FeatureNet& feat, const LossWeights& w, int64_t step,
                            at::Generator& gen, const StepOptions& opts) {
  const int64_t batch = x.size(0);
  StepLoss out;
  auto& bd = out.breakdown;
  bd.gan_weight = w.gan_weight_at(step);

  auto enc = codec.encode(x);
  torch::Tensor z;
  torch::Tensor reg;
  if (enc.is_posterior()) {
    const auto post = enc.posterior();
    auto sample = reparameterize(post, gen);
    z = opts.transform_sample ? sample : post.mean;
    reg = kl_regularizer(post);
  } else {
    auto q = codec.quantize(enc.features);
    z = q.quantized;
    reg = q.training_loss;
    out.indices.push_back(q.indices);
  }
  auto x_hat = codec.decode(z);
  auto pixel = per_sample_mean((x_hat - x).abs());
  auto perceptual = w.perceptual_weight > 0.0 ? feat->perceptual_distance(x_hat, x)
                                              : torch::zeros({batch}, x.options());
  auto rec = pixel + w.perceptual_weight * perceptual;
  torch::Tensor gan = torch::zeros({batch}, x.options());
  if (bd.gan_weight > 0.0 && !disc.is_empty()) gan = -per_sample_mean(discriminate(x_hat, disc));

  out.total = rec.mean() + bd.gan_weight * gan.mean() + w.lambda_reg * reg;
  out.real_buckets.push_back(x.detach());
  out.fake_buckets.push_back(x_hat.detach());

  bd.rec_pixel = pixel.mean().item<double>();
  bd.rec_perceptual = perceptual.mean().item<double>();
  bd.gan_g = gan.mean().item<double>();
  bd.reg = reg.item<double>();
  bd.total = out.total.item<double>();
  bd.tau_used.assign(static_cast<size_t>(batch), identity_transform());
  bd.was_identity.assign(static_cast<size_t>(batch), true);
  return out;
}

StepLoss eqvae_step_loss(const torch::Tensor& x, std::span<const Transform2D> taus,
                         LatentCodec& codec, PatchDiscriminator& disc, FeatureNet& feat,
                         const LossWeights& w, int64_t step, at::Generator& gen,
                         const StepOptions& opts) {
  check_batch(x, taus);
  const int64_t batch = x.size(0);
  const int64_t f = codec.compression();
  StepLoss out;
  auto& bd = out.breakdown;
  bd.gan_weight = w.gan_weight_at(step);

  auto enc = codec.encode(x);
  torch::Tensor z;
  torch::Tensor reg;
  const bool continuous = enc.is_posterior();
  if (continuous) {
    const auto post = enc.posterior();
    auto sample = reparameterize(post, gen);
    z = opts.transform_sample ? sample : post.mean;
    reg = kl_regularizer(post);
  } else {
    // Transforms act on pre-quantization features; quantization happens per bucket below.
    z = enc.features;
    reg = torch::zeros({}, z.options());
    bd.quantized_after_transform = true;
  }

  const bool identity = all_identity(taus);
  const auto buckets = bucket_by_shape(spatial_shape(z), taus);
  std::vector<torch::Tensor> pixel_parts, perceptual_parts, gan_parts;
  for (const auto& b : buckets) {
    torch::Tensor z_tau = identity ? z : transform_members(z, taus, b.members, b.latent);
    torch::Tensor x_tau =
        identity ? x : transform_members(x, taus, b.members, {f * b.latent.height, f * b.latent.width});
    if (!continuous) {
      auto q = codec.quantize(z_tau);
      const double share = static_cast<double>(b.members.size()) / static_cast<double>(batch);
      reg = reg + share * q.training_loss;
      z_tau = q.quantized;
      out.indices.push_back(q.indices);
    }
    auto x_hat = codec.decode(z_tau);
    const int64_t nb = x_hat.size(0);
    pixel_parts.push_back(per_sample_mean((x_hat - x_tau).abs()));
    perceptual_parts.push_back(w.perceptual_weight > 0.0 ? feat->perceptual_distance(x_hat, x_tau)
                                                         : torch::zeros({nb}, x.options()));
    if (bd.gan_weight > 0.0 && !disc.is_empty()) {
      gan_parts.push_back(-per_sample_mean(discriminate(x_hat, disc)));
    } else {
      gan_parts.push_back(torch::zeros({nb}, x.options()));
    }
    out.real_buckets.push_back(x_tau.detach());
    out.fake_buckets.push_back(x_hat.detach());
  }
  auto pixel = unbucket(pixel_parts, buckets, batch);
  auto perceptual = unbucket(perceptual_parts, buckets, batch);
  auto gan = unbucket(gan_parts, buckets, batch);
  auto rec = pixel + w.perceptual_weight * perceptual;

  out.total = rec.mean() + bd.gan_weight * gan.mean() + w.lambda_reg * reg;

  bd.rec_pixel = pixel.mean().item<double>();
  bd.rec_perceptual = perceptual.mean().item<double>();
  bd.gan_g = gan.mean().item<double>();
  bd.reg = reg.item<double>();
  bd.total = out.total.item<double>();
  bd.tau_used.assign(taus.begin(), taus.end());
  bd.was_identity.clear();
  for (const auto& t : taus) bd.was_identity.push_back(t.is_identity());
  return out;
}

std::vector<Transform2D> draw_gated_transforms(int64_t count, const TransformSamplerConfig& cfg,
                                               Rng& rng) {
  cfg.validate();
  TransformSamplerConfig ungated = cfg;
  ungated.p_alpha = 0.0;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Transform2D> taus;
  taus.reserve(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) {
    const double p = unit(rng);
    taus.push_back(p < cfg.p_alpha ? identity_transform() : sample_transform(rng, ungated));
  }
  return taus;
}

StepLoss total_training_step(const torch::Tensor& x, const TransformSamplerConfig& cfg, Rng& rng,
                             LatentCodec& codec, PatchDiscriminator& disc, FeatureNet& feat,
                             const LossWeights& w, int64_t step, at::Generator& gen,
                             const StepOptions& opts) {
  const auto taus = draw_gated_transforms(x.size(0), cfg, rng);
  return eqvae_step_loss(x, taus, codec, disc, feat, w, step, gen, opts);
}

void add_explicit_term(StepLoss& loss, const torch::Tensor& explicit_eq, const LossWeights& w) {
  loss.total = loss.total + w.lambda_explicit * explicit_eq;
  loss.breakdown.explicit_eq = explicit_eq.item<double>();
  loss.breakdown.total = loss.total.item<double>();
}

torch::Tensor discriminator_loss(const StepLoss& loss, PatchDiscriminator& disc) {
  int64_t batch = 0;
  torch::Tensor sum;
  for (size_t k = 0; k < loss.real_buckets.size(); ++k) {
    auto real = discriminate(loss.real_buckets[k], disc);
    auto fake = discriminate(loss.fake_buckets[k], disc);
    auto per_sample = per_sample_mean(torch::relu(1.0 - real)) + per_sample_mean(torch::relu(1.0 + fake));
    sum = sum.defined() ? sum + per_sample.sum() : per_sample.sum();
    batch += real.size(0);
  }
  return sum / static_cast<double>(batch);
}

}  // namespace eqvae
