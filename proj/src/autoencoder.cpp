#include "eqvae/autoencoder.hpp"

#include <algorithm>
#include <numeric>

#include "eqvae/error.hpp"

namespace eqvae {

namespace nn = torch::nn;

std::string to_string(LatentMode mode) {
  return mode == LatentMode::kContinuous ? "continuous" : "discrete";
}

LatentMode latent_mode_from_string(const std::string& s) {
  if (s == "continuous") return LatentMode::kContinuous;
  if (s == "discrete") return LatentMode::kDiscrete;
  throw ConfigError("unknown latent_mode '" + s + "' (expected continuous|discrete)");
}

void AutoencoderConfig::validate() const {
  if (compression != 2 && compression != 4 && compression != 8) {
    throw ConfigError("compression must be 2, 4 or 8");
  }
  if (image_size < compression || image_size % compression != 0) {
    throw ConfigError("image_size must be divisible by the compression ratio");
  }
  if (latent_channels < 1) throw ConfigError("latent_channels must be >= 1");
  if (base_width < 8 || base_width % 8 != 0) throw ConfigError("base_width must be a multiple of 8");
  if (disc_width < 8) throw ConfigError("disc_width must be >= 8");
  if (latent_mode == LatentMode::kDiscrete && codebook_size < 2) {
    throw ConfigError("codebook_size must be >= 2");
  }
}

void GaussianPosterior::validate() const {
  if (!mean.defined() || !logvar.defined()) throw ShapeError("posterior has undefined tensors");
  if (mean.sizes() != logvar.sizes()) throw ShapeError("posterior mean/logvar shapes differ");
  if (!torch::isfinite(mean).all().item<bool>() || !torch::isfinite(logvar).all().item<bool>()) {
    throw NumericalError("posterior contains non-finite values");
  }
}

GaussianPosterior EncoderOutput::posterior() const {
  if (!is_posterior()) throw ConfigError("discrete encoder output has no Gaussian posterior");
  return {features, logvar};
}

torch::Tensor reparameterize(const GaussianPosterior& post, at::Generator& gen) {
  auto eps = torch::randn(post.mean.sizes(), gen, post.mean.options().requires_grad(false));
  return post.mean + torch::exp(0.5 * post.logvar) * eps;
}

QuantizerOutput quantize(const torch::Tensor& z, const torch::Tensor& codebook) {
  if (!codebook.defined() || codebook.size(0) == 0) throw ConfigError("empty codebook");
  if (z.dim() != 4 || z.size(1) != codebook.size(1)) {
    throw ShapeError("quantize: latent channels must equal the codebook entry dimension");
  }
  const int64_t n = z.size(0), c = z.size(1), h = z.size(2), w = z.size(3);
  auto flat = z.detach().permute({0, 2, 3, 1}).reshape({-1, c});
  auto book = codebook.detach();
  // Direct squared differences keep exact ties exact; argmin returns the first minimum.
  auto dist = (flat.unsqueeze(1) - book.unsqueeze(0)).pow(2).sum(-1);
  auto indices = std::get<1>(dist.min(1));
  auto q = codebook.index_select(0, indices).reshape({n, h, w, c}).permute({0, 3, 1, 2});

  QuantizerOutput out;
  out.indices = indices.reshape({n, h, w});
  // Value is exactly q; the gradient w.r.t. z passes through unchanged.
  out.quantized = q.detach() + (z - z.detach());
  out.commitment_loss = (z.detach() - q.detach()).pow(2).mean();
  out.training_loss =
      (z.detach() - q).pow(2).mean() + kCommitmentBeta * (z - q.detach()).pow(2).mean();
  return out;
}

QuantizerOutput LatentCodec::quantize(const torch::Tensor&) {
  throw ConfigError("this codec has no quantizer");
}

namespace {

int64_t groups_for(int64_t channels) {
  for (int64_t g = std::min<int64_t>(8, channels); g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

nn::Conv2d conv3x3(int64_t in, int64_t out) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1));
}

int log2_exact(int64_t f) {
  int n = 0;
  while ((int64_t{1} << n) < f) ++n;
  return n;
}

// Width multipliers for the three resolution levels.
constexpr std::array<int64_t, 3> kLevelMult{1, 2, 2};

}  // namespace

ResBlockImpl::ResBlockImpl(int64_t in_channels, int64_t out_channels) {
  norm1 = register_module("norm1", nn::GroupNorm(groups_for(in_channels), in_channels));
  conv1 = register_module("conv1", conv3x3(in_channels, out_channels));
  norm2 = register_module("norm2", nn::GroupNorm(groups_for(out_channels), out_channels));
  conv2 = register_module("conv2", conv3x3(out_channels, out_channels));
  if (in_channels != out_channels) {
    skip = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 1)));
  }
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x) {
  auto h = conv1(torch::silu(norm1(x)));
  h = conv2(torch::silu(norm2(h)));
  return (skip ? skip(x) : x) + h;
}

EncoderImpl::EncoderImpl(const AutoencoderConfig& cfg) {
  const int n_down = log2_exact(cfg.compression);
  const int64_t w = cfg.base_width;
  conv_in = register_module("conv_in", conv3x3(3, w));
  body = nn::Sequential();
  int64_t ch = w;
  for (int level = 0; level < 3; ++level) {
    const int64_t out = w * kLevelMult[level];
    body->push_back(ResBlock(ch, out));
    ch = out;
    if (level < n_down) body->push_back(nn::Conv2d(nn::Conv2dOptions(ch, ch, 4).stride(2).padding(1)));
  }
  body->push_back(ResBlock(ch, ch));
  register_module("body", body);
  norm_out = register_module("norm_out", nn::GroupNorm(groups_for(ch), ch));
  const int64_t out_channels =
      cfg.latent_mode == LatentMode::kContinuous ? 2 * cfg.latent_channels : cfg.latent_channels;
  conv_out = register_module("conv_out", conv3x3(ch, out_channels));
}

torch::Tensor EncoderImpl::forward(torch::Tensor x) {
  return conv_out(torch::silu(norm_out(body->forward(conv_in(x)))));
}

DecoderImpl::DecoderImpl(const AutoencoderConfig& cfg) {
  const int n_up = log2_exact(cfg.compression);
  const int64_t w = cfg.base_width;
  int64_t ch = w * kLevelMult[2];
  conv_in = register_module("conv_in", conv3x3(cfg.latent_channels, ch));
  body = nn::Sequential();
  body->push_back(ResBlock(ch, ch));
  for (int level = 2; level >= 0; --level) {
    const int64_t out = w * kLevelMult[level];
    body->push_back(ResBlock(ch, out));
    ch = out;
    if (level < n_up) {
      body->push_back(nn::Upsample(
          nn::UpsampleOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest)));
      body->push_back(conv3x3(ch, ch));
    }
  }
  register_module("body", body);
  norm_out = register_module("norm_out", nn::GroupNorm(groups_for(ch), ch));
  conv_out = register_module("conv_out", conv3x3(ch, 3));
}

torch::Tensor DecoderImpl::forward(torch::Tensor z) {
  return torch::tanh(conv_out(torch::silu(norm_out(body->forward(conv_in(z))))));
}

AutoencoderImpl::AutoencoderImpl(AutoencoderConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  encoder_ = register_module("encoder", Encoder(cfg_));
  decoder_ = register_module("decoder", Decoder(cfg_));
  if (cfg_.latent_mode == LatentMode::kDiscrete) {
    const double bound = 1.0 / static_cast<double>(cfg_.codebook_size);
    codebook_ = register_parameter(
        "codebook",
        torch::empty({cfg_.codebook_size, cfg_.latent_channels}).uniform_(-bound, bound));
    usage_.assign(static_cast<size_t>(cfg_.codebook_size), 0);
  }
}

EncoderOutput AutoencoderImpl::encode(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != 3) throw ShapeError("encode expects an (N, 3, H, W) image batch");
  const int64_t h = x.size(2), w = x.size(3);
  if (h % cfg_.compression != 0 || w % cfg_.compression != 0 || h > cfg_.image_size ||
      w > cfg_.image_size) {
    throw ShapeError("encode: spatial size " + std::to_string(h) + "x" + std::to_string(w) +
                     " incompatible with image_size " + std::to_string(cfg_.image_size) +
                     " and f=" + std::to_string(cfg_.compression));
  }
  if (!torch::isfinite(x).all().item<bool>()) throw DataError("encode: input has non-finite pixels");
  auto out = encoder_->forward(x);
  if (cfg_.latent_mode == LatentMode::kDiscrete) return {out, {}};
  auto chunks = out.chunk(2, 1);
  return {chunks[0], torch::clamp(chunks[1], kLogvarMin, kLogvarMax)};
}

torch::Tensor AutoencoderImpl::decode(const torch::Tensor& z) {
  if (z.dim() != 4 || z.size(1) != cfg_.latent_channels) {
    throw ShapeError("decode expects (N, " + std::to_string(cfg_.latent_channels) + ", h, w) latents");
  }
  return decoder_->forward(z);
}

QuantizerOutput AutoencoderImpl::quantize(const torch::Tensor& z) {
  if (cfg_.latent_mode != LatentMode::kDiscrete) throw ConfigError("continuous model has no codebook");
  return eqvae::quantize(z, codebook_);
}

void AutoencoderImpl::record_usage(const torch::Tensor& indices) {
  auto flat = indices.reshape({-1}).to(torch::kCPU).contiguous();
  const auto* p = flat.data_ptr<int64_t>();
  for (int64_t i = 0; i < flat.numel(); ++i) ++usage_[static_cast<size_t>(p[i])];
}

int64_t AutoencoderImpl::reseed_dead_entries(const torch::Tensor& pool, Rng& rng) {
  int64_t reseeded = 0;
  if (cfg_.latent_mode != LatentMode::kDiscrete || pool.size(0) == 0) return 0;
  torch::NoGradGuard no_grad;
  std::uniform_int_distribution<int64_t> pick(0, pool.size(0) - 1);
  for (size_t k = 0; k < usage_.size(); ++k) {
    if (usage_[k] == 0) {
      codebook_[static_cast<int64_t>(k)].copy_(pool[pick(rng)]);
      ++reseeded;
    }
  }
  std::fill(usage_.begin(), usage_.end(), 0);
  return reseeded;
}

PatchDiscriminatorImpl::PatchDiscriminatorImpl(int64_t width) {
  conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(3, width, 4).stride(2).padding(1)));
  conv2 = register_module("conv2",
                          nn::Conv2d(nn::Conv2dOptions(width, 2 * width, 4).stride(2).padding(1)));
  norm2 = register_module("norm2", nn::GroupNorm(groups_for(2 * width), 2 * width));
  conv3 = register_module("conv3", nn::Conv2d(nn::Conv2dOptions(2 * width, 1, 4).stride(1).padding(1)));
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& x) {
  auto h = torch::leaky_relu(conv1(x), 0.2);
  h = torch::leaky_relu(norm2(conv2(h)), 0.2);
  return conv3(h);
}

torch::Tensor discriminate(const torch::Tensor& x, PatchDiscriminator& disc) {
  if (x.dim() != 4 || x.size(1) != 3) throw ShapeError("discriminate expects an (N, 3, H, W) batch");
  if (x.size(2) < PatchDiscriminatorImpl::kMinInputSize ||
      x.size(3) < PatchDiscriminatorImpl::kMinInputSize) {
    throw ShapeError("discriminate: input smaller than the " +
                     std::to_string(PatchDiscriminatorImpl::kMinInputSize) + "px receptive-field minimum");
  }
  return disc->forward(x);
}

int64_t count_parameters(torch::nn::Module& module) {
  int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

}  // namespace eqvae
