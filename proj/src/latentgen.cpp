#include "eqvae/latentgen.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numeric>

#include "eqvae/error.hpp"

namespace eqvae {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

NoiseSchedule NoiseSchedule::linear(int64_t steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("noise schedule needs at least one step");
  NoiseSchedule s;
  s.T = steps;
  s.betas.resize(static_cast<size_t>(steps));
  s.alpha_bars.resize(static_cast<size_t>(steps + 1));
  s.alpha_bars[0] = 1.0;
  for (int64_t t = 1; t <= steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(steps - 1);
    const double beta = beta_start + frac * (beta_end - beta_start);
    s.betas[static_cast<size_t>(t - 1)] = beta;
    s.alpha_bars[static_cast<size_t>(t)] = s.alpha_bars[static_cast<size_t>(t - 1)] * (1.0 - beta);
  }
  s.validate();
  return s;
}

void NoiseSchedule::validate() const {
  if (static_cast<int64_t>(betas.size()) != T || static_cast<int64_t>(alpha_bars.size()) != T + 1) {
    throw ConfigError("noise schedule arrays do not match T");
  }
  if (alpha_bars[0] != 1.0) throw ConfigError("alpha_bar(0) must be 1");
  for (int64_t i = 0; i < T; ++i) {
    const double b = betas[static_cast<size_t>(i)];
    if (!(b > 0.0 && b < 1.0)) throw ConfigError("betas must lie in (0, 1)");
    if (i > 0 && b < betas[static_cast<size_t>(i - 1)]) throw ConfigError("betas must be non-decreasing");
    if (!(alpha_bars[static_cast<size_t>(i + 1)] < alpha_bars[static_cast<size_t>(i)])) {
      throw ConfigError("alpha_bar must be strictly decreasing");
    }
  }
}

FeatureGrid diffusion_forward(const FeatureGrid& z0, int64_t t, const FeatureGrid& noise,
                              const NoiseSchedule& sched) {
  if (t < 0 || t > sched.T) throw DomainError("diffusion step out of range: " + std::to_string(t));
  if (!z0.same_shape(noise)) throw ShapeError("noise shape differs from z0");
  if (t == 0) return z0;
  const double a = std::sqrt(sched.alpha_bar(t));
  const double b = std::sqrt(1.0 - sched.alpha_bar(t));
  FeatureGrid out(z0.channels(), z0.height(), z0.width());
  auto src = z0.values();
  auto eps = noise.values();
  auto dst = out.values();
  for (size_t i = 0; i < dst.size(); ++i) {
    dst[i] = static_cast<float>(a * static_cast<double>(src[i]) + b * static_cast<double>(eps[i]));
  }
  return out;
}

torch::Tensor diffusion_forward(const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& noise,
                                const NoiseSchedule& sched) {
  if (z0.sizes() != noise.sizes()) throw ShapeError("noise shape differs from z0");
  if (t.dim() != 1 || t.size(0) != z0.size(0)) throw ShapeError("one step per sample required");
  if (t.min().item<int64_t>() < 0 || t.max().item<int64_t>() > sched.T) {
    throw DomainError("diffusion step out of range");
  }
  auto table = torch::tensor(sched.alpha_bars, torch::kFloat64);
  auto abar = table.index_select(0, t.to(torch::kLong)).to(z0.scalar_type());
  std::vector<int64_t> view(static_cast<size_t>(z0.dim()), 1);
  view[0] = z0.size(0);
  abar = abar.view(view);
  return abar.sqrt() * z0 + (1.0 - abar).sqrt() * noise;
}

// ---- dataset -----------------------------------------------------------------

LatentDataset LatentDataset::from_raw(const torch::Tensor& raw, std::string source) {
  if (raw.dim() != 4 || raw.size(0) < 2) throw ShapeError("latent dataset expects (N >= 2, c, h, w)");
  auto r = raw.detach().to(torch::kCPU, torch::kFloat64);
  auto std = r.transpose(0, 1).reshape({r.size(1), -1}).std(1);
  LatentDataset ds;
  ds.source_checkpoint = std::move(source);
  for (int64_t c = 0; c < std.size(0); ++c) {
    const double s = std[c].item<double>();
    if (!(s > 0.0) || !std::isfinite(s)) throw NumericalError("latent channel has zero or non-finite spread");
    ds.scale_factor.push_back(1.0 / s);
  }
  auto scale = torch::tensor(ds.scale_factor, torch::kFloat64).view({1, -1, 1, 1});
  ds.latents = (r * scale).to(torch::kFloat32).contiguous();
  return ds;
}

torch::Tensor LatentDataset::denormalize(const torch::Tensor& z) const {
  auto scale = torch::tensor(scale_factor, torch::kFloat64).view({1, -1, 1, 1}).to(z.scalar_type());
  return z / scale;
}

std::vector<double> LatentDataset::channel_std() const {
  auto s = latents.to(torch::kFloat64).transpose(0, 1).reshape({latents.size(1), -1}).std(1);
  std::vector<double> out(static_cast<size_t>(s.size(0)));
  for (int64_t c = 0; c < s.size(0); ++c) out[static_cast<size_t>(c)] = s[c].item<double>();
  return out;
}

void LatentDataset::validate() const {
  if (!latents.defined() || latents.dim() != 4) throw ShapeError("latent dataset is empty");
  if (static_cast<int64_t>(scale_factor.size()) != latents.size(1)) {
    throw ShapeError("scale_factor count differs from latent channels");
  }
  for (double s : channel_std()) {
    if (s < 0.8 || s > 1.2) throw DataError("normalised latent channel std outside [0.8, 1.2]");
  }
}

void LatentDataset::save(const std::string& stem) const {
  auto data = latents.to(torch::kFloat32).contiguous();
  std::ofstream bin(stem + ".bin", std::ios::binary);
  if (!bin) throw DataError("cannot write " + stem + ".bin");
  bin.write(reinterpret_cast<const char*>(data.data_ptr<float>()),
            static_cast<std::streamsize>(data.numel() * sizeof(float)));
  nlohmann::json meta;
  meta["shape"] = std::vector<int64_t>(data.sizes().begin(), data.sizes().end());
  meta["dtype"] = "float32-le";
  meta["scale_factor"] = scale_factor;
  meta["source_checkpoint"] = source_checkpoint;
  std::ofstream js(stem + ".json");
  js << meta.dump(2) << "\n";
}

LatentDataset LatentDataset::load(const std::string& stem) {
  std::ifstream js(stem + ".json");
  if (!js) throw DataError("missing latent metadata " + stem + ".json");
  const auto meta = nlohmann::json::parse(js);
  const auto shape = meta.at("shape").get<std::vector<int64_t>>();
  if (shape.size() != 4) throw DataError("latent metadata shape must have 4 dims");
  LatentDataset ds;
  ds.scale_factor = meta.at("scale_factor").get<std::vector<double>>();
  ds.source_checkpoint = meta.at("source_checkpoint").get<std::string>();
  ds.latents = torch::empty(shape, torch::kFloat32);
  std::ifstream bin(stem + ".bin", std::ios::binary);
  const auto bytes = static_cast<std::streamsize>(ds.latents.numel() * sizeof(float));
  if (!bin.read(reinterpret_cast<char*>(ds.latents.data_ptr<float>()), bytes)) {
    throw DataError("latent array " + stem + ".bin is truncated");
  }
  return ds;
}

// ---- denoiser ------------------------------------------------------------------

namespace {
int64_t groups_for(int64_t channels) {
  for (int64_t g = 8; g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}
}  // namespace

DenoiserBlockImpl::DenoiserBlockImpl(int64_t in_channels, int64_t out_channels, int64_t time_dim) {
  norm1 = register_module("norm1", nn::GroupNorm(groups_for(in_channels), in_channels));
  conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 3).padding(1)));
  time_proj = register_module("time_proj", nn::Linear(time_dim, out_channels));
  norm2 = register_module("norm2", nn::GroupNorm(groups_for(out_channels), out_channels));
  conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out_channels, out_channels, 3).padding(1)));
  if (in_channels != out_channels) {
    skip = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 1)));
  }
}

torch::Tensor DenoiserBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
  auto h = conv1(torch::silu(norm1(x)));
  h = h + time_proj(temb).unsqueeze(-1).unsqueeze(-1);
  h = conv2(torch::silu(norm2(h)));
  return (skip ? skip(x) : x) + h;
}

torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim) {
  const int64_t half = dim / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat32) / static_cast<double>(half));
  auto args = t.to(torch::kFloat32).unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({torch::sin(args), torch::cos(args)}, 1);
}

LatentDenoiserImpl::LatentDenoiserImpl(DenoiserConfig cfg) : cfg_(cfg) {
  if (cfg_.latent_size % 2 != 0) throw ConfigError("denoiser latent size must be even");
  const int64_t w = cfg_.width;
  const int64_t td = cfg_.time_dim;
  time1 = register_module("time1", nn::Linear(td, td));
  time2 = register_module("time2", nn::Linear(td, td));
  conv_in = register_module("conv_in", nn::Conv2d(nn::Conv2dOptions(cfg_.latent_channels, w, 3).padding(1)));
  enc1 = register_module("enc1", DenoiserBlock(w, w, td));
  down = register_module("down", nn::Conv2d(nn::Conv2dOptions(w, w, 4).stride(2).padding(1)));
  enc2 = register_module("enc2", DenoiserBlock(w, 2 * w, td));
  mid = register_module("mid", DenoiserBlock(2 * w, 2 * w, td));
  dec2 = register_module("dec2", DenoiserBlock(4 * w, 2 * w, td));
  up = register_module("up", nn::ConvTranspose2d(nn::ConvTranspose2dOptions(2 * w, w, 4).stride(2).padding(1)));
  dec1 = register_module("dec1", DenoiserBlock(2 * w, w, td));
  norm_out = register_module("norm_out", nn::GroupNorm(groups_for(w), w));
  conv_out = register_module("conv_out", nn::Conv2d(nn::Conv2dOptions(w, cfg_.latent_channels, 3).padding(1)));
}

torch::Tensor LatentDenoiserImpl::forward(const torch::Tensor& z_t, const torch::Tensor& t) {
  if (z_t.dim() != 4 || z_t.size(1) != cfg_.latent_channels || z_t.size(2) != cfg_.latent_size ||
      z_t.size(3) != cfg_.latent_size) {
    throw ShapeError("denoiser input does not match the configured latent shape");
  }
  auto temb = time2(torch::silu(time1(timestep_embedding(t, cfg_.time_dim))));
  auto h0 = enc1(conv_in(z_t), temb);
  auto h1 = enc2(down(h0), temb);
  auto h = mid(h1, temb);
  h = dec2(torch::cat({h, h1}, 1), temb);
  h = dec1(torch::cat({up(h), h0}, 1), temb);
  return conv_out(torch::silu(norm_out(h)));
}

std::vector<double> train_latent_denoiser(LatentDenoiser& model, const LatentDataset& data,
                                          const NoiseSchedule& sched, const DenoiserTrainConfig& cfg,
                                          const std::function<void(int64_t, double)>& on_step) {
  const auto& mc = model->config();
  if (data.latents.size(1) != mc.latent_channels || data.latents.size(2) != mc.latent_size ||
      data.latents.size(3) != mc.latent_size) {
    throw ShapeError("latent dataset shape does not match the denoiser config");
  }
  auto gen = at::make_generator<at::CPUGeneratorImpl>(cfg.seed);
  torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(cfg.lr));
  model->train();
  const int64_t n = data.latents.size(0);
  std::vector<double> losses;
  losses.reserve(static_cast<size_t>(cfg.steps));
  auto order = torch::randperm(n, gen, torch::kLong);
  int64_t cursor = 0;
  for (int64_t step = 0; step < cfg.steps; ++step) {
    if (cursor + cfg.batch_size > n) {
      order = torch::randperm(n, gen, torch::kLong);
      cursor = 0;
    }
    auto idx = order.slice(0, cursor, cursor + std::min(cfg.batch_size, n));
    cursor += idx.size(0);
    auto z0 = data.latents.index_select(0, idx);
    auto t = torch::randint(1, sched.T + 1, {z0.size(0)}, gen, torch::kLong);
    auto noise = torch::randn(z0.sizes(), gen);
    auto z_t = diffusion_forward(z0, t, noise, sched);
    auto loss = F::mse_loss(model->forward(z_t, t), noise);
    opt.zero_grad();
    loss.backward();
    opt.step();
    const double v = loss.item<double>();
    if (!std::isfinite(v)) throw NumericalError("denoiser loss is not finite at step " + std::to_string(step));
    losses.push_back(v);
    if (on_step && (step % std::max<int64_t>(1, cfg.log_every) == 0)) on_step(step, v);
  }
  model->eval();
  return losses;
}

void save_denoiser(LatentDenoiser& model, const std::string& path) {
  const auto& c = model->config();
  torch::serialize::OutputArchive ar;
  ar.write("config", torch::tensor({c.latent_channels, c.latent_size, c.width, c.time_dim}));
  model->save(ar);
  ar.save_to(path);
}

LatentDenoiser load_denoiser(const std::string& path) {
  torch::serialize::InputArchive ar;
  ar.load_from(path);
  torch::Tensor c;
  ar.read("config", c);
  DenoiserConfig cfg{c[0].item<int64_t>(), c[1].item<int64_t>(), c[2].item<int64_t>(), c[3].item<int64_t>()};
  LatentDenoiser model(cfg);
  model->load(ar);
  model->eval();
  return model;
}

// ---- sampling --------------------------------------------------------------------

torch::Tensor ancestral_sample(NoisePredictor& model, const NoiseSchedule& sched,
                               const std::vector<int64_t>& shape, int64_t n, uint64_t seed, int64_t chunk) {
  torch::NoGradGuard no_grad;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  std::vector<torch::Tensor> parts;
  for (int64_t start = 0; start < n; start += chunk) {
    const int64_t m = std::min(chunk, n - start);
    std::vector<int64_t> full{m};
    full.insert(full.end(), shape.begin(), shape.end());
    auto z = torch::randn(full, gen);
    for (int64_t t = sched.T; t >= 1; --t) {
      auto steps = torch::full({m}, t, torch::kLong);
      auto eps = model.predict_noise(z, steps);
      const double beta = sched.beta(t);
      const double abar = sched.alpha_bar(t);
      const double abar_prev = sched.alpha_bar(t - 1);
      z = (z - (beta / std::sqrt(1.0 - abar)) * eps) / std::sqrt(1.0 - beta);
      if (t > 1) {
        const double var = beta * (1.0 - abar_prev) / (1.0 - abar);
        z = z + std::sqrt(var) * torch::randn(full, gen);
      }
    }
    parts.push_back(z);
  }
  return torch::cat(parts, 0);
}

GenerationScore sample_and_score(NoisePredictor& model, const NoiseSchedule& sched,
                                 const std::vector<int64_t>& shape, const LatentDecodeFn& decode,
                                 const FeatureFn& features, const FrechetStats& reference, int64_t n,
                                 uint64_t seed) {
  if (n < kMinGenerationSamples) {
    throw DomainError("generation scoring needs at least " + std::to_string(kMinGenerationSamples) +
                      " samples, got " + std::to_string(n));
  }
  auto latents = ancestral_sample(model, sched, shape, n, seed);
  if (!torch::isfinite(latents).all().item<bool>()) throw NumericalError("sampled latents are not finite");
  torch::NoGradGuard no_grad;
  GenerationScore out;
  out.samples = decode(latents);
  out.frechet_proxy = frechet_distance(FrechetStats::from_features(features(out.samples)), reference);
  return out;
}

double calibrate_noise_floor(const torch::Tensor& real_features, int64_t n, int64_t repeats, uint64_t seed) {
  const int64_t total = real_features.size(0);
  if (n < 2 || total - n < 2) throw DataError("noise floor needs more real samples than the subset size");
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  std::vector<double> values;
  for (int64_t r = 0; r < repeats; ++r) {
    auto perm = torch::randperm(total, gen, torch::kLong);
    auto a = real_features.index_select(0, perm.slice(0, 0, n));
    auto b = real_features.index_select(0, perm.slice(0, n, total));
    values.push_back(frechet_distance(FrechetStats::from_features(a), FrechetStats::from_features(b)));
  }
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var = values.size() > 1 ? var / static_cast<double>(values.size() - 1) : 0.0;
  return mean + 3.0 * std::sqrt(var);
}

}  // namespace eqvae
