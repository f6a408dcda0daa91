#include "eqvae/harness.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "eqvae/error.hpp"
#include "eqvae/probes.hpp"
#include "eqvae/tensor_transform.hpp"

namespace eqvae {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr uint64_t kInitStream = 1;
constexpr uint64_t kNoiseStream = 2;
constexpr uint64_t kTransformStream = 3;
constexpr uint64_t kOrderStream = 1000;

uint64_t fnv1a(const void* data, size_t n, uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("missing file: " + path.string());
  return json::parse(in);
}

torch::Tensor cap_rows(const torch::Tensor& t, int64_t cap) {
  return cap > 0 && t.size(0) > cap ? t.slice(0, 0, cap) : t;
}

}  // namespace

// ---- metrics rows ----------------------------------------------------------------

std::string MetricsRow::csv_header() {
  return "step,epoch,rec_pixel,rec_perceptual,gan_g,gan_d,reg,explicit_eq,total,gan_weight,identity_fraction,"
         "wall_time,rng_fingerprint";
}

std::string MetricsRow::to_csv() const {
  std::ostringstream os;
  os << step << ',' << epoch;
  for (double v : {rec_pixel, rec_perceptual, gan_g, gan_d, reg, explicit_eq, total, gan_weight, identity_fraction,
                   wall_time}) {
    os << ',' << format_double(v);
  }
  os << ',' << rng_fingerprint;
  return os.str();
}

MetricsRow MetricsRow::from_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (cells.size() != 13) throw DataError("metrics row has " + std::to_string(cells.size()) + " fields, expected 13");
  MetricsRow r;
  r.step = std::stoll(cells[0]);
  r.epoch = std::stoll(cells[1]);
  double* fields[] = {&r.rec_pixel, &r.rec_perceptual, &r.gan_g, &r.gan_d, &r.reg, &r.explicit_eq,
                      &r.total, &r.gan_weight, &r.identity_fraction, &r.wall_time};
  for (size_t i = 0; i < 10; ++i) *fields[i] = std::stod(cells[i + 2]);
  r.rng_fingerprint = cells[12];
  return r;
}

std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("missing metrics file: " + path);
  std::string line;
  std::getline(in, line);
  if (line != MetricsRow::csv_header()) throw DataError("unexpected metrics header in " + path);
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (!line.empty()) rows.push_back(MetricsRow::from_csv(line));
  }
  return rows;
}

// ---- trainer -----------------------------------------------------------------------

Trainer::Trainer(ExperimentConfig cfg, torch::Tensor train_images, FeatureNet feature_net)
    : cfg_(std::move(cfg)),
      train_(std::move(train_images)),
      feat_(std::move(feature_net)),
      rng_(split_seed(cfg_.seed, kTransformStream)),
      gen_(at::make_generator<at::CPUGeneratorImpl>(split_seed(cfg_.seed, kNoiseStream))),
      start_(std::chrono::steady_clock::now()) {
  cfg_.validate(false);
  if (train_.size(0) == 0) throw DataError("training set is empty");
  torch::manual_seed(static_cast<int64_t>(split_seed(cfg_.seed, kInitStream) >> 1));
  ae_ = Autoencoder(cfg_.autoencoder);
  disc_ = PatchDiscriminator(cfg_.autoencoder.disc_width);
  opt_ae_ = std::make_unique<torch::optim::Adam>(ae_->parameters(),
                                                 torch::optim::AdamOptions(cfg_.lr).betas({0.5, 0.9}));
  opt_disc_ = std::make_unique<torch::optim::Adam>(disc_->parameters(),
                                                   torch::optim::AdamOptions(cfg_.disc_lr).betas({0.5, 0.9}));
}

int64_t Trainer::steps_per_epoch() const { return (train_.size(0) + cfg_.batch_size - 1) / cfg_.batch_size; }

torch::Tensor Trainer::epoch_order() const {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(split_seed(cfg_.seed, kOrderStream + static_cast<uint64_t>(epoch_)));
  return torch::randperm(train_.size(0), gen, torch::kLong);
}

std::string Trainer::rng_fingerprint() const {
  std::ostringstream os;
  os << rng_;
  const std::string s = os.str();
  auto state = gen_.get_state();
  uint64_t h = fnv1a(s.data(), s.size());
  h = fnv1a(state.data_ptr(), static_cast<size_t>(state.numel()), h);
  return hex64(h);
}

MetricsRow Trainer::train_step(const torch::Tensor& batch) {
  ae_->train();
  disc_->train();
  const StepOptions opts{cfg_.transform_sample};
  auto& codec = static_cast<LatentCodec&>(*ae_);
  StepLoss loss;
  switch (cfg_.mode) {
    case RunMode::kBaselineVae:
      loss = standard_step_loss(batch, codec, disc_, feat_, cfg_.weights, step_, gen_, opts);
      break;
    case RunMode::kEqvaeFinetune:
      loss = total_training_step(batch, cfg_.sampler, rng_, codec, disc_, feat_, cfg_.weights, step_, gen_, opts);
      break;
    case RunMode::kExplicitAblation:
    case RunMode::kExplicitSgAblation: {
      loss = standard_step_loss(batch, codec, disc_, feat_, cfg_.weights, step_, gen_, opts);
      TransformSamplerConfig ungated = cfg_.sampler;
      ungated.p_alpha = 0.0;
      const auto taus = draw_gated_transforms(batch.size(0), ungated, rng_);
      auto eq = explicit_equivariance_loss(batch, taus, codec, cfg_.mode == RunMode::kExplicitSgAblation);
      add_explicit_term(loss, eq, cfg_.weights);
      loss.breakdown.tau_used = taus;
      loss.breakdown.was_identity.assign(taus.size(), false);
      break;
    }
  }
  if (!std::isfinite(loss.breakdown.total)) {
    throw NumericalError("non-finite training loss at step " + std::to_string(step_));
  }
  opt_ae_->zero_grad();
  loss.total.backward();
  opt_ae_->step();
  if (cfg_.autoencoder.latent_mode == LatentMode::kDiscrete) {
    for (const auto& idx : loss.indices) ae_->record_usage(idx);
  }
  if (loss.breakdown.gan_weight > 0.0) {
    auto d = discriminator_loss(loss, disc_);
    opt_disc_->zero_grad();
    d.backward();
    opt_disc_->step();
    loss.breakdown.gan_d = d.item<double>();
  }

  MetricsRow row;
  row.step = step_;
  row.epoch = epoch_;
  row.rec_pixel = loss.breakdown.rec_pixel;
  row.rec_perceptual = loss.breakdown.rec_perceptual;
  row.gan_g = loss.breakdown.gan_g;
  row.gan_d = loss.breakdown.gan_d;
  row.reg = loss.breakdown.reg;
  row.explicit_eq = loss.breakdown.explicit_eq;
  row.total = loss.breakdown.total;
  row.gan_weight = loss.breakdown.gan_weight;
  row.identity_fraction = loss.breakdown.identity_fraction();
  row.wall_time = wall_offset_ + std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  row.rng_fingerprint = rng_fingerprint();
  ++step_;
  return row;
}

void Trainer::run_steps(int64_t count, const std::function<void(const MetricsRow&)>& on_row) {
  const int64_t n = train_.size(0);
  auto order = epoch_order();
  for (int64_t k = 0; k < count; ++k) {
    const int64_t end = std::min(n, cursor_ + cfg_.batch_size);
    auto batch = train_.index_select(0, order.slice(0, cursor_, end));
    const auto row = train_step(batch);
    if (on_row) on_row(row);
    cursor_ = end;
    if (cursor_ >= n) {
      if (cfg_.autoencoder.latent_mode == LatentMode::kDiscrete) {
        torch::NoGradGuard no_grad;
        auto sample = train_.index_select(0, order.slice(0, 0, std::min<int64_t>(n, 256)));
        auto feats = ae_->encode(sample).features;
        ae_->reseed_dead_entries(feats.permute({0, 2, 3, 1}).reshape({-1, feats.size(1)}), rng_);
      }
      ++epoch_;
      cursor_ = 0;
      order = epoch_order();
    }
  }
}

void Trainer::run_epoch(const std::function<void(const MetricsRow&)>& on_row) {
  const int64_t remaining = (train_.size(0) - cursor_ + cfg_.batch_size - 1) / cfg_.batch_size;
  run_steps(remaining, on_row);
}

void Trainer::save_checkpoint(const std::string& path) const {
  torch::serialize::OutputArchive ar;
  ar.write("format", c10::IValue(std::string(kCheckpointFormat)));
  ar.write("config_echo", c10::IValue(cfg_.echo()));
  ar.write("config_hash", c10::IValue(cfg_.hash_hex()));
  ar.write("counters", torch::tensor({step_, epoch_, cursor_}, torch::kLong));
  const double wall =
      wall_offset_ + std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  ar.write("wall_time", torch::tensor(wall, torch::kFloat64));
  torch::serialize::OutputArchive ae_ar, disc_ar, opt_ae_ar, opt_disc_ar;
  ae_->save(ae_ar);
  disc_->save(disc_ar);
  opt_ae_->save(opt_ae_ar);
  opt_disc_->save(opt_disc_ar);
  ar.write("autoencoder", ae_ar);
  ar.write("discriminator", disc_ar);
  ar.write("opt_autoencoder", opt_ae_ar);
  ar.write("opt_discriminator", opt_disc_ar);
  ar.write("codebook_usage", torch::tensor(ae_->usage_counts(), torch::kLong));
  std::ostringstream rs;
  rs << rng_;
  ar.write("transform_rng", c10::IValue(rs.str()));
  ar.write("noise_rng", gen_.get_state());
  fs::create_directories(fs::path(path).parent_path());
  ar.save_to(path);
}

namespace {

torch::serialize::InputArchive open_checkpoint(const std::string& path) {
  if (!fs::exists(path)) throw DataError("checkpoint not found: " + path);
  torch::serialize::InputArchive ar;
  ar.load_from(path);
  c10::IValue tag;
  if (!ar.try_read("format", tag) || !tag.isString() || tag.toStringRef() != kCheckpointFormat) {
    throw DataError("not an " + std::string(kCheckpointFormat) + " checkpoint: " + path);
  }
  return ar;
}

std::string read_string(torch::serialize::InputArchive& ar, const std::string& key) {
  c10::IValue v;
  ar.read(key, v);
  return v.toStringRef();
}

}  // namespace

void Trainer::load_checkpoint(const std::string& path) {
  auto ar = open_checkpoint(path);
  const std::string hash = read_string(ar, "config_hash");
  if (hash != cfg_.hash_hex()) {
    throw ConfigError("refusing to resume: checkpoint config hash " + hash + " differs from " + cfg_.hash_hex());
  }
  torch::Tensor counters, wall, usage, gen_state;
  ar.read("counters", counters);
  ar.read("wall_time", wall);
  torch::serialize::InputArchive ae_ar, disc_ar, opt_ae_ar, opt_disc_ar;
  ar.read("autoencoder", ae_ar);
  ar.read("discriminator", disc_ar);
  ar.read("opt_autoencoder", opt_ae_ar);
  ar.read("opt_discriminator", opt_disc_ar);
  ae_->load(ae_ar);
  disc_->load(disc_ar);
  opt_ae_->load(opt_ae_ar);
  opt_disc_->load(opt_disc_ar);
  ar.read("codebook_usage", usage);
  auto& counts = ae_->usage_counts();
  for (int64_t i = 0; i < usage.numel() && i < static_cast<int64_t>(counts.size()); ++i) {
    counts[static_cast<size_t>(i)] = usage[i].item<int64_t>();
  }
  std::istringstream rs(read_string(ar, "transform_rng"));
  rs >> rng_;
  ar.read("noise_rng", gen_state);
  gen_.set_state(gen_state);
  step_ = counters[0].item<int64_t>();
  epoch_ = counters[1].item<int64_t>();
  cursor_ = counters[2].item<int64_t>();
  wall_offset_ = wall.item<double>();
  start_ = std::chrono::steady_clock::now();
}

void Trainer::load_weights(const std::string& path) {
  auto ar = open_checkpoint(path);
  torch::serialize::InputArchive ae_ar, disc_ar;
  ar.read("autoencoder", ae_ar);
  ar.read("discriminator", disc_ar);
  try {
    ae_->load(ae_ar);
    disc_->load(disc_ar);
  } catch (const c10::Error& e) {
    throw ConfigError("checkpoint " + path + " does not match the autoencoder config");
  }
}

// ---- helpers -------------------------------------------------------------------------

FeatureNet resolve_feature_net(const ExperimentConfig& cfg, const DatasetHandle& data) {
  if (cfg.feature_net == "random") return make_random_feature_net(0);
  if (cfg.feature_net != "auto") return load_feature_net(cfg.feature_net);
  const fs::path cache =
      fs::path(cfg.dataset_path) / ("feature_net_" + std::to_string(cfg.autoencoder.image_size) + ".pt");
  if (fs::exists(cache)) return load_feature_net(cache.string());
  if (!data.has_labels()) return make_random_feature_net(0);
  torch::manual_seed(0);
  FeatureNet net(data.train_labels.max().item<int64_t>() + 1);
  FeaturePretrainConfig pc;
  pretrain_feature_net(net, data.train, data.train_labels, pc);
  save_feature_net(net, cache.string());
  return net;
}

LoadedAutoencoder load_autoencoder(const std::string& checkpoint) {
  auto ar = open_checkpoint(checkpoint);
  LoadedAutoencoder out;
  out.config = ExperimentConfig::parse(read_string(ar, "config_echo"));
  out.model = Autoencoder(out.config.autoencoder);
  torch::serialize::InputArchive ae_ar;
  ar.read("autoencoder", ae_ar);
  out.model->load(ae_ar);
  out.model->eval();
  return out;
}

torch::Tensor encode_means(Autoencoder& ae, const torch::Tensor& images, int64_t chunk) {
  torch::NoGradGuard no_grad;
  ae->eval();
  std::vector<torch::Tensor> parts;
  for (int64_t s = 0; s < images.size(0); s += chunk) {
    parts.push_back(ae->encode(images.slice(0, s, std::min(images.size(0), s + chunk))).features);
  }
  return torch::cat(parts, 0);
}

namespace {

torch::Tensor decode_latents(Autoencoder& ae, const torch::Tensor& z, int64_t chunk = 128) {
  torch::NoGradGuard no_grad;
  ae->eval();
  std::vector<torch::Tensor> parts;
  for (int64_t s = 0; s < z.size(0); s += chunk) {
    auto part = z.slice(0, s, std::min(z.size(0), s + chunk)).to(torch::kFloat32);
    if (ae->latent_mode() == LatentMode::kDiscrete) part = ae->quantize(part).quantized;
    parts.push_back(ae->decode(part));
  }
  return torch::cat(parts, 0);
}

double frechet_proxy(FeatureNet& feat, const torch::Tensor& a, const torch::Tensor& b) {
  return frechet_distance(FrechetStats::from_features(extract_features(feat, a)),
                          FrechetStats::from_features(extract_features(feat, b)));
}

}  // namespace

torch::Tensor reconstruct(Autoencoder& ae, const torch::Tensor& images, int64_t chunk) {
  return decode_latents(ae, encode_means(ae, images, chunk), chunk);
}

json probe_latent_transforms(Autoencoder& ae, const torch::Tensor& images, FeatureNet& feat) {
  const int64_t f = ae->compression();
  const auto z = encode_means(ae, images);
  std::vector<Transform2D> taus{identity_transform()};
  for (const auto& t : scale_set()) taus.push_back(t);
  for (const auto& t : rotation_set()) taus.push_back(t);
  json out = json::object();
  for (const auto& tau : taus) {
    auto z_tau = apply_transform(z, tau);
    auto x_hat = decode_latents(ae, z_tau);
    auto target = apply_transform_sized(images, tau, {f * z_tau.size(2), f * z_tau.size(3)});
    out[tau.descriptor()] = frechet_proxy(feat, x_hat, target);
  }
  return out;
}

json evaluate_autoencoder(Autoencoder& ae, const torch::Tensor& val_all, const torch::Tensor& train,
                          FeatureNet& feat, const ExperimentConfig& cfg) {
  ae->eval();
  const auto val = cap_rows(val_all, cfg.eval_images);
  if (val.size(0) < 2) throw DataError("need at least 2 validation images for evaluation");
  json report;
  report["n_val"] = val.size(0);

  const auto x_hat = reconstruct(ae, val);
  report["reconstruction"] = {{"psnr", psnr(val, x_hat)}, {"ssim", ssim(val, x_hat)},
                              {"frechet_proxy", frechet_proxy(feat, x_hat, val)}};

  EncoderFn enc = [&ae](const torch::Tensor& x) { return encode_means(ae, x); };
  const auto rot = equivariance_error(enc, val, rotation_set(), ae->compression());
  const auto scl = equivariance_error(enc, val, scale_set(), ae->compression());
  json per = json::object();
  for (const auto& [k, v] : rot.per_transform) per[k] = v;
  for (const auto& [k, v] : scl.per_transform) per[k] = v;
  report["equivariance"] = {{"rotation_mean", rot.rotation_mean},
                            {"scale_mean", scl.scale_mean},
                            {"per_transform", per},
                            {"skipped", rot.skipped + scl.skipped}};

  const auto pooling = cfg.id_whole_latent ? IdPooling::kWholeLatent : IdPooling::kPerSite;
  const auto cloud = latent_point_cloud(encode_means(ae, train), pooling, cfg.id_max_points, cfg.seed);
  const auto id = twonn_intrinsic_dimension(cloud);
  report["intrinsic_dimension"] = {{"id", id.id},
                                   {"n_points", id.n_points},
                                   {"discarded_pairs", id.discarded_pairs},
                                   {"pooling", cfg.id_whole_latent ? "whole_latent" : "per_site"}};

  report["latent_transform_probe"] = probe_latent_transforms(ae, val, feat);
  return report;
}

void write_pca_maps(Autoencoder& ae, const torch::Tensor& images, const std::string& viz_dir, int64_t count) {
  const auto x = images.slice(0, 0, std::min(count, images.size(0)));
  const auto z = encode_means(ae, x);
  std::vector<FeatureGrid> grids;
  for (int64_t i = 0; i < z.size(0); ++i) grids.push_back(to_grid(z[i]));
  const auto maps = pca_latent_visualization(grids);
  const int64_t f = ae->compression();
  for (size_t i = 0; i < maps.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "pca_%02zu.png", i);
    write_png((fs::path(viz_dir) / name).string(), to_tensor(maps[i])[0] * 2.0 - 1.0, 4 * f);
    std::snprintf(name, sizeof(name), "input_%02zu.png", i);
    write_png((fs::path(viz_dir) / name).string(), x[static_cast<int64_t>(i)], 4);
  }
}

// ---- runs ------------------------------------------------------------------------------

json load_report(const std::string& run_dir) { return read_json(fs::path(run_dir) / "report.json"); }

RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  const fs::path dir(cfg.run_dir);
  RunResult result;
  result.run_dir = dir.string();
  if (opts.reuse_existing && opts.resume_from.empty() && fs::exists(dir / "report.json")) {
    auto report = read_json(dir / "report.json");
    if (report.value("config_hash", "") == cfg.hash_hex()) {
      result.report = std::move(report);
      result.reused = true;
      return result;
    }
  }
  fs::create_directories(dir / "ckpt");
  fs::create_directories(dir / "viz");

  auto data = ingest_dataset(cfg.dataset_path, cfg.autoencoder.image_size, cfg.split_seed);
  auto train = cap_rows(data.train, cfg.max_train_images);
  if (data.val.size(0) < 2) throw DataError("validation split has fewer than 2 images");
  auto feat = resolve_feature_net(cfg, data);

  write_text(dir / "config.echo", cfg.echo() + "# config_hash = " + cfg.hash_hex() + "\n");
  json manifest = {{"config_hash", cfg.hash_hex()},
                   {"float_mode", "float32, CPU, 1 intra-op thread, deterministic kernels"},
                   {"torch_version", TORCH_VERSION},
                   {"threads", torch::get_num_threads()},
                   {"n_train", train.size(0)},
                   {"n_val", data.val.size(0)},
                   {"skipped_files", data.skipped}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");

  Trainer trainer(cfg, train, feat);
  const fs::path metrics_path = dir / "metrics.csv";
  if (!opts.resume_from.empty()) {
    trainer.load_checkpoint(opts.resume_from);
    std::vector<MetricsRow> kept;
    if (fs::exists(metrics_path)) {
      for (auto& r : read_metrics_csv(metrics_path.string())) {
        if (r.step < trainer.global_step()) kept.push_back(r);
      }
    }
    std::ofstream out(metrics_path);
    out << MetricsRow::csv_header() << "\n";
    for (const auto& r : kept) out << r.to_csv() << "\n";
  } else {
    if (!cfg.init_checkpoint.empty()) trainer.load_weights(cfg.init_checkpoint);
    write_text(metrics_path, MetricsRow::csv_header() + "\n");
  }

  std::ofstream metrics(metrics_path, std::ios::app);
  std::string last_ckpt = cfg.init_checkpoint;
  while (trainer.epoch() < cfg.epochs) {
    double sum = 0.0;
    int64_t rows = 0;
    trainer.run_epoch([&](const MetricsRow& r) {
      metrics << r.to_csv() << "\n";
      sum += r.total;
      ++rows;
    });
    metrics.flush();
    char name[32];
    std::snprintf(name, sizeof(name), "epoch_%04lld.pt", static_cast<long long>(trainer.epoch()));
    last_ckpt = (dir / "ckpt" / name).string();
    trainer.save_checkpoint(last_ckpt);
    if (opts.verbose) {
      std::cerr << "[" << to_string(cfg.mode) << "] epoch " << trainer.epoch() << "/" << cfg.epochs
                << " mean loss " << (rows > 0 ? sum / static_cast<double>(rows) : 0.0) << "\n";
    }
  }
  if (cfg.epochs == 0) {
    last_ckpt = (dir / "ckpt" / "epoch_0000.pt").string();
    trainer.save_checkpoint(last_ckpt);
  }

  auto report = evaluate_autoencoder(trainer.autoencoder(), data.val, train, feat, cfg);
  report["config_hash"] = cfg.hash_hex();
  report["mode"] = to_string(cfg.mode);
  report["seed"] = cfg.seed;
  report["epochs"] = cfg.epochs;
  report["steps"] = trainer.global_step();
  report["final_checkpoint"] = last_ckpt;
  write_pca_maps(trainer.autoencoder(), data.val, (dir / "viz").string());
  write_text(dir / "report.json", report.dump(2) + "\n");
  result.report = std::move(report);
  return result;
}

namespace {

void flatten_numbers(const json& j, const std::string& prefix, std::map<std::string, double>& out) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) flatten_numbers(v, prefix.empty() ? k : prefix + "." + k, out);
  } else if (j.is_number() && !prefix.empty()) {
    out[prefix] = j.get<double>();
  }
}

}  // namespace

json compare_runs(const std::string& run_a, const std::string& run_b, const std::string& out_dir) {
  const auto path_a = fs::path(run_a) / "report.json";
  const auto path_b = fs::path(run_b) / "report.json";
  for (const auto& p : {path_a, path_b}) {
    if (!fs::exists(p)) throw DataError("missing report: " + p.string());
  }
  const auto a = read_json(path_a);
  const auto b = read_json(path_b);
  std::map<std::string, double> fa, fb;
  flatten_numbers(a, "", fa);
  flatten_numbers(b, "", fb);
  fs::create_directories(out_dir);

  json cmp;
  cmp["run_a"] = run_a;
  cmp["run_b"] = run_b;
  std::ofstream deltas(fs::path(out_dir) / "deltas.csv");
  deltas << "metric,a,b,delta,relative_change\n";
  for (const auto& [key, va] : fa) {
    const auto it = fb.find(key);
    if (it == fb.end() || key == "seed" || key == "epochs" || key == "steps") continue;
    const double vb = it->second;
    const double rel = va != 0.0 ? (vb - va) / std::abs(va) : 0.0;
    cmp["metrics"][key] = {{"a", va}, {"b", vb}, {"delta", vb - va}, {"relative_change", rel}};
    deltas << key << ',' << format_double(va) << ',' << format_double(vb) << ',' << format_double(vb - va) << ','
           << format_double(rel) << "\n";
  }
  std::ofstream bars(fs::path(out_dir) / "probe_bars.csv");
  bars << "transform,a,b\n";
  if (a.contains("latent_transform_probe") && b.contains("latent_transform_probe")) {
    for (const auto& [k, v] : a["latent_transform_probe"].items()) {
      if (b["latent_transform_probe"].contains(k)) {
        bars << k << ',' << format_double(v.get<double>()) << ','
             << format_double(b["latent_transform_probe"][k].get<double>()) << "\n";
      }
    }
  }
  std::ofstream ids(fs::path(out_dir) / "id.csv");
  ids << "run,id\n";
  for (const auto& [name, rep] : {std::pair{run_a, a}, std::pair{run_b, b}}) {
    if (rep.contains("intrinsic_dimension")) {
      ids << name << ',' << format_double(rep["intrinsic_dimension"]["id"].get<double>()) << "\n";
    }
  }
  write_text(fs::path(out_dir) / "comparison.json", cmp.dump(2) + "\n");
  return cmp;
}

// ---- latent generation ------------------------------------------------------------------

LatentDataset build_latent_dataset(const std::string& checkpoint, const torch::Tensor& images) {
  auto loaded = load_autoencoder(checkpoint);
  if (loaded.model->latent_mode() != LatentMode::kContinuous) {
    throw ConfigError("latent datasets are built from continuous autoencoders");
  }
  auto raw = encode_means(loaded.model, images);
  return LatentDataset::from_raw(raw, checkpoint + "#" + loaded.config.hash_hex());
}

json score_generation(Autoencoder& ae, NoisePredictor& model, const LatentDataset& data,
                      const torch::Tensor& reference_images, FeatureNet& feat, int64_t samples, uint64_t seed,
                      const std::string& viz_dir) {
  const auto sched = NoiseSchedule::linear();
  const auto ref_features = extract_features(feat, reference_images);
  const auto reference = FrechetStats::from_features(ref_features);
  LatentDecodeFn decode = [&](const torch::Tensor& z) { return decode_latents(ae, data.denormalize(z)); };
  FeatureFn features = [&](const torch::Tensor& x) { return extract_features(feat, x); };
  const std::vector<int64_t> shape{data.latents.size(1), data.latents.size(2), data.latents.size(3)};
  const auto score = sample_and_score(model, sched, shape, decode, features, reference, samples, seed);
  const double floor = calibrate_noise_floor(ref_features, ref_features.size(0) / 2, 10, seed);
  if (!viz_dir.empty()) {
    for (int64_t i = 0; i < std::min<int64_t>(8, score.samples.size(0)); ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "sample_%02lld.png", static_cast<long long>(i));
      write_png((fs::path(viz_dir) / name).string(), score.samples[i], 4);
    }
  }
  return {{"frechet_proxy", score.frechet_proxy},
          {"noise_floor", floor},
          {"samples", samples},
          {"sample_seed", seed},
          {"scale_factor", data.scale_factor},
          {"sample_pixel_min", score.samples.min().item<double>()},
          {"sample_pixel_max", score.samples.max().item<double>()}};
}

json run_latentgen(const std::string& checkpoint, const LatentDataset& data, const torch::Tensor& reference_images,
                   FeatureNet& feat, const LatentGenConfig& cfg, const std::string& out_dir) {
  data.validate();
  auto loaded = load_autoencoder(checkpoint);
  fs::create_directories(fs::path(out_dir) / "viz");

  DenoiserConfig dc = cfg.denoiser;
  dc.latent_channels = data.latents.size(1);
  dc.latent_size = data.latents.size(2);
  torch::manual_seed(static_cast<int64_t>(split_seed(cfg.train.seed, kInitStream) >> 1));
  LatentDenoiser model(dc);
  const auto sched = NoiseSchedule::linear();

  std::ofstream log(fs::path(out_dir) / "gen_metrics.csv");
  log << "step,loss\n";
  const auto losses = train_latent_denoiser(model, data, sched, cfg.train, [&](int64_t step, double loss) {
    log << step << ',' << format_double(loss) << "\n";
  });
  save_denoiser(model, (fs::path(out_dir) / "denoiser.pt").string());

  auto& predictor = static_cast<NoisePredictor&>(*model);
  json report = score_generation(loaded.model, predictor, data, reference_images, feat, cfg.samples,
                                 cfg.sample_seed, (fs::path(out_dir) / "viz").string());
  double tail = 0.0;
  const size_t window = std::min<size_t>(100, losses.size());
  for (size_t i = losses.size() - window; i < losses.size(); ++i) tail += losses[i];
  report["checkpoint"] = checkpoint;
  report["steps"] = cfg.train.steps;
  report["train_seed"] = cfg.train.seed;
  report["final_loss"] = window > 0 ? tail / static_cast<double>(window) : 0.0;
  report["denoiser_parameters"] = count_parameters(*model);
  write_text(fs::path(out_dir) / "gen_report.json", report.dump(2) + "\n");
  return report;
}

}  // namespace eqvae
