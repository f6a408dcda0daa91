#include "eqvae/config.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include "eqvae/error.hpp"

namespace eqvae {

std::string to_string(RunMode mode) {
  switch (mode) {
    case RunMode::kBaselineVae:
      return "baseline_vae";
    case RunMode::kEqvaeFinetune:
      return "eqvae_finetune";
    case RunMode::kExplicitAblation:
      return "explicit_ablation";
    case RunMode::kExplicitSgAblation:
      return "explicit_sg_ablation";
  }
  return "unknown";
}

RunMode run_mode_from_string(const std::string& s) {
  for (auto m : {RunMode::kBaselineVae, RunMode::kEqvaeFinetune, RunMode::kExplicitAblation,
                 RunMode::kExplicitSgAblation}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown mode '" + s + "'");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("invalid value '" + v + "' for " + key);
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("invalid boolean '" + v + "' for " + key);
}

template <typename T>
std::string format_number(T v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::string format_bool(bool b) { return b ? "true" : "false"; }

struct Field {
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

#define EQVAE_STRING(name, member) \
  Field{name, [](const ExperimentConfig& c) { return c.member; }, [](ExperimentConfig& c, const std::string& v) { c.member = v; }}
#define EQVAE_NUMBER(name, member, type)                                             \
  Field{name, [](const ExperimentConfig& c) { return format_number<type>(c.member); }, \
        [](ExperimentConfig& c, const std::string& v) { c.member = parse_number<type>(name, v); }}
#define EQVAE_BOOL(name, member)                                           \
  Field{name, [](const ExperimentConfig& c) { return format_bool(c.member); }, \
        [](ExperimentConfig& c, const std::string& v) { c.member = parse_bool(name, v); }}

const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      EQVAE_STRING("dataset_path", dataset_path),
      EQVAE_STRING("run_dir", run_dir),
      EQVAE_STRING("init_checkpoint", init_checkpoint),
      EQVAE_STRING("feature_net", feature_net),
      Field{"mode", [](const ExperimentConfig& c) { return to_string(c.mode); },
            [](ExperimentConfig& c, const std::string& v) { c.mode = run_mode_from_string(v); }},
      EQVAE_NUMBER("image_size", autoencoder.image_size, int64_t),
      EQVAE_NUMBER("compression", autoencoder.compression, int64_t),
      EQVAE_NUMBER("latent_channels", autoencoder.latent_channels, int64_t),
      EQVAE_NUMBER("base_width", autoencoder.base_width, int64_t),
      Field{"latent_mode", [](const ExperimentConfig& c) { return to_string(c.autoencoder.latent_mode); },
            [](ExperimentConfig& c, const std::string& v) { c.autoencoder.latent_mode = latent_mode_from_string(v); }},
      EQVAE_NUMBER("codebook_size", autoencoder.codebook_size, int64_t),
      EQVAE_NUMBER("disc_width", autoencoder.disc_width, int64_t),
      EQVAE_NUMBER("p_alpha", sampler.p_alpha, double),
      EQVAE_NUMBER("scale_min", sampler.scale_min, double),
      EQVAE_NUMBER("scale_max", sampler.scale_max, double),
      EQVAE_BOOL("isotropic", sampler.isotropic),
      EQVAE_BOOL("enable_rotation", sampler.enable_rotation),
      EQVAE_BOOL("enable_scale", sampler.enable_scale),
      EQVAE_NUMBER("lambda_gan", weights.lambda_gan, double),
      EQVAE_NUMBER("lambda_reg", weights.lambda_reg, double),
      EQVAE_NUMBER("lambda_explicit", weights.lambda_explicit, double),
      EQVAE_NUMBER("perceptual_weight", weights.perceptual_weight, double),
      EQVAE_NUMBER("gan_warmup_steps", weights.gan_warmup_steps, int64_t),
      EQVAE_NUMBER("epochs", epochs, int64_t),
      EQVAE_NUMBER("batch_size", batch_size, int64_t),
      EQVAE_NUMBER("lr", lr, double),
      EQVAE_NUMBER("disc_lr", disc_lr, double),
      EQVAE_NUMBER("seed", seed, uint64_t),
      EQVAE_NUMBER("split_seed", split_seed, uint64_t),
      EQVAE_BOOL("transform_sample", transform_sample),
      EQVAE_NUMBER("max_train_images", max_train_images, int64_t),
      EQVAE_NUMBER("eval_images", eval_images, int64_t),
      EQVAE_NUMBER("id_max_points", id_max_points, int64_t),
      EQVAE_BOOL("id_whole_latent", id_whole_latent),
  };
  return table;
}

#undef EQVAE_STRING
#undef EQVAE_NUMBER
#undef EQVAE_BOOL

const Field& field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return f;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

const std::vector<std::string>& ExperimentConfig::keys() {
  static const std::vector<std::string> out = [] {
    std::vector<std::string> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return out;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) { field(key).set(*this, trim(value)); }

std::string ExperimentConfig::get(const std::string& key) const { return field(key).get(*this); }

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  ExperimentConfig cfg;
  cfg.update(text);
  return cfg;
}

void ExperimentConfig::update(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  ExperimentConfig cfg;
  cfg.update_from_file(path);
  return cfg;
}

void ExperimentConfig::update_from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  update(ss.str());
}

std::string ExperimentConfig::echo() const {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(*this) + "\n";
  return out;
}

uint64_t ExperimentConfig::hash() const {
  uint64_t h = 1469598103934665603ull;
  for (const auto& f : fields()) {
    if (f.key == "run_dir") continue;
    for (unsigned char c : f.key + "=" + f.get(*this) + "\n") {
      h ^= c;
      h *= 1099511628211ull;
    }
  }
  return h;
}

std::string ExperimentConfig::hash_hex() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash()));
  return buf;
}

void ExperimentConfig::validate(bool check_paths) const {
  autoencoder.validate();
  sampler.validate();
  weights.validate();
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr > 0.0) || !(disc_lr > 0.0)) throw ConfigError("learning rates must be positive");
  if (max_train_images < 0 || eval_images < 0) throw ConfigError("image limits must be >= 0");
  if (id_max_points < 100) throw ConfigError("id_max_points must be >= 100");
  if (run_dir.empty()) throw ConfigError("run_dir must be set");
  if (check_paths) {
    if (dataset_path.empty() || !std::filesystem::is_directory(dataset_path)) {
      throw ConfigError("dataset_path does not exist: '" + dataset_path + "'");
    }
    if (!init_checkpoint.empty() && !std::filesystem::exists(init_checkpoint)) {
      throw ConfigError("init_checkpoint does not exist: " + init_checkpoint);
    }
    if (feature_net != "auto" && feature_net != "random" && !std::filesystem::exists(feature_net)) {
      throw ConfigError("feature_net does not exist: " + feature_net);
    }
  }
}

}  // namespace eqvae
