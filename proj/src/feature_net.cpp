#include "eqvae/feature_net.hpp"

#include "eqvae/error.hpp"

namespace eqvae {

namespace nn = torch::nn;

FeatureNetImpl::FeatureNetImpl(int64_t classes) : num_classes(classes) {
  conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(3, 16, 3).padding(1)));
  conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(16, 32, 3).stride(2).padding(1)));
  conv3 = register_module("conv3", nn::Conv2d(nn::Conv2dOptions(32, 64, 3).stride(2).padding(1)));
  conv4 = register_module("conv4", nn::Conv2d(nn::Conv2dOptions(64, kFeatureDim, 3).padding(1)));
  if (num_classes > 0) head = register_module("head", nn::Linear(kFeatureDim, num_classes));
}

std::vector<torch::Tensor> FeatureNetImpl::feature_maps(const torch::Tensor& x) {
  std::vector<torch::Tensor> maps;
  auto h = torch::relu(conv1(x));
  maps.push_back(h);
  h = torch::relu(conv2(h));
  maps.push_back(h);
  h = torch::relu(conv3(h));
  maps.push_back(h);
  h = torch::relu(conv4(h));
  maps.push_back(h);
  return maps;
}

torch::Tensor FeatureNetImpl::pooled(const torch::Tensor& x) {
  return feature_maps(x).back().mean({2, 3});
}

torch::Tensor FeatureNetImpl::logits(const torch::Tensor& x) {
  if (!head) throw ConfigError("feature net has no classifier head");
  return head(pooled(x));
}

torch::Tensor FeatureNetImpl::perceptual_distance(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes()) throw ShapeError("perceptual distance: shape mismatch");
  const auto fa = feature_maps(a);
  const auto fb = feature_maps(b);
  torch::Tensor acc;
  for (size_t i = 0; i < fa.size(); ++i) {
    auto d = (fa[i] - fb[i]).pow(2).mean({1, 2, 3});
    acc = acc.defined() ? acc + d : d;
  }
  return acc / static_cast<double>(fa.size());
}

void FeatureNetImpl::freeze() {
  for (auto& p : parameters()) p.set_requires_grad(false);
  eval();
}

FeatureNet make_random_feature_net(uint64_t seed) {
  torch::manual_seed(static_cast<int64_t>(seed));
  FeatureNet net(0);
  net->freeze();
  return net;
}

double pretrain_feature_net(FeatureNet& net, const torch::Tensor& images, const torch::Tensor& labels,
                            const FeaturePretrainConfig& cfg) {
  if (net->num_classes <= 0) throw ConfigError("pretraining requires a classifier head");
  if (images.size(0) != labels.size(0)) throw ShapeError("images/labels count mismatch");
  torch::manual_seed(static_cast<int64_t>(cfg.seed));
  for (auto& p : net->parameters()) p.set_requires_grad(true);
  net->train();
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(cfg.lr));
  const int64_t n = images.size(0);
  int64_t correct = 0;
  int64_t seen = 0;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order = torch::randperm(n, torch::kLong);
    correct = 0;
    seen = 0;
    for (int64_t start = 0; start < n; start += cfg.batch_size) {
      auto idx = order.slice(0, start, std::min(n, start + cfg.batch_size));
      auto xb = images.index_select(0, idx);
      auto yb = labels.index_select(0, idx);
      auto logits = net->logits(xb);
      auto loss = torch::nn::functional::cross_entropy(logits, yb);
      opt.zero_grad();
      loss.backward();
      opt.step();
      correct += logits.argmax(1).eq(yb).sum().item<int64_t>();
      seen += idx.size(0);
    }
  }
  net->freeze();
  return seen > 0 ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
}

void save_feature_net(FeatureNet& net, const std::string& path) {
  torch::serialize::OutputArchive ar;
  ar.write("num_classes", torch::tensor(net->num_classes));
  net->save(ar);
  ar.save_to(path);
}

FeatureNet load_feature_net(const std::string& path) {
  torch::serialize::InputArchive ar;
  ar.load_from(path);
  torch::Tensor classes;
  ar.read("num_classes", classes);
  FeatureNet net(classes.item<int64_t>());
  net->load(ar);
  net->freeze();
  return net;
}

torch::Tensor extract_features(FeatureNet& net, const torch::Tensor& images, int64_t chunk) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> parts;
  for (int64_t start = 0; start < images.size(0); start += chunk) {
    parts.push_back(net->pooled(images.slice(0, start, std::min(images.size(0), start + chunk))));
  }
  return torch::cat(parts, 0).to(torch::kFloat64);
}

}  // namespace eqvae
