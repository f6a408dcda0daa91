#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

namespace eqvae {

// Small fully convolutional network standing in for LPIPS/VGG (perceptual
// loss) and Inception (Frechet proxy). Either pretrained on a labelled
// desk-scale corpus or used with fixed seeded random weights.
struct FeatureNetImpl : torch::nn::Module {
  static constexpr int64_t kFeatureDim = 64;

  explicit FeatureNetImpl(int64_t num_classes = 0);

  // Activations of every stage, input in [-1, 1].
  std::vector<torch::Tensor> feature_maps(const torch::Tensor& x);
  // Global-average-pooled last stage, (N, kFeatureDim).
  torch::Tensor pooled(const torch::Tensor& x);
  torch::Tensor logits(const torch::Tensor& x);

  // Per-sample mean squared distance between feature maps, averaged over stages: (N).
  torch::Tensor perceptual_distance(const torch::Tensor& a, const torch::Tensor& b);

  void freeze();

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr}, conv4{nullptr};
  torch::nn::Linear head{nullptr};
  int64_t num_classes = 0;
};
TORCH_MODULE(FeatureNet);

// Fixed random features for a given seed.
FeatureNet make_random_feature_net(uint64_t seed);

struct FeaturePretrainConfig {
  int64_t epochs = 3;
  int64_t batch_size = 64;
  double lr = 1e-3;
  uint64_t seed = 0;
};

// Trains the classifier head and trunk on (images in [-1,1], integer labels); returns
// final training accuracy. The network is frozen afterwards.
double pretrain_feature_net(FeatureNet& net, const torch::Tensor& images, const torch::Tensor& labels,
                            const FeaturePretrainConfig& cfg);

void save_feature_net(FeatureNet& net, const std::string& path);
FeatureNet load_feature_net(const std::string& path);

// Pooled features of a large image tensor, evaluated in chunks without gradients.
torch::Tensor extract_features(FeatureNet& net, const torch::Tensor& images, int64_t chunk = 256);

}  // namespace eqvae
