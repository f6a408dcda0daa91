#pragma once

#include <torch/torch.h>

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "eqvae/autoencoder.hpp"
#include "eqvae/feature_grid.hpp"
#include "eqvae/transform2d.hpp"

namespace eqvae {

// ---- equivariance error ----------------------------------------------------

// Maps an (N, 3, H, W) batch to deterministic latents (posterior means).
using EncoderFn = std::function<torch::Tensor(const torch::Tensor&)>;

EncoderFn mean_encoder(LatentCodec& codec);

struct EquivarianceReport {
  std::map<std::string, double> per_transform;
  double rotation_mean = 0.0;  // over rotation-only entries
  double scale_mean = 0.0;     // over scale-only entries
  int64_t n_samples = 0;
  int64_t skipped = 0;  // samples with ||E(tau x)|| = 0
};

// Normalised error ||tau E(x) - E(tau x)||^2 / ||E(tau x)||^2 averaged per transform.
// tau(x) is resampled to exactly `compression` times the transformed latent size.
EquivarianceReport equivariance_error(const EncoderFn& encoder, const torch::Tensor& images,
                                      std::span<const Transform2D> transforms, int64_t compression,
                                      int64_t chunk = 64);

// ---- reconstruction metrics -----------------------------------------------

inline constexpr double kPsnrCap = 100.0;

// Mean per-image PSNR (dB) for (C,H,W) or (N,C,H,W) inputs on a value range.
double psnr(const torch::Tensor& x, const torch::Tensor& x_hat, ValueRange range = {});
// Mean per-image SSIM, 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03.
double ssim(const torch::Tensor& x, const torch::Tensor& x_hat, ValueRange range = {});

// ---- Frechet distance -------------------------------------------------------

struct FrechetStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
  int64_t n = 0;

  static FrechetStats from_features(const Eigen::MatrixXd& rows);  // one sample per row
  static FrechetStats from_features(const torch::Tensor& rows);
  void validate() const;
};

// ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2}), square root by eigendecomposition.
double frechet_distance(const FrechetStats& a, const FrechetStats& b);

// ---- intrinsic dimension ----------------------------------------------------

struct IdEstimate {
  double id = 0.0;
  int64_t n_points = 0;         // points supplied
  int64_t discarded_pairs = 0;  // exact duplicates removed
};

inline constexpr int64_t kMinIdPoints = 100;

// TwoNN: mu_i = r2 / r1 per point, top `discard_fraction` of mu treated as censored.
IdEstimate twonn_intrinsic_dimension(const Eigen::MatrixXd& points, double discard_fraction = 0.1);

enum class IdPooling { kPerSite, kWholeLatent };

// Latents (N, c, h, w) -> point cloud: one c-vector per spatial site, or one
// flattened latent per image. Subsampled (seeded) to at most `max_points`.
Eigen::MatrixXd latent_point_cloud(const torch::Tensor& latents, IdPooling pooling,
                                   int64_t max_points = 50000, uint64_t seed = 0);

// Exact 2-nearest-neighbour distances via a kd-tree: columns (r1, r2).
Eigen::MatrixXd two_nearest_distances(const Eigen::MatrixXd& points);

// ---- PCA visualisation -------------------------------------------------------

// Fits PCA over every spatial site of every latent, projects onto the top three
// components and min-max normalises each to [0, 1]. Returns one RGB grid per latent.
std::vector<FeatureGrid> pca_latent_visualization(const std::vector<FeatureGrid>& latents);

}  // namespace eqvae
