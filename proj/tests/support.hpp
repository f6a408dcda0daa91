#pragma once

// Oracles and fixtures shared by the unit tests and the acceptance binary. The
// oracles do not call into the library code they check.

#include <torch/torch.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <utility>
#include <vector>

#include "eqvae/autoencoder.hpp"
#include "eqvae/tensor_transform.hpp"

namespace eqvae::testing {

using LMatrix = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;

// Principal square root by the Denman-Beavers iteration.
inline LMatrix sqrtm_denman_beavers(const LMatrix& a, int max_iter = 200) {
  const auto n = a.rows();
  LMatrix y = a;
  LMatrix z = LMatrix::Identity(n, n);
  for (int i = 0; i < max_iter; ++i) {
    const LMatrix y_inv = y.inverse();
    const LMatrix z_inv = z.inverse();
    const LMatrix y_next = (y + z_inv) / 2.0L;
    const LMatrix z_next = (z + y_inv) / 2.0L;
    const long double delta = (y_next - y).norm() / std::max(y_next.norm(), 1e-300L);
    y = y_next;
    z = z_next;
    if (delta < 1e-17L) break;
  }
  return y;
}

inline double frechet_oracle(const Eigen::VectorXd& mu_a, const Eigen::MatrixXd& cov_a, const Eigen::VectorXd& mu_b,
                             const Eigen::MatrixXd& cov_b) {
  const LMatrix a = cov_a.cast<long double>();
  const LMatrix b = cov_b.cast<long double>();
  const LMatrix root = sqrtm_denman_beavers(a * b);
  const long double mean_term = (mu_a - mu_b).cast<long double>().squaredNorm();
  return static_cast<double>(mean_term + a.trace() + b.trace() - 2.0L * root.trace());
}

// Random symmetric positive definite matrix with eigenvalues in [lo, hi].
inline Eigen::MatrixXd random_spd(int n, std::mt19937_64& rng, double lo = 0.1, double hi = 3.0) {
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> uni(lo, hi);
  Eigen::MatrixXd g(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) g(i, j) = normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  const Eigen::MatrixXd q = qr.householderQ();
  Eigen::VectorXd eig(n);
  for (int i = 0; i < n; ++i) eig(i) = uni(rng);
  return q * eig.asDiagonal() * q.transpose();
}

// Random orthonormal columns (ambient x intrinsic).
inline Eigen::MatrixXd random_embedding(int ambient, int intrinsic, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Eigen::MatrixXd g(ambient, ambient);
  for (int i = 0; i < ambient; ++i)
    for (int j = 0; j < ambient; ++j) g(i, j) = normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  const Eigen::MatrixXd q = qr.householderQ();
  return q.leftCols(intrinsic);
}

// Uniform samples of a d-dimensional unit cube (d = 1: segment, d = 2: square)
// or the unit d-ball, rotated into `ambient` dimensions.
inline Eigen::MatrixXd manifold_points(int n, int intrinsic, int ambient, bool ball, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  Eigen::MatrixXd local(n, intrinsic);
  for (int i = 0; i < n; ++i) {
    while (true) {
      for (int d = 0; d < intrinsic; ++d) local(i, d) = uni(rng);
      if (!ball || local.row(i).squaredNorm() <= 1.0) break;
    }
  }
  return local * random_embedding(ambient, intrinsic, rng).transpose();
}

// O(N^2) nearest and second-nearest distances.
inline Eigen::MatrixXd brute_two_nn(const Eigen::MatrixXd& pts) {
  const auto n = pts.rows();
  Eigen::MatrixXd out(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    double r1 = std::numeric_limits<double>::infinity();
    double r2 = r1;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) continue;
      const double d = (pts.row(i) - pts.row(j)).squaredNorm();
      if (d < r1) {
        r2 = r1;
        r1 = d;
      } else if (d < r2) {
        r2 = d;
      }
    }
    out(i, 0) = std::sqrt(r1);
    out(i, 1) = std::sqrt(r2);
  }
  return out;
}

// Mean per-image PSNR by explicit loops, images (N, C, H, W) float tensors.
inline double psnr_loop(const torch::Tensor& x, const torch::Tensor& y, double lo = -1.0, double hi = 1.0) {
  const auto a = x.to(torch::kFloat64).contiguous();
  const auto b = y.to(torch::kFloat64).contiguous();
  const auto* pa = a.data_ptr<double>();
  const auto* pb = b.data_ptr<double>();
  const int64_t n = a.size(0);
  const int64_t per = a.numel() / n;
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double se = 0.0;
    for (int64_t k = 0; k < per; ++k) {
      const double d = pa[i * per + k] - pb[i * per + k];
      se += d * d;
    }
    const double mse = se / static_cast<double>(per);
    total += mse == 0.0 ? 100.0 : std::min(100.0, 10.0 * std::log10((hi - lo) * (hi - lo) / mse));
  }
  return total / static_cast<double>(n);
}

// Encoder that bicubically downsamples by `f`; equivariant to quarter turns.
class DownsampleCodec : public LatentCodec {
 public:
  explicit DownsampleCodec(int64_t f) : f_(f) {}
  LatentMode latent_mode() const override { return LatentMode::kContinuous; }
  int64_t compression() const override { return f_; }
  EncoderOutput encode(const torch::Tensor& x) override {
    auto z = resize_bicubic(x, x.size(2) / f_, x.size(3) / f_);
    return {z, torch::zeros_like(z)};
  }
  torch::Tensor decode(const torch::Tensor& z) override {
    return resize_bicubic(z, z.size(2) * f_, z.size(3) * f_);
  }

 private:
  int64_t f_;
};

// Central finite-difference check of d f / d x against autograd, in double.
// Returns the largest relative error max|g_fd - g_ad| / max(max|g_ad|, 1e-8) over
// every `stride`-th coordinate.
inline double gradient_check(const std::function<torch::Tensor(const torch::Tensor&)>& f, torch::Tensor x,
                             double eps = 1e-3, int64_t stride = 1) {
  x = x.to(torch::kFloat64).detach().clone().requires_grad_(true);
  auto y = f(x);
  auto g = torch::autograd::grad({y}, {x})[0].detach().contiguous();
  auto xd = x.detach().clone().contiguous();
  auto* p = xd.data_ptr<double>();
  const auto* pg = g.data_ptr<double>();
  double worst = 0.0;
  const double scale = std::max(g.abs().max().item<double>(), 1e-8);
  torch::NoGradGuard no_grad;
  for (int64_t i = 0; i < xd.numel(); i += stride) {
    const double orig = p[i];
    p[i] = orig + eps;
    const double up = f(xd).item<double>();
    p[i] = orig - eps;
    const double down = f(xd).item<double>();
    p[i] = orig;
    const double fd = (up - down) / (2.0 * eps);
    worst = std::max(worst, std::abs(fd - pg[i]) / scale);
  }
  return worst;
}

// Central finite differences of a scalar loss with respect to `count` randomly
// chosen parameter entries. Returns the norm-wise relative error
// ||fd - ad|| / max(||fd||, ||ad||, 1e-12) over the chosen entries.
inline double parameter_gradient_check(const std::function<torch::Tensor()>& loss,
                                       const std::vector<torch::Tensor>& params, std::mt19937_64& rng,
                                       int count = 5, double eps = 1e-3) {
  std::vector<torch::Tensor> live;
  int64_t total = 0;
  for (const auto& p : params) {
    if (p.requires_grad()) {
      live.push_back(p);
      total += p.numel();
    }
  }
  const auto grads = torch::autograd::grad({loss()}, live, {}, false, false, true);
  std::uniform_int_distribution<int64_t> pick(0, total - 1);
  double diff = 0.0, norm_fd = 0.0, norm_ad = 0.0;
  torch::NoGradGuard no_grad;
  for (int k = 0; k < count; ++k) {
    int64_t flat = pick(rng);
    size_t which = 0;
    while (flat >= live[which].numel()) flat -= live[which++].numel();
    auto view = live[which].view({-1});
    const double ad = grads[which].defined() ? grads[which].reshape({-1})[flat].item<double>() : 0.0;
    const double orig = view[flat].item<double>();
    view[flat] = orig + eps;
    const double up = loss().item<double>();
    view[flat] = orig - eps;
    const double down = loss().item<double>();
    view[flat] = orig;
    const double fd = (up - down) / (2.0 * eps);
    diff += (fd - ad) * (fd - ad);
    norm_fd += fd * fd;
    norm_ad += ad * ad;
  }
  return std::sqrt(diff) / std::max({std::sqrt(norm_fd), std::sqrt(norm_ad), 1e-12});
}

}  // namespace eqvae::testing
