#include "eqvae/probes.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

#include "eqvae/error.hpp"
#include "eqvae/tensor_transform.hpp"

namespace eqvae {

EncoderFn mean_encoder(LatentCodec& codec) {
  return [&codec](const torch::Tensor& x) {
    torch::NoGradGuard no_grad;
    return codec.encode(x).features;
  };
}

EquivarianceReport equivariance_error(const EncoderFn& encoder, const torch::Tensor& images,
                                      std::span<const Transform2D> transforms, int64_t compression,
                                      int64_t chunk) {
  if (images.size(0) == 0) throw DataError("equivariance_error: empty dataset");
  torch::NoGradGuard no_grad;
  EquivarianceReport report;
  report.n_samples = images.size(0);
  std::vector<double> sums(transforms.size(), 0.0);
  std::vector<int64_t> counts(transforms.size(), 0);
  for (int64_t start = 0; start < images.size(0); start += chunk) {
    auto x = images.slice(0, start, std::min(images.size(0), start + chunk));
    auto z = encoder(x).to(torch::kFloat64);
    for (size_t t = 0; t < transforms.size(); ++t) {
      const auto& tau = transforms[t];
      auto z_tau = apply_transform(z, tau);
      const GridShape target{compression * z_tau.size(2), compression * z_tau.size(3)};
      auto e_tau = encoder(apply_transform_sized(x, tau, target)).to(torch::kFloat64);
      auto num = (z_tau - e_tau).pow(2).sum({1, 2, 3});
      auto den = e_tau.pow(2).sum({1, 2, 3});
      auto num_a = num.accessor<double, 1>();
      auto den_a = den.accessor<double, 1>();
      for (int64_t i = 0; i < num.size(0); ++i) {
        if (den_a[i] == 0.0) {
          ++report.skipped;
          continue;
        }
        sums[t] += num_a[i] / den_a[i];
        ++counts[t];
      }
    }
  }
  double rot_sum = 0.0, scale_sum = 0.0;
  int rot_n = 0, scale_n = 0;
  for (size_t t = 0; t < transforms.size(); ++t) {
    const double err = counts[t] > 0 ? sums[t] / static_cast<double>(counts[t]) : 0.0;
    report.per_transform[transforms[t].descriptor()] = err;
    if (transforms[t].kind == TransformKind::kRotation) {
      rot_sum += err;
      ++rot_n;
    } else if (transforms[t].kind == TransformKind::kScale) {
      scale_sum += err;
      ++scale_n;
    }
  }
  report.rotation_mean = rot_n > 0 ? rot_sum / rot_n : 0.0;
  report.scale_mean = scale_n > 0 ? scale_sum / scale_n : 0.0;
  return report;
}

namespace {

torch::Tensor as_batch(const torch::Tensor& t) {
  auto d = t.to(torch::kFloat64);
  return d.dim() == 3 ? d.unsqueeze(0) : d;
}

torch::Tensor gaussian_window(int64_t size, double sigma) {
  auto coords = torch::arange(size, torch::kFloat64) - static_cast<double>(size - 1) / 2.0;
  auto g = torch::exp(-coords.pow(2) / (2.0 * sigma * sigma));
  g = g / g.sum();
  return g.unsqueeze(1).mm(g.unsqueeze(0));
}

}  // namespace

double psnr(const torch::Tensor& x, const torch::Tensor& x_hat, ValueRange range) {
  if (x.sizes() != x_hat.sizes()) throw ShapeError("psnr: shape mismatch");
  auto a = as_batch(x);
  auto b = as_batch(x_hat);
  auto mse = (a - b).pow(2).mean({1, 2, 3});
  const double peak = static_cast<double>(range.hi) - static_cast<double>(range.lo);
  double total = 0.0;
  auto m = mse.accessor<double, 1>();
  for (int64_t i = 0; i < mse.size(0); ++i) {
    const double v = m[i] == 0.0 ? kPsnrCap : std::min(kPsnrCap, 10.0 * std::log10(peak * peak / m[i]));
    total += v;
  }
  return total / static_cast<double>(mse.size(0));
}

double ssim(const torch::Tensor& x, const torch::Tensor& x_hat, ValueRange range) {
  if (x.sizes() != x_hat.sizes()) throw ShapeError("ssim: shape mismatch");
  auto a = as_batch(x);
  auto b = as_batch(x_hat);
  const int64_t channels = a.size(1);
  int64_t win = std::min<int64_t>({11, a.size(2), a.size(3)});
  if (win % 2 == 0) --win;
  const double peak = static_cast<double>(range.hi) - static_cast<double>(range.lo);
  const double c1 = std::pow(0.01 * peak, 2);
  const double c2 = std::pow(0.03 * peak, 2);
  auto kernel = gaussian_window(win, 1.5).expand({channels, 1, win, win}).contiguous();
  auto filt = [&](const torch::Tensor& t) {
    return torch::nn::functional::conv2d(t, kernel, torch::nn::functional::Conv2dFuncOptions().groups(channels));
  };
  auto mu_a = filt(a);
  auto mu_b = filt(b);
  auto var_a = filt(a * a) - mu_a.pow(2);
  auto var_b = filt(b * b) - mu_b.pow(2);
  auto cov = filt(a * b) - mu_a * mu_b;
  auto map = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) /
             ((mu_a.pow(2) + mu_b.pow(2) + c1) * (var_a + var_b + c2));
  return map.mean().item<double>();
}

FrechetStats FrechetStats::from_features(const Eigen::MatrixXd& rows) {
  if (rows.rows() < 2) throw DataError("Frechet stats need at least 2 samples");
  FrechetStats s;
  s.n = rows.rows();
  s.mean = rows.colwise().mean().transpose();
  const Eigen::MatrixXd centered = rows.rowwise() - s.mean.transpose();
  s.covariance = (centered.transpose() * centered) / static_cast<double>(s.n - 1);
  s.covariance = 0.5 * (s.covariance + s.covariance.transpose());
  return s;
}

FrechetStats FrechetStats::from_features(const torch::Tensor& rows) {
  auto t = rows.detach().to(torch::kCPU, torch::kFloat64).contiguous();
  if (t.dim() != 2) throw ShapeError("feature matrix must be 2-D");
  Eigen::MatrixXd m(t.size(0), t.size(1));
  auto acc = t.accessor<double, 2>();
  for (int64_t i = 0; i < t.size(0); ++i) {
    for (int64_t j = 0; j < t.size(1); ++j) m(i, j) = acc[i][j];
  }
  return from_features(m);
}

void FrechetStats::validate() const {
  if (n < 2) throw DataError("Frechet stats need n >= 2");
  if (covariance.rows() != mean.size() || covariance.cols() != mean.size()) {
    throw ShapeError("Frechet stats: covariance/mean dimension mismatch");
  }
  if ((covariance - covariance.transpose()).cwiseAbs().maxCoeff() > 1e-8) {
    throw NumericalError("Frechet stats: covariance is not symmetric");
  }
}

namespace {

// Symmetric PSD eigenvalues with small negative values clipped to zero.
Eigen::VectorXd clipped_eigenvalues(const Eigen::VectorXd& values) {
  const double scale = std::max(1.0, values.cwiseAbs().maxCoeff());
  const double tol = 1e-6 * scale;
  Eigen::VectorXd out = values;
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    if (out(i) < -tol) throw NumericalError("matrix is not positive semidefinite within tolerance");
    out(i) = std::max(0.0, out(i));
  }
  return out;
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  if (es.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
  const Eigen::VectorXd vals = clipped_eigenvalues(es.eigenvalues()).cwiseSqrt();
  return es.eigenvectors() * vals.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const FrechetStats& a, const FrechetStats& b) {
  a.validate();
  b.validate();
  if (a.mean.size() != b.mean.size()) throw ShapeError("Frechet distance: feature dims differ");
  // tr((Sa Sb)^{1/2}) = tr((Sa^{1/2} Sb Sa^{1/2})^{1/2}), the latter symmetric PSD.
  const Eigen::MatrixXd root_a = psd_sqrt(a.covariance);
  const Eigen::MatrixXd inner = root_a * b.covariance * root_a;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
  const double tr_sqrt = clipped_eigenvalues(es.eigenvalues()).cwiseSqrt().sum();
  const double mean_term = (a.mean - b.mean).squaredNorm();
  return mean_term + a.covariance.trace() + b.covariance.trace() - 2.0 * tr_sqrt;
}

// ---- kd-tree -----------------------------------------------------------------

namespace {

class KdTree {
 public:
  explicit KdTree(const Eigen::MatrixXd& points) : pts_(points), order_(points.rows()) {
    std::iota(order_.begin(), order_.end(), Eigen::Index{0});
    nodes_.reserve(static_cast<size_t>(2 * points.rows() / kLeaf + 2));
    build(0, static_cast<Eigen::Index>(order_.size()));
  }

  // Squared distances to the two nearest other points.
  std::pair<double, double> two_nearest(Eigen::Index query) const {
    Best best;
    search(0, query, best);
    return {best.d1, best.d2};
  }

 private:
  static constexpr Eigen::Index kLeaf = 12;

  struct Node {
    Eigen::Index begin = 0, end = 0;
    int dim = -1;  // -1 for leaves
    double split = 0.0;
    int left = -1, right = -1;
  };

  struct Best {
    double d1 = std::numeric_limits<double>::infinity();
    double d2 = std::numeric_limits<double>::infinity();
    void offer(double d) {
      if (d < d1) {
        d2 = d1;
        d1 = d;
      } else if (d < d2) {
        d2 = d;
      }
    }
  };

  int build(Eigen::Index begin, Eigen::Index end) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back({begin, end});
    if (end - begin <= kLeaf) return id;
    int dim = 0;
    double spread = -1.0;
    for (Eigen::Index d = 0; d < pts_.cols(); ++d) {
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (Eigen::Index i = begin; i < end; ++i) {
        lo = std::min(lo, pts_(order_[i], d));
        hi = std::max(hi, pts_(order_[i], d));
      }
      if (hi - lo > spread) {
        spread = hi - lo;
        dim = static_cast<int>(d);
      }
    }
    const Eigen::Index mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](Eigen::Index a, Eigen::Index b) { return pts_(a, dim) < pts_(b, dim); });
    const double split = pts_(order_[mid], dim);
    const int left = build(begin, mid);
    const int right = build(mid, end);
    nodes_[id].dim = dim;
    nodes_[id].split = split;
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  void search(int node_id, Eigen::Index query, Best& best) const {
    const Node& node = nodes_[static_cast<size_t>(node_id)];
    if (node.dim < 0) {
      for (Eigen::Index i = node.begin; i < node.end; ++i) {
        const Eigen::Index p = order_[i];
        if (p == query) continue;
        best.offer((pts_.row(p) - pts_.row(query)).squaredNorm());
      }
      return;
    }
    const double diff = pts_(query, node.dim) - node.split;
    const int near = diff < 0.0 ? node.left : node.right;
    const int far = diff < 0.0 ? node.right : node.left;
    search(near, query, best);
    if (diff * diff <= best.d2) search(far, query, best);
  }

  const Eigen::MatrixXd& pts_;
  std::vector<Eigen::Index> order_;
  std::vector<Node> nodes_;
};

}  // namespace

Eigen::MatrixXd two_nearest_distances(const Eigen::MatrixXd& points) {
  if (points.rows() < 3) throw DataError("need at least 3 points for two nearest neighbours");
  KdTree tree(points);
  Eigen::MatrixXd out(points.rows(), 2);
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const auto [d1, d2] = tree.two_nearest(i);
    out(i, 0) = std::sqrt(d1);
    out(i, 1) = std::sqrt(d2);
  }
  return out;
}

IdEstimate twonn_intrinsic_dimension(const Eigen::MatrixXd& points, double discard_fraction) {
  if (!(discard_fraction >= 0.0 && discard_fraction < 1.0)) {
    throw ConfigError("discard_fraction must lie in [0, 1)");
  }
  IdEstimate est;
  est.n_points = points.rows();

  // Remove exact duplicates (lexicographic sort, keep first).
  std::vector<Eigen::Index> idx(static_cast<size_t>(points.rows()));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  auto row_less = [&](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index d = 0; d < points.cols(); ++d) {
      if (points(a, d) != points(b, d)) return points(a, d) < points(b, d);
    }
    return a < b;
  };
  std::sort(idx.begin(), idx.end(), row_less);
  std::vector<Eigen::Index> unique;
  for (size_t i = 0; i < idx.size(); ++i) {
    if (i > 0 && points.row(idx[i]) == points.row(idx[i - 1])) continue;
    unique.push_back(idx[i]);
  }
  std::sort(unique.begin(), unique.end());
  est.discarded_pairs = est.n_points - static_cast<int64_t>(unique.size());
  if (static_cast<int64_t>(unique.size()) < kMinIdPoints) {
    throw DegenerateInputError("TwoNN needs at least " + std::to_string(kMinIdPoints) +
                               " distinct points, got " + std::to_string(unique.size()));
  }
  Eigen::MatrixXd pts(static_cast<Eigen::Index>(unique.size()), points.cols());
  for (size_t i = 0; i < unique.size(); ++i) pts.row(static_cast<Eigen::Index>(i)) = points.row(unique[i]);

  const Eigen::MatrixXd r = two_nearest_distances(pts);
  std::vector<double> log_mu(static_cast<size_t>(r.rows()));
  for (Eigen::Index i = 0; i < r.rows(); ++i) {
    if (r(i, 0) <= 0.0) throw std::logic_error("TwoNN: zero nearest-neighbour distance after dedup");
    log_mu[static_cast<size_t>(i)] = std::log(r(i, 1) / r(i, 0));
  }
  std::sort(log_mu.begin(), log_mu.end());
  const auto n = static_cast<int64_t>(log_mu.size());
  const auto kept = std::max<int64_t>(1, static_cast<int64_t>(std::floor(static_cast<double>(n) * (1.0 - discard_fraction))));
  // log(mu) ~ Exp(id); the discarded tail is right-censored at the largest kept value.
  const double threshold = log_mu[static_cast<size_t>(kept - 1)];
  double denom = static_cast<double>(n - kept) * threshold;
  for (int64_t i = 0; i < kept; ++i) denom += log_mu[static_cast<size_t>(i)];
  if (!(denom > 0.0)) throw NumericalError("TwoNN: degenerate neighbour ratios");
  est.id = static_cast<double>(kept) / denom;
  return est;
}

Eigen::MatrixXd latent_point_cloud(const torch::Tensor& latents, IdPooling pooling, int64_t max_points,
                                   uint64_t seed) {
  if (latents.dim() != 4) throw ShapeError("latent_point_cloud expects (N, c, h, w)");
  auto t = latents.detach().to(torch::kCPU, torch::kFloat64);
  if (pooling == IdPooling::kPerSite) {
    t = t.permute({0, 2, 3, 1}).reshape({-1, latents.size(1)});
  } else {
    t = t.reshape({latents.size(0), -1});
  }
  t = t.contiguous();
  const int64_t total = t.size(0);
  std::vector<int64_t> rows(static_cast<size_t>(total));
  std::iota(rows.begin(), rows.end(), int64_t{0});
  if (total > max_points) {
    Rng rng(seed);
    std::shuffle(rows.begin(), rows.end(), rng);
    rows.resize(static_cast<size_t>(max_points));
    std::sort(rows.begin(), rows.end());
  }
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), t.size(1));
  auto acc = t.accessor<double, 2>();
  for (size_t i = 0; i < rows.size(); ++i) {
    for (int64_t j = 0; j < t.size(1); ++j) out(static_cast<Eigen::Index>(i), j) = acc[rows[i]][j];
  }
  return out;
}

std::vector<FeatureGrid> pca_latent_visualization(const std::vector<FeatureGrid>& latents) {
  if (latents.empty()) throw DataError("PCA visualisation needs at least one latent");
  const int64_t c = latents.front().channels();
  if (c < 3) throw DegenerateInputError("PCA visualisation needs >= 3 latent channels");
  int64_t sites = 0;
  for (const auto& g : latents) {
    if (g.channels() != c) throw ShapeError("latents must share the channel count");
    sites += g.height() * g.width();
  }
  Eigen::MatrixXd data(sites, c);
  int64_t row = 0;
  for (const auto& g : latents) {
    for (int64_t y = 0; y < g.height(); ++y) {
      for (int64_t x = 0; x < g.width(); ++x, ++row) {
        for (int64_t ch = 0; ch < c; ++ch) data(row, ch) = g.at(ch, y, x);
      }
    }
  }
  const Eigen::RowVectorXd mean = data.colwise().mean();
  const Eigen::MatrixXd centered = data.rowwise() - mean;
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(std::max<int64_t>(1, sites - 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw NumericalError("PCA eigendecomposition failed");
  // Eigen sorts eigenvalues ascending.
  const Eigen::VectorXd vals = es.eigenvalues();
  const double top = vals(c - 1);
  if (!(top > 0.0) || vals(c - 3) <= 1e-12 * top) {
    throw DegenerateInputError("latent covariance has rank < 3");
  }
  Eigen::MatrixXd components(c, 3);
  for (int k = 0; k < 3; ++k) {
    Eigen::VectorXd v = es.eigenvectors().col(c - 1 - k);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;  // deterministic sign
    components.col(k) = v;
  }
  const Eigen::MatrixXd proj = centered * components;
  const Eigen::RowVectorXd lo = proj.colwise().minCoeff();
  const Eigen::RowVectorXd span = proj.colwise().maxCoeff() - lo;

  std::vector<FeatureGrid> out;
  row = 0;
  for (const auto& g : latents) {
    FeatureGrid rgb(3, g.height(), g.width());
    rgb.value_range = ValueRange{0.0f, 1.0f};
    for (int64_t y = 0; y < g.height(); ++y) {
      for (int64_t x = 0; x < g.width(); ++x, ++row) {
        for (int k = 0; k < 3; ++k) {
          rgb.at(k, y, x) = static_cast<float>((proj(row, k) - lo(k)) / span(k));
        }
      }
    }
    out.push_back(std::move(rgb));
  }
  return out;
}

}  // namespace eqvae
