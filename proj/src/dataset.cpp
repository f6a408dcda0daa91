#include "eqvae/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <random>
#include <sstream>

#include "eqvae/error.hpp"
#include "eqvae/transform2d.hpp"

namespace eqvae {

namespace fs = std::filesystem;

namespace {

constexpr int kSupersample = 4;

cv::Scalar random_colour(Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  return {u(rng), u(rng), u(rng)};
}

std::vector<cv::Point> regular_polygon(cv::Point2d centre, double radius, int sides, double phase) {
  std::vector<cv::Point> pts;
  for (int k = 0; k < sides; ++k) {
    const double a = phase + 2.0 * std::numbers::pi * k / sides;
    pts.emplace_back(static_cast<int>(std::lround(centre.x + radius * std::cos(a))),
                     static_cast<int>(std::lround(centre.y + radius * std::sin(a))));
  }
  return pts;
}

void draw_shape(cv::Mat& canvas, int cls, cv::Point2d centre, double radius, double phase, double aspect,
                const cv::Scalar& colour) {
  switch (cls) {
    case 0:
      cv::fillConvexPoly(canvas, regular_polygon(centre, radius, 3, phase), colour, cv::LINE_AA);
      break;
    case 1: {
      // Rectangle of the given aspect, rotated by phase.
      std::vector<cv::Point> pts;
      const double hw = radius, hh = radius * aspect;
      const double c = std::cos(phase), s = std::sin(phase);
      for (auto [dx, dy] : {std::pair{-hw, -hh}, {hw, -hh}, {hw, hh}, {-hw, hh}}) {
        pts.emplace_back(static_cast<int>(std::lround(centre.x + c * dx - s * dy)),
                         static_cast<int>(std::lround(centre.y + s * dx + c * dy)));
      }
      cv::fillConvexPoly(canvas, pts, colour, cv::LINE_AA);
      break;
    }
    case 2:
      cv::fillConvexPoly(canvas, regular_polygon(centre, radius, 6, phase), colour, cv::LINE_AA);
      break;
    default:
      cv::ellipse(canvas, cv::Point(static_cast<int>(centre.x), static_cast<int>(centre.y)),
                  cv::Size(static_cast<int>(radius), static_cast<int>(radius * aspect)),
                  phase * 180.0 / std::numbers::pi, 0.0, 360.0, colour, cv::FILLED, cv::LINE_AA);
      break;
  }
}

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

bool has_image_extension(const fs::path& p) {
  static const std::vector<std::string> kExt{".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp", ".ppm", ".pgm"};
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return std::find(kExt.begin(), kExt.end(), ext) != kExt.end();
}

std::map<std::string, int64_t> read_labels(const fs::path& dir) {
  std::map<std::string, int64_t> labels;
  std::ifstream in(dir / "labels.csv");
  if (!in) return labels;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) continue;
    labels[line.substr(0, comma)] = std::stoll(line.substr(comma + 1));
  }
  return labels;
}

torch::Tensor to_tensor_rgb(const cv::Mat& bgr, int64_t size) {
  const int side = std::min(bgr.rows, bgr.cols);
  const cv::Rect crop((bgr.cols - side) / 2, (bgr.rows - side) / 2, side, side);
  cv::Mat square = bgr(crop);
  cv::Mat resized;
  const int interp = side > size ? cv::INTER_AREA : cv::INTER_CUBIC;
  cv::resize(square, resized, cv::Size(static_cast<int>(size), static_cast<int>(size)), 0, 0, interp);
  cv::Mat rgb;
  cv::cvtColor(resized, rgb, cv::COLOR_BGR2RGB);
  auto t = torch::from_blob(rgb.data, {size, size, 3}, torch::kUInt8).clone();
  return (t.permute({2, 0, 1}).to(torch::kFloat32) / 127.5 - 1.0).clamp(-1.0, 1.0);
}

}  // namespace

void generate_shapes_corpus(const std::string& dir, const ShapesCorpusConfig& cfg) {
  if (cfg.count < 1 || cfg.image_size < 8 || cfg.max_shapes < 1) throw ConfigError("invalid shapes corpus config");
  fs::create_directories(dir);
  std::ofstream labels(fs::path(dir) / "labels.csv");
  labels << "file,label\n";
  const int big = static_cast<int>(cfg.image_size) * kSupersample;
  for (int64_t i = 0; i < cfg.count; ++i) {
    Rng rng(split_seed(cfg.seed, static_cast<uint64_t>(i)));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    // Two-colour vertical gradient background.
    cv::Mat canvas(big, big, CV_8UC3);
    const cv::Scalar top = random_colour(rng, 0, 120), bottom = random_colour(rng, 0, 120);
    for (int y = 0; y < big; ++y) {
      const double a = static_cast<double>(y) / (big - 1);
      canvas.row(y).setTo(top * (1.0 - a) + bottom * a);
    }
    std::uniform_int_distribution<int64_t> nshapes(1, cfg.max_shapes);
    std::uniform_int_distribution<int> cls_dist(0, kShapeClasses - 1);
    const int64_t n = nshapes(rng);
    std::vector<double> radii;
    for (int64_t k = 0; k < n; ++k) radii.push_back(big * (0.10 + 0.22 * u(rng)));
    std::sort(radii.rbegin(), radii.rend());
    int label = 0;
    for (int64_t k = 0; k < n; ++k) {
      const int cls = cls_dist(rng);
      if (k == 0) label = cls;
      const double r = radii[static_cast<size_t>(k)];
      const cv::Point2d centre(r + u(rng) * (big - 2 * r), r + u(rng) * (big - 2 * r));
      draw_shape(canvas, cls, centre, r, u(rng) * 2.0 * std::numbers::pi, 0.45 + 0.55 * u(rng),
                 random_colour(rng, 100, 255));
    }
    cv::Mat small;
    cv::resize(canvas, small, cv::Size(static_cast<int>(cfg.image_size), static_cast<int>(cfg.image_size)), 0, 0,
               cv::INTER_AREA);
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05lld.png", static_cast<long long>(i));
    if (!cv::imwrite((fs::path(dir) / name).string(), small)) throw DataError(std::string("cannot write ") + name);
    labels << name << "," << label << "\n";
  }
}

bool is_validation_file(const std::string& relative_path, uint64_t seed) {
  return split_seed(seed, fnv1a(relative_path)) % kValBuckets == 0;
}

DatasetHandle ingest_dataset(const std::string& path, int64_t image_size, uint64_t seed) {
  if (image_size < 1) throw ConfigError("image_size must be positive");
  const fs::path root(path);
  if (!fs::is_directory(root)) throw DataError("dataset path is not a directory: " + path);
  std::vector<std::string> files;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (entry.is_regular_file() && has_image_extension(entry.path())) {
      files.push_back(fs::relative(entry.path(), root).generic_string());
    }
  }
  std::sort(files.begin(), files.end());
  const auto labels = read_labels(root);

  DatasetHandle h;
  std::vector<torch::Tensor> train, val;
  std::vector<int64_t> train_y, val_y;
  bool all_labelled = !labels.empty();
  for (const auto& rel : files) {
    cv::Mat img = cv::imread((root / rel).string(), cv::IMREAD_COLOR);
    if (img.empty()) {
      ++h.skipped;
      h.warnings.push_back("skipping unreadable image: " + rel);
      std::cerr << "warning: " << h.warnings.back() << "\n";
      continue;
    }
    auto t = to_tensor_rgb(img, image_size);
    const auto it = labels.find(rel);
    if (it == labels.end()) all_labelled = false;
    const int64_t y = it == labels.end() ? -1 : it->second;
    if (is_validation_file(rel, seed)) {
      val.push_back(t);
      val_y.push_back(y);
      h.val_files.push_back(rel);
    } else {
      train.push_back(t);
      train_y.push_back(y);
      h.train_files.push_back(rel);
    }
  }
  if (train.empty() && val.empty()) throw DataError("no readable images under " + path);
  auto stack = [image_size](const std::vector<torch::Tensor>& v) {
    return v.empty() ? torch::empty({0, 3, image_size, image_size}) : torch::stack(v);
  };
  h.train = stack(train);
  h.val = stack(val);
  if (all_labelled) {
    h.train_labels = torch::tensor(train_y, torch::kLong);
    h.val_labels = torch::tensor(val_y, torch::kLong);
  }
  return h;
}

void write_png(const std::string& path, const torch::Tensor& image, int64_t upscale) {
  auto t = image.detach().to(torch::kCPU, torch::kFloat32);
  if (t.dim() == 4) t = t[0];
  if (t.dim() != 3 || t.size(0) != 3) throw ShapeError("write_png expects a (3, H, W) image");
  auto u8 = ((t.clamp(-1.0, 1.0) + 1.0) * 127.5).round().to(torch::kUInt8).permute({1, 2, 0}).contiguous();
  cv::Mat rgb(static_cast<int>(u8.size(0)), static_cast<int>(u8.size(1)), CV_8UC3, u8.data_ptr<uint8_t>());
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  if (upscale > 1) {
    cv::resize(bgr, bgr, cv::Size(), static_cast<double>(upscale), static_cast<double>(upscale), cv::INTER_NEAREST);
  }
  fs::create_directories(fs::path(path).parent_path());
  if (!cv::imwrite(path, bgr)) throw DataError("cannot write " + path);
}

}  // namespace eqvae
