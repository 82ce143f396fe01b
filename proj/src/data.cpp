#include "dkfac/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

namespace dkfac::data {

void Dataset::validate() const {
  if (static_cast<Eigen::Index>(labels.size()) != inputs.rows()) {
    throw DimensionError("dataset has " + std::to_string(inputs.rows()) + " samples but " +
                         std::to_string(labels.size()) + " labels");
  }
  if (shape.size() != inputs.cols()) throw DimensionError("dataset shape does not match feature count");
  for (int y : labels) {
    if (y < 0 || y >= n_classes) throw ValueError("label " + std::to_string(y) + " out of range");
  }
}

namespace {
nn::Shape shape_for(int n_features) {
  const auto side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n_features))));
  if (side > 1 && side * side == n_features) return nn::Shape{1, side, side};
  return nn::Shape{n_features, 1, 1};
}
}  // namespace

Dataset gen_synthetic(std::uint64_t seed, int n_samples, int n_features, int n_classes, double difficulty) {
  if (n_samples < 1 || n_features < 1 || n_classes < 1) {
    throw ValueError("gen_synthetic: counts must be positive");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  MatrixXd centers(n_classes, n_features);
  for (int c = 0; c < n_classes; ++c) {
    VectorXd v(n_features);
    for (int j = 0; j < n_features; ++j) v(j) = normal(rng);
    centers.row(c) = (difficulty / v.norm()) * v.transpose();
  }

  std::vector<int> labels(static_cast<std::size_t>(n_samples));
  for (int i = 0; i < n_samples; ++i) labels[static_cast<std::size_t>(i)] = i % n_classes;
  std::shuffle(labels.begin(), labels.end(), rng);

  Dataset ds;
  ds.inputs.resize(n_samples, n_features);
  for (int i = 0; i < n_samples; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    for (int j = 0; j < n_features; ++j) ds.inputs(i, j) = centers(y, j) + normal(rng);
  }
  ds.labels = std::move(labels);
  ds.n_classes = n_classes;
  ds.shape = shape_for(n_features);
  return ds;
}

Dataset slice(const Dataset& ds, Eigen::Index begin, Eigen::Index end) {
  if (begin < 0 || end > ds.size() || begin > end) throw DimensionError("slice: range out of bounds");
  Dataset out;
  out.inputs = ds.inputs.middleRows(begin, end - begin);
  out.labels.assign(ds.labels.begin() + begin, ds.labels.begin() + end);
  out.n_classes = ds.n_classes;
  out.shape = ds.shape;
  return out;
}

Split gen_synthetic_split(std::uint64_t seed, int n_train, int n_val, int n_features, int n_classes,
                          double difficulty) {
  Dataset all = gen_synthetic(seed, n_train + n_val, n_features, n_classes, difficulty);
  return Split{slice(all, 0, n_train), slice(all, n_train, n_train + n_val)};
}

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08x", static_cast<unsigned>(v));
  return buf;
}

std::vector<std::uint8_t> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset, const std::filesystem::path& path) {
  if (bytes.size() < offset + 4) throw FormatError(path.string() + ": truncated header");
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>((v >> 24) & 0xff), static_cast<char>((v >> 16) & 0xff),
                     static_cast<char>((v >> 8) & 0xff), static_cast<char>(v & 0xff)};
  out.write(b, 4);
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, int n_classes) {
  const auto img = read_all(images);
  const auto lab = read_all(labels);

  const std::uint32_t img_magic = read_be32(img, 0, images);
  if (img_magic != kImageMagic) {
    throw FormatError(images.string() + ": bad magic " + hex32(img_magic) + " for an image file");
  }
  const std::uint32_t lab_magic = read_be32(lab, 0, labels);
  if (lab_magic != kLabelMagic) {
    throw FormatError(labels.string() + ": bad magic " + hex32(lab_magic) + " for a label file");
  }

  const std::uint64_t n = read_be32(img, 4, images);
  const std::uint64_t h = read_be32(img, 8, images);
  const std::uint64_t w = read_be32(img, 12, images);
  const std::uint64_t n_labels = read_be32(lab, 4, labels);
  if (img.size() != 16 + n * h * w) {
    throw FormatError(images.string() + ": expected " + std::to_string(16 + n * h * w) + " bytes, found " +
                      std::to_string(img.size()));
  }
  if (lab.size() != 8 + n_labels) {
    throw FormatError(labels.string() + ": expected " + std::to_string(8 + n_labels) + " bytes, found " +
                      std::to_string(lab.size()));
  }
  if (n != n_labels) {
    throw FormatError("image count " + std::to_string(n) + " does not match label count " + std::to_string(n_labels));
  }
  if (n == 0 || h == 0 || w == 0) throw FormatError(images.string() + ": empty image tensor");

  Dataset ds;
  const auto features = static_cast<Eigen::Index>(h * w);
  ds.inputs.resize(static_cast<Eigen::Index>(n), features);
  for (std::uint64_t i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < features; ++j)
      ds.inputs(static_cast<Eigen::Index>(i), j) = img[16 + i * h * w + static_cast<std::uint64_t>(j)] / 255.0;
  ds.labels.reserve(n);
  int max_label = 0;
  for (std::uint64_t i = 0; i < n; ++i) {
    ds.labels.push_back(lab[8 + i]);
    max_label = std::max(max_label, ds.labels.back());
  }
  ds.n_classes = n_classes > 0 ? n_classes : max_label + 1;
  if (max_label >= ds.n_classes) throw FormatError(labels.string() + ": label exceeds class count");
  ds.shape = nn::Shape{1, static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(w)};
  return ds;
}

void write_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
               const std::vector<std::vector<std::uint8_t>>& pixels, int height, int width,
               const std::vector<std::uint8_t>& label_values) {
  std::ofstream img(images, std::ios::binary);
  std::ofstream lab(labels, std::ios::binary);
  if (!img || !lab) throw FormatError("cannot write IDX files");
  put_be32(img, kImageMagic);
  put_be32(img, static_cast<std::uint32_t>(pixels.size()));
  put_be32(img, static_cast<std::uint32_t>(height));
  put_be32(img, static_cast<std::uint32_t>(width));
  for (const auto& p : pixels) {
    if (p.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width)) {
      throw DimensionError("write_idx: image size mismatch");
    }
    img.write(reinterpret_cast<const char*>(p.data()), static_cast<std::streamsize>(p.size()));
  }
  put_be32(lab, kLabelMagic);
  put_be32(lab, static_cast<std::uint32_t>(label_values.size()));
  lab.write(reinterpret_cast<const char*>(label_values.data()), static_cast<std::streamsize>(label_values.size()));
}

std::vector<Eigen::Index> epoch_permutation(Eigen::Index n, std::uint64_t seed, int epoch) {
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Eigen::Index(0));
  std::mt19937_64 rng(seed ^ static_cast<std::uint64_t>(epoch));
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

}  // namespace dkfac::data
