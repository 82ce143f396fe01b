#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dkfac/linalg.hpp"
#include "dkfac/nn.hpp"

namespace dkfac::data {

struct Dataset {
  MatrixXd inputs;  // samples x features
  std::vector<int> labels;
  int n_classes = 0;
  nn::Shape shape;  // per-sample geometry; shape.size() == inputs.cols()

  Eigen::Index size() const { return inputs.rows(); }
  void validate() const;
};

struct Split {
  Dataset train;
  Dataset val;
};

/// Gaussian mixture: class c is centred at a seeded random unit vector times
/// `difficulty`, samples add unit-variance noise. Labels cycle through the
/// classes before a seeded shuffle. Square feature counts get a 1 x s x s
/// image shape so conv models can consume them.
Dataset gen_synthetic(std::uint64_t seed, int n_samples, int n_features, int n_classes, double difficulty);

/// Generates n_train + n_val samples and splits them.
Split gen_synthetic_split(std::uint64_t seed, int n_train, int n_val, int n_features, int n_classes,
                          double difficulty);

/// Rows [begin, end) of `ds`.
Dataset slice(const Dataset& ds, Eigen::Index begin, Eigen::Index end);

/// IDX files: big-endian, magic 0x00000803 for u8 images (N x H x W) and
/// 0x00000801 for u8 labels. Pixels are scaled to [0, 1].
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, int n_classes = 0);

/// Writes an IDX image/label pair; pixels are clamped to [0, 1] and quantized.
void write_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
               const std::vector<std::vector<std::uint8_t>>& pixels, int height, int width,
               const std::vector<std::uint8_t>& label_values);

/// Contiguous slices by rank of a permutation of [0, n) shuffled with
/// seed ^ epoch.
std::vector<Eigen::Index> epoch_permutation(Eigen::Index n, std::uint64_t seed, int epoch);

}  // namespace dkfac::data
