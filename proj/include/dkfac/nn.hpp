#pragma once

// Minimal reverse-mode network core: linear, conv2d (via im2col) and ReLU
// layers with a softmax cross-entropy head. Trainable layers record their
// inputs and output gradients so curvature factors can be formed from them.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dkfac/linalg.hpp"

namespace dkfac::nn {

using Index = Eigen::Index;

enum class LayerKind { linear, conv2d, relu };

std::string to_string(LayerKind kind);

/// Activation geometry for one sample: channels x height x width.
struct Shape {
  Index channels = 1;
  Index height = 1;
  Index width = 1;

  Index size() const { return channels * height * width; }
  bool operator==(const Shape&) const = default;
};

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  Index in_features = 0;
  Index out_features = 0;
  Index in_channels = 0;
  Index out_channels = 0;
  Index kernel_h = 1;
  Index kernel_w = 1;
  Index stride = 1;
  Index padding = 0;
  bool has_bias = true;

  static LayerSpec linear(Index in, Index out, bool bias = true);
  static LayerSpec conv2d(Index in_channels, Index out_channels, Index kernel, Index stride = 1, Index padding = 0,
                          bool bias = true);
  static LayerSpec relu();

  bool trainable() const { return kind != LayerKind::relu; }
  // Columns of the weight matrix excluding the bias column.
  Index fan_in() const;
  Index fan_out() const;
  Shape output_shape(const Shape& input) const;
  void validate() const;
};

template <typename Scalar>
class Model {
 public:
  /// Builds the layer stack, checks shape conformance and initializes weights
  /// uniformly in [-sqrt(6/fan_in), sqrt(6/fan_in)] with zero bias.
  Model(Shape input, std::vector<LayerSpec> layers, std::uint64_t seed);

  const std::vector<LayerSpec>& layers() const { return layers_; }
  const Shape& input_shape() const { return shapes_.front(); }
  // Input shape of layer i; shapes().back() is the logits shape.
  const std::vector<Shape>& shapes() const { return shapes_; }
  Index num_classes() const { return shapes_.back().size(); }
  std::uint64_t seed() const { return seed_; }

  // Indices into layers() of the linear/conv2d layers, in order.
  const std::vector<std::size_t>& trainable() const { return trainable_; }
  std::size_t num_trainable() const { return trainable_.size(); }
  const LayerSpec& trainable_spec(std::size_t t) const { return layers_[trainable_[t]]; }

  // One matrix per trainable layer: out x (fan_in + bias).
  std::vector<Matrix<Scalar>>& weights() { return weights_; }
  const std::vector<Matrix<Scalar>>& weights() const { return weights_; }

  std::size_t parameter_count() const;

  template <typename Other>
  Model<Other> cast() const {
    Model<Other> out(input_shape(), layers_, seed_);
    for (std::size_t t = 0; t < weights_.size(); ++t) out.weights()[t] = weights_[t].template cast<Other>();
    return out;
  }

 private:
  std::vector<LayerSpec> layers_;
  std::vector<Shape> shapes_;
  std::vector<std::size_t> trainable_;
  std::vector<Matrix<Scalar>> weights_;
  std::uint64_t seed_;
};

/// Fully connected stack input -> widths... -> classes with ReLU between.
template <typename Scalar>
Model<Scalar> make_mlp(Shape input, std::span<const int> widths, Index classes, std::uint64_t seed);

/// Two 3x3 conv layers (the second with stride 2) followed by two linear
/// layers.
template <typename Scalar>
Model<Scalar> make_smallconv(Shape input, Index classes, std::uint64_t seed, Index channels = 4, Index hidden = 32);

template <typename Scalar>
struct LayerCapture {
  Matrix<Scalar> a_prev;  // rows x (fan_in + bias); bias column is all ones
  Matrix<Scalar> g_out;   // rows x fan_out; per-sample scale (batch size times mean-loss gradient)
  Matrix<Scalar> grad;    // weight gradient of the mean loss
};

template <typename Scalar>
struct BatchCapture {
  std::vector<LayerCapture<Scalar>> layers;  // one per trainable layer

  // Tape recorded by forward() and consumed by backward().
  std::vector<Matrix<Scalar>> inputs;  // input activation of every layer
  Matrix<Scalar> logits;
  Matrix<Scalar> probs;
  std::vector<int> labels;
  Scalar smoothing = 0;
  bool backward_done = false;

  Index batch_size() const { return logits.rows(); }
};

template <typename Scalar>
struct ForwardResult {
  Scalar loss;
  Index correct;  // argmax hits
  BatchCapture<Scalar> capture;
};

/// Rows of `input` are flattened samples in (channel, row, col) order.
template <typename Scalar>
Matrix<Scalar> im2col(const Matrix<Scalar>& input, const Shape& shape, const LayerSpec& spec);

/// Adjoint of im2col without the bias column.
template <typename Scalar>
Matrix<Scalar> col2im(const Matrix<Scalar>& cols, Index batch, const Shape& shape, const LayerSpec& spec);

template <typename Scalar>
Matrix<Scalar> predict(const Model<Scalar>& model, const Matrix<Scalar>& batch);

/// Softmax cross-entropy with label smoothing, averaged over the batch.
template <typename Scalar>
Scalar cross_entropy(const Matrix<Scalar>& logits, std::span<const int> labels, Scalar smoothing);

template <typename Scalar>
ForwardResult<Scalar> forward(const Model<Scalar>& model, const Matrix<Scalar>& batch, std::span<const int> labels,
                              Scalar smoothing);

/// Fills g_out and grad of every trainable layer and returns the gradients.
template <typename Scalar>
std::vector<Matrix<Scalar>> backward(const Model<Scalar>& model, BatchCapture<Scalar>& capture);

template <typename Scalar>
Index count_correct(const Matrix<Scalar>& logits, std::span<const int> labels);

}  // namespace dkfac::nn
