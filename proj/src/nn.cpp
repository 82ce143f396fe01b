#include "dkfac/nn.hpp"

#include <cmath>
#include <random>

namespace dkfac::nn {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::linear:
      return "linear";
    case LayerKind::conv2d:
      return "conv2d";
    case LayerKind::relu:
      return "relu";
  }
  return "unknown";
}

LayerSpec LayerSpec::linear(Index in, Index out, bool bias) {
  LayerSpec s;
  s.kind = LayerKind::linear;
  s.in_features = in;
  s.out_features = out;
  s.has_bias = bias;
  return s;
}

LayerSpec LayerSpec::conv2d(Index in_channels, Index out_channels, Index kernel, Index stride, Index padding,
                            bool bias) {
  LayerSpec s;
  s.kind = LayerKind::conv2d;
  s.in_channels = in_channels;
  s.out_channels = out_channels;
  s.kernel_h = kernel;
  s.kernel_w = kernel;
  s.stride = stride;
  s.padding = padding;
  s.has_bias = bias;
  return s;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

Index LayerSpec::fan_in() const {
  switch (kind) {
    case LayerKind::linear:
      return in_features;
    case LayerKind::conv2d:
      return in_channels * kernel_h * kernel_w;
    case LayerKind::relu:
      return 0;
  }
  return 0;
}

Index LayerSpec::fan_out() const {
  switch (kind) {
    case LayerKind::linear:
      return out_features;
    case LayerKind::conv2d:
      return out_channels;
    case LayerKind::relu:
      return 0;
  }
  return 0;
}

void LayerSpec::validate() const {
  if (kind == LayerKind::linear && (in_features <= 0 || out_features <= 0)) {
    throw DimensionError("linear layer needs positive in/out features");
  }
  if (kind == LayerKind::conv2d) {
    if (in_channels <= 0 || out_channels <= 0 || kernel_h <= 0 || kernel_w <= 0) {
      throw DimensionError("conv2d layer needs positive channels and kernel size");
    }
    if (stride < 1) throw DimensionError("conv2d stride must be >= 1");
    if (padding < 0) throw DimensionError("conv2d padding must be >= 0");
  }
}

Shape LayerSpec::output_shape(const Shape& input) const {
  switch (kind) {
    case LayerKind::relu:
      return input;
    case LayerKind::linear:
      if (input.size() != in_features) {
        throw DimensionError("linear layer expects " + std::to_string(in_features) + " inputs, got " +
                             std::to_string(input.size()));
      }
      return Shape{out_features, 1, 1};
    case LayerKind::conv2d: {
      if (input.channels != in_channels) {
        throw DimensionError("conv2d expects " + std::to_string(in_channels) + " channels, got " +
                             std::to_string(input.channels));
      }
      const Index h = input.height + 2 * padding - kernel_h;
      const Index w = input.width + 2 * padding - kernel_w;
      if (h < 0 || w < 0) throw DimensionError("conv2d kernel larger than padded input");
      return Shape{out_channels, h / stride + 1, w / stride + 1};
    }
  }
  return input;
}

template <typename Scalar>
Model<Scalar>::Model(Shape input, std::vector<LayerSpec> layers, std::uint64_t seed)
    : layers_(std::move(layers)), seed_(seed) {
  if (input.size() <= 0) throw DimensionError("model input shape must be non-empty");
  shapes_.push_back(input);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    layers_[i].validate();
    shapes_.push_back(layers_[i].output_shape(shapes_.back()));
    if (layers_[i].trainable()) trainable_.push_back(i);
  }

  std::mt19937_64 rng(seed);
  for (std::size_t i : trainable_) {
    const LayerSpec& spec = layers_[i];
    const Index fan_in = spec.fan_in();
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix<Scalar> w = Matrix<Scalar>::Zero(spec.fan_out(), fan_in + (spec.has_bias ? 1 : 0));
    for (Index r = 0; r < w.rows(); ++r)
      for (Index c = 0; c < fan_in; ++c) w(r, c) = static_cast<Scalar>(dist(rng));
    weights_.push_back(std::move(w));
  }
}

template <typename Scalar>
std::size_t Model<Scalar>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& w : weights_) n += static_cast<std::size_t>(w.size());
  return n;
}

template <typename Scalar>
Model<Scalar> make_mlp(Shape input, std::span<const int> widths, Index classes, std::uint64_t seed) {
  std::vector<LayerSpec> layers;
  Index in = input.size();
  for (int w : widths) {
    layers.push_back(LayerSpec::linear(in, w));
    layers.push_back(LayerSpec::relu());
    in = w;
  }
  layers.push_back(LayerSpec::linear(in, classes));
  return Model<Scalar>(input, std::move(layers), seed);
}

template <typename Scalar>
Model<Scalar> make_smallconv(Shape input, Index classes, std::uint64_t seed, Index channels, Index hidden) {
  std::vector<LayerSpec> layers{
      LayerSpec::conv2d(input.channels, channels, 3, 1, 1),
      LayerSpec::relu(),
      LayerSpec::conv2d(channels, 2 * channels, 3, 2, 1),
      LayerSpec::relu(),
  };
  Shape s = input;
  for (const auto& l : layers) s = l.output_shape(s);
  layers.push_back(LayerSpec::linear(s.size(), hidden));
  layers.push_back(LayerSpec::relu());
  layers.push_back(LayerSpec::linear(hidden, classes));
  return Model<Scalar>(input, std::move(layers), seed);
}

template <typename Scalar>
Matrix<Scalar> im2col(const Matrix<Scalar>& input, const Shape& shape, const LayerSpec& spec) {
  if (spec.kind != LayerKind::conv2d) throw DimensionError("im2col: layer is not conv2d");
  if (input.cols() != shape.size()) throw DimensionError("im2col: input width does not match shape");
  const Shape out = spec.output_shape(shape);
  const Index n = input.rows();
  const Index positions = out.height * out.width;
  const Index kernel = spec.kernel_h * spec.kernel_w;
  const Index cols = spec.fan_in() + (spec.has_bias ? 1 : 0);

  Matrix<Scalar> result = Matrix<Scalar>::Zero(n * positions, cols);
  for (Index s = 0; s < n; ++s) {
    for (Index oy = 0; oy < out.height; ++oy) {
      for (Index ox = 0; ox < out.width; ++ox) {
        const Index row = s * positions + oy * out.width + ox;
        for (Index c = 0; c < shape.channels; ++c) {
          for (Index ky = 0; ky < spec.kernel_h; ++ky) {
            const Index iy = oy * spec.stride - spec.padding + ky;
            if (iy < 0 || iy >= shape.height) continue;
            for (Index kx = 0; kx < spec.kernel_w; ++kx) {
              const Index ix = ox * spec.stride - spec.padding + kx;
              if (ix < 0 || ix >= shape.width) continue;
              result(row, c * kernel + ky * spec.kernel_w + kx) =
                  input(s, (c * shape.height + iy) * shape.width + ix);
            }
          }
        }
        if (spec.has_bias) result(row, cols - 1) = Scalar(1);
      }
    }
  }
  return result;
}

template <typename Scalar>
Matrix<Scalar> col2im(const Matrix<Scalar>& cols, Index batch, const Shape& shape, const LayerSpec& spec) {
  const Shape out = spec.output_shape(shape);
  const Index positions = out.height * out.width;
  const Index kernel = spec.kernel_h * spec.kernel_w;
  if (cols.rows() != batch * positions || cols.cols() < spec.fan_in()) {
    throw DimensionError("col2im: column matrix does not match geometry");
  }
  Matrix<Scalar> result = Matrix<Scalar>::Zero(batch, shape.size());
  for (Index s = 0; s < batch; ++s) {
    for (Index oy = 0; oy < out.height; ++oy) {
      for (Index ox = 0; ox < out.width; ++ox) {
        const Index row = s * positions + oy * out.width + ox;
        for (Index c = 0; c < shape.channels; ++c) {
          for (Index ky = 0; ky < spec.kernel_h; ++ky) {
            const Index iy = oy * spec.stride - spec.padding + ky;
            if (iy < 0 || iy >= shape.height) continue;
            for (Index kx = 0; kx < spec.kernel_w; ++kx) {
              const Index ix = ox * spec.stride - spec.padding + kx;
              if (ix < 0 || ix >= shape.width) continue;
              result(s, (c * shape.height + iy) * shape.width + ix) +=
                  cols(row, c * kernel + ky * spec.kernel_w + kx);
            }
          }
        }
      }
    }
  }
  return result;
}

namespace {

template <typename Scalar>
Matrix<Scalar> with_bias_column(const Matrix<Scalar>& x, bool bias) {
  if (!bias) return x;
  Matrix<Scalar> out(x.rows(), x.cols() + 1);
  out.leftCols(x.cols()) = x;
  out.col(x.cols()).setOnes();
  return out;
}

// (N*P) x O rows <-> N x (O*P) channel-major activations.
template <typename Scalar>
Matrix<Scalar> rows_to_activation(const Matrix<Scalar>& rows, Index batch, Index positions) {
  const Index channels = rows.cols();
  Matrix<Scalar> out(batch, channels * positions);
  for (Index s = 0; s < batch; ++s)
    for (Index o = 0; o < channels; ++o)
      for (Index p = 0; p < positions; ++p) out(s, o * positions + p) = rows(s * positions + p, o);
  return out;
}

template <typename Scalar>
Matrix<Scalar> activation_to_rows(const Matrix<Scalar>& act, Index channels, Index positions) {
  const Index batch = act.rows();
  Matrix<Scalar> out(batch * positions, channels);
  for (Index s = 0; s < batch; ++s)
    for (Index o = 0; o < channels; ++o)
      for (Index p = 0; p < positions; ++p) out(s * positions + p, o) = act(s, o * positions + p);
  return out;
}

template <typename Scalar>
void check_labels(std::span<const int> labels, Index rows, Index classes) {
  if (static_cast<Index>(labels.size()) != rows) {
    throw DimensionError("label count " + std::to_string(labels.size()) + " does not match batch rows " +
                         std::to_string(rows));
  }
  for (int y : labels) {
    if (y < 0 || y >= classes) throw ValueError("label " + std::to_string(y) + " out of range");
  }
}

template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& logits) {
  Matrix<Scalar> p(logits.rows(), logits.cols());
  for (Index r = 0; r < logits.rows(); ++r) {
    const Scalar m = logits.row(r).maxCoeff();
    p.row(r) = (logits.row(r).array() - m).exp().matrix();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

// Forward pass through layer `i`; returns its output and records a_prev when
// `capture` is non-null.
template <typename Scalar>
Matrix<Scalar> layer_forward(const Model<Scalar>& model, std::size_t i, std::size_t& t, const Matrix<Scalar>& x,
                             BatchCapture<Scalar>* capture) {
  const LayerSpec& spec = model.layers()[i];
  const Shape& in_shape = model.shapes()[i];
  switch (spec.kind) {
    case LayerKind::relu:
      return x.cwiseMax(Scalar(0));
    case LayerKind::linear: {
      Matrix<Scalar> a = with_bias_column(x, spec.has_bias);
      Matrix<Scalar> y = a * model.weights()[t].transpose();
      if (capture) capture->layers[t].a_prev = std::move(a);
      ++t;
      return y;
    }
    case LayerKind::conv2d: {
      const Shape out_shape = model.shapes()[i + 1];
      Matrix<Scalar> cols = im2col(x, in_shape, spec);
      Matrix<Scalar> rows = cols * model.weights()[t].transpose();
      Matrix<Scalar> y = rows_to_activation(rows, x.rows(), out_shape.height * out_shape.width);
      if (capture) capture->layers[t].a_prev = std::move(cols);
      ++t;
      return y;
    }
  }
  return x;
}

}  // namespace

template <typename Scalar>
Matrix<Scalar> predict(const Model<Scalar>& model, const Matrix<Scalar>& batch) {
  if (batch.cols() != model.input_shape().size()) {
    throw DimensionError("batch has " + std::to_string(batch.cols()) + " features, model expects " +
                         std::to_string(model.input_shape().size()));
  }
  Matrix<Scalar> x = batch;
  std::size_t t = 0;
  for (std::size_t i = 0; i < model.layers().size(); ++i) x = layer_forward<Scalar>(model, i, t, x, nullptr);
  return x;
}

template <typename Scalar>
Scalar cross_entropy(const Matrix<Scalar>& logits, std::span<const int> labels, Scalar smoothing) {
  check_labels<Scalar>(labels, logits.rows(), logits.cols());
  const Index classes = logits.cols();
  const Scalar off = smoothing / Scalar(classes);
  const Scalar on = Scalar(1) - smoothing + off;
  Scalar total = 0;
  for (Index r = 0; r < logits.rows(); ++r) {
    const Scalar m = logits.row(r).maxCoeff();
    const Scalar lse = m + std::log((logits.row(r).array() - m).exp().sum());
    Scalar row = 0;
    for (Index c = 0; c < classes; ++c) row += (c == labels[r] ? on : off) * (lse - logits(r, c));
    total += row;
  }
  return total / Scalar(logits.rows());
}

template <typename Scalar>
Index count_correct(const Matrix<Scalar>& logits, std::span<const int> labels) {
  Index hits = 0;
  for (Index r = 0; r < logits.rows(); ++r) {
    Index arg = 0;
    logits.row(r).maxCoeff(&arg);
    if (arg == labels[r]) ++hits;
  }
  return hits;
}

template <typename Scalar>
ForwardResult<Scalar> forward(const Model<Scalar>& model, const Matrix<Scalar>& batch, std::span<const int> labels,
                              Scalar smoothing) {
  if (batch.rows() < 1) throw DimensionError("forward: empty batch");
  if (batch.cols() != model.input_shape().size()) {
    throw DimensionError("batch has " + std::to_string(batch.cols()) + " features, model expects " +
                         std::to_string(model.input_shape().size()));
  }
  check_labels<Scalar>(labels, batch.rows(), model.num_classes());

  ForwardResult<Scalar> result{Scalar(0), 0, {}};
  BatchCapture<Scalar>& cap = result.capture;
  cap.layers.resize(model.num_trainable());
  cap.inputs.reserve(model.layers().size());
  cap.labels.assign(labels.begin(), labels.end());
  cap.smoothing = smoothing;

  Matrix<Scalar> x = batch;
  std::size_t t = 0;
  for (std::size_t i = 0; i < model.layers().size(); ++i) {
    cap.inputs.push_back(x);
    x = layer_forward<Scalar>(model, i, t, x, &cap);
  }
  cap.logits = std::move(x);
  cap.probs = softmax_rows(cap.logits);
  result.loss = cross_entropy<Scalar>(cap.logits, labels, smoothing);
  result.correct = count_correct<Scalar>(cap.logits, labels);
  return result;
}

template <typename Scalar>
std::vector<Matrix<Scalar>> backward(const Model<Scalar>& model, BatchCapture<Scalar>& cap) {
  if (cap.backward_done) throw StateError("backward: capture already consumed");
  if (cap.inputs.size() != model.layers().size() || cap.layers.size() != model.num_trainable() ||
      cap.logits.cols() != model.num_classes()) {
    throw StateError("backward: capture was not produced by forward() on this model");
  }
  for (std::size_t i = 0; i < model.layers().size(); ++i) {
    if (cap.inputs[i].cols() != model.shapes()[i].size()) {
      throw StateError("backward: captured activation " + std::to_string(i) + " does not match model shape");
    }
  }

  const Index n = cap.batch_size();
  const Index classes = model.num_classes();
  const Scalar off = cap.smoothing / Scalar(classes);
  const Scalar on = Scalar(1) - cap.smoothing + off;

  Matrix<Scalar> dy = cap.probs;
  for (Index r = 0; r < n; ++r)
    for (Index c = 0; c < classes; ++c) dy(r, c) -= (c == cap.labels[r] ? on : off);
  dy /= Scalar(n);

  std::size_t t = model.num_trainable();
  for (std::size_t i = model.layers().size(); i-- > 0;) {
    const LayerSpec& spec = model.layers()[i];
    const Matrix<Scalar>& x = cap.inputs[i];
    if (spec.kind == LayerKind::relu) {
      dy = dy.cwiseProduct((x.array() > Scalar(0)).template cast<Scalar>().matrix());
      continue;
    }
    --t;
    const Matrix<Scalar>& w = model.weights()[t];
    LayerCapture<Scalar>& lc = cap.layers[t];
    const Index fan_in = spec.fan_in();
    if (spec.kind == LayerKind::linear) {
      lc.grad = dy.transpose() * lc.a_prev;
      lc.g_out = dy * Scalar(n);
      if (i > 0) dy = dy * w.leftCols(fan_in);
    } else {
      const Shape& out_shape = model.shapes()[i + 1];
      const Index positions = out_shape.height * out_shape.width;
      Matrix<Scalar> g_rows = activation_to_rows(dy, spec.out_channels, positions);
      lc.grad = g_rows.transpose() * lc.a_prev;
      if (i > 0) {
        Matrix<Scalar> dcols = g_rows * w.leftCols(fan_in);
        dy = col2im(dcols, n, model.shapes()[i], spec);
      }
      lc.g_out = std::move(g_rows) * Scalar(n);
    }
  }
  cap.backward_done = true;

  std::vector<Matrix<Scalar>> grads;
  grads.reserve(cap.layers.size());
  for (const auto& lc : cap.layers) grads.push_back(lc.grad);
  return grads;
}

#define DKFAC_INSTANTIATE_NN(S)                                                                                   \
  template class Model<S>;                                                                                       \
  template Model<S> make_mlp<S>(Shape, std::span<const int>, Index, std::uint64_t);                              \
  template Model<S> make_smallconv<S>(Shape, Index, std::uint64_t, Index, Index);                                \
  template Matrix<S> im2col<S>(const Matrix<S>&, const Shape&, const LayerSpec&);                                \
  template Matrix<S> col2im<S>(const Matrix<S>&, Index, const Shape&, const LayerSpec&);                         \
  template Matrix<S> predict<S>(const Model<S>&, const Matrix<S>&);                                              \
  template S cross_entropy<S>(const Matrix<S>&, std::span<const int>, S);                                        \
  template Index count_correct<S>(const Matrix<S>&, std::span<const int>);                                       \
  template ForwardResult<S> forward<S>(const Model<S>&, const Matrix<S>&, std::span<const int>, S);              \
  template std::vector<Matrix<S>> backward<S>(const Model<S>&, BatchCapture<S>&);

DKFAC_INSTANTIATE_NN(float)
DKFAC_INSTANTIATE_NN(double)

}  // namespace dkfac::nn
