#include <gtest/gtest.h>

#include <cmath>

#include "dkfac/nn.hpp"
#include "support.hpp"

using namespace dkfac;
using namespace testing_support;
using nn::LayerSpec;
using nn::Shape;

namespace {

std::vector<int> cyclic_labels(Eigen::Index n, int classes) {
  std::vector<int> y;
  for (Eigen::Index i = 0; i < n; ++i) y.push_back(static_cast<int>(i % classes));
  return y;
}

double max_relative_fd_error(nn::Model<double> model, const MatrixXd& x, const std::vector<int>& y, double smoothing) {
  auto fr = nn::forward<double>(model, x, y, smoothing);
  const auto grads = nn::backward<double>(model, fr.capture);
  const double h = 1e-5;
  double worst = 0;
  for (std::size_t t = 0; t < model.weights().size(); ++t) {
    for (Eigen::Index i = 0; i < model.weights()[t].size(); ++i) {
      double& w = model.weights()[t].data()[i];
      const double saved = w;
      w = saved + h;
      const double up = nn::forward<double>(model, x, y, smoothing).loss;
      w = saved - h;
      const double down = nn::forward<double>(model, x, y, smoothing).loss;
      w = saved;
      const double fd = (up - down) / (2 * h);
      const double an = grads[t].data()[i];
      worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-4}));
    }
  }
  return worst;
}

// Direct convolution loop; output laid out as (out channel, y, x) per sample.
MatrixXd naive_conv(const MatrixXd& x, const Shape& in, const LayerSpec& spec, const MatrixXd& w) {
  const Shape out = spec.output_shape(in);
  MatrixXd y = MatrixXd::Zero(x.rows(), out.size());
  for (Eigen::Index s = 0; s < x.rows(); ++s)
    for (Eigen::Index o = 0; o < out.channels; ++o)
      for (Eigen::Index oy = 0; oy < out.height; ++oy)
        for (Eigen::Index ox = 0; ox < out.width; ++ox) {
          double acc = spec.has_bias ? w(o, w.cols() - 1) : 0.0;
          for (Eigen::Index c = 0; c < in.channels; ++c)
            for (Eigen::Index ky = 0; ky < spec.kernel_h; ++ky)
              for (Eigen::Index kx = 0; kx < spec.kernel_w; ++kx) {
                const Eigen::Index iy = oy * spec.stride - spec.padding + ky;
                const Eigen::Index ix = ox * spec.stride - spec.padding + kx;
                if (iy < 0 || iy >= in.height || ix < 0 || ix >= in.width) continue;
                acc += w(o, (c * spec.kernel_h + ky) * spec.kernel_w + kx) *
                       x(s, (c * in.height + iy) * in.width + ix);
              }
          y(s, (o * out.height + oy) * out.width + ox) = acc;
        }
  return y;
}

}  // namespace

TEST(Forward, ZeroWeightsGiveLnTwo) {
  nn::Model<double> model(Shape{3, 1, 1}, {LayerSpec::linear(3, 2)}, 1);
  model.weights()[0].setZero();
  std::mt19937_64 rng(1);
  const auto fr = nn::forward<double>(model, random_matrix(rng, 4, 3), cyclic_labels(4, 2), 0.0);
  EXPECT_NEAR(fr.loss, std::log(2.0), 1e-15);
}

TEST(Forward, SaturatedCorrectLogitsGiveZeroLoss) {
  nn::Model<double> model(Shape{2, 1, 1}, {LayerSpec::linear(2, 2, false)}, 1);
  model.weights()[0] << 100, 0, 0, 100;
  MatrixXd x(2, 2);
  x << 1, 0, 0, 1;
  const auto fr = nn::forward<double>(model, x, std::vector<int>{0, 1}, 0.0);
  EXPECT_LT(fr.loss, 1e-40);
  EXPECT_EQ(fr.correct, 2);
}

TEST(Forward, MatchesStraightforwardMlp) {
  const int widths[] = {6, 5};
  const auto model = nn::make_mlp<double>(Shape{4, 1, 1}, widths, 3, 21);
  std::mt19937_64 rng(2);
  const MatrixXd x = random_matrix(rng, 8, 4);
  const auto y = cyclic_labels(8, 3);
  const double smoothing = 0.1;

  MatrixXd h = x;
  for (std::size_t t = 0; t < model.weights().size(); ++t) {
    const MatrixXd& w = model.weights()[t];
    MatrixXd z = h * w.leftCols(w.cols() - 1).transpose();
    z.rowwise() += w.col(w.cols() - 1).transpose();
    h = t + 1 < model.weights().size() ? MatrixXd(z.cwiseMax(0.0)) : z;
  }
  double loss = 0;
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    const double m = h.row(i).maxCoeff();
    const double lse = m + std::log((h.row(i).array() - m).exp().sum());
    for (int c = 0; c < 3; ++c) {
      const double target = (c == y[static_cast<std::size_t>(i)] ? 1.0 - smoothing : 0.0) + smoothing / 3;
      loss -= target * (h(i, c) - lse);
    }
  }
  loss /= static_cast<double>(h.rows());

  const auto fr = nn::forward<double>(model, x, y, smoothing);
  EXPECT_NEAR(fr.loss, loss, 1e-10);
  EXPECT_LE(max_abs_diff(nn::predict<double>(model, x), h), 1e-12);
}

TEST(Forward, RejectsBadLabels) {
  const int widths[] = {4};
  const auto model = nn::make_mlp<double>(Shape{3, 1, 1}, widths, 2, 1);
  EXPECT_THROW(nn::forward<double>(model, MatrixXd::Zero(2, 3), std::vector<int>{0, 2}, 0.0), ValueError);
  EXPECT_THROW(nn::forward<double>(model, MatrixXd::Zero(2, 3), std::vector<int>{0}, 0.0), DimensionError);
  EXPECT_THROW(nn::forward<double>(model, MatrixXd::Zero(2, 4), std::vector<int>{0, 1}, 0.0), DimensionError);
}

TEST(Backward, ZeroInputLeavesFeatureColumnsZero) {
  nn::Model<double> model(Shape{3, 1, 1}, {LayerSpec::linear(3, 2)}, 5);
  auto fr = nn::forward<double>(model, MatrixXd::Zero(4, 3), std::vector<int>(4, 0), 0.0);
  const auto grads = nn::backward<double>(model, fr.capture);
  EXPECT_EQ(grads[0].leftCols(3).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(grads[0].col(3).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Backward, FiniteDifferenceMlp) {
  const int widths[] = {7};
  const auto model = nn::make_mlp<double>(Shape{5, 1, 1}, widths, 3, 8);
  std::mt19937_64 rng(3);
  EXPECT_LE(max_relative_fd_error(model, random_matrix(rng, 6, 5), cyclic_labels(6, 3), 0.1), 1e-5);
}

TEST(Backward, FiniteDifferenceSmallConv) {
  const auto model = nn::make_smallconv<double>(Shape{2, 5, 5}, 3, 9, 3, 8);
  std::mt19937_64 rng(4);
  EXPECT_LE(max_relative_fd_error(model, random_matrix(rng, 4, 50), cyclic_labels(4, 3), 0.1), 1e-5);
}

TEST(Backward, SecondCallIsAStateError) {
  nn::Model<double> model(Shape{3, 1, 1}, {LayerSpec::linear(3, 2)}, 5);
  auto fr = nn::forward<double>(model, MatrixXd::Ones(2, 3), cyclic_labels(2, 2), 0.0);
  nn::backward<double>(model, fr.capture);
  EXPECT_THROW(nn::backward<double>(model, fr.capture), StateError);
}

TEST(Backward, CaptureHoldsPerSampleFactors) {
  const int widths[] = {4};
  const auto model = nn::make_mlp<double>(Shape{3, 1, 1}, widths, 2, 6);
  std::mt19937_64 rng(5);
  auto fr = nn::forward<double>(model, random_matrix(rng, 5, 3), cyclic_labels(5, 2), 0.0);
  const auto grads = nn::backward<double>(model, fr.capture);
  for (std::size_t t = 0; t < grads.size(); ++t) {
    const auto& c = fr.capture.layers[t];
    EXPECT_LE(max_abs_diff(c.g_out.transpose() * c.a_prev / 5.0, grads[t]), 1e-14);
    EXPECT_TRUE((c.a_prev.col(c.a_prev.cols() - 1).array() == 1.0).all());
  }
}

TEST(Conv, OneByOneKernelEqualsLinear) {
  nn::Model<double> conv(Shape{3, 1, 1}, {LayerSpec::conv2d(3, 2, 1)}, 7);
  nn::Model<double> lin(Shape{3, 1, 1}, {LayerSpec::linear(3, 2)}, 7);
  lin.weights() = conv.weights();
  std::mt19937_64 rng(6);
  const MatrixXd x = random_matrix(rng, 5, 3);
  const auto y = cyclic_labels(5, 2);
  auto fc = nn::forward<double>(conv, x, y, 0.0);
  auto fl = nn::forward<double>(lin, x, y, 0.0);
  const auto gc = nn::backward<double>(conv, fc.capture);
  const auto gl = nn::backward<double>(lin, fl.capture);
  EXPECT_LE(max_abs_diff(gc[0], gl[0]), 1e-10);
}

TEST(Conv, OneByOneKernelIsPixelwiseLinear) {
  const Shape in{3, 4, 4};
  const auto spec = LayerSpec::conv2d(3, 2, 1);
  std::mt19937_64 rng(7);
  const MatrixXd x = random_matrix(rng, 2, in.size());
  const MatrixXd cols = nn::im2col<double>(x, in, spec);
  EXPECT_EQ(cols.rows(), 2 * 16);
  EXPECT_EQ(cols.cols(), 4);
  for (Eigen::Index s = 0; s < 2; ++s)
    for (Eigen::Index p = 0; p < 16; ++p)
      for (Eigen::Index c = 0; c < 3; ++c) EXPECT_EQ(cols(s * 16 + p, c), x(s, c * 16 + p));
}

TEST(Conv, Im2colCounting) {
  const auto spec = LayerSpec::conv2d(1, 2, 3);
  const MatrixXd cols = nn::im2col<double>(MatrixXd::Ones(1, 16), Shape{1, 4, 4}, spec);
  EXPECT_EQ(cols.rows(), 4);
  EXPECT_EQ(cols.cols(), 10);
}

TEST(Conv, ForwardMatchesDirectLoop) {
  const Shape in{2, 5, 6};
  for (const auto& spec : {LayerSpec::conv2d(2, 3, 3, 1, 1), LayerSpec::conv2d(2, 3, 3, 2, 1),
                           LayerSpec::conv2d(2, 4, 2, 1, 0, false)}) {
    nn::Model<double> model(in, {spec}, 11);
    std::mt19937_64 rng(8);
    const MatrixXd x = random_matrix(rng, 3, in.size());
    EXPECT_LE(max_abs_diff(nn::predict<double>(model, x), naive_conv(x, in, spec, model.weights()[0])), 1e-12);
  }
}

TEST(Conv, Col2imIsAdjoint) {
  const Shape in{2, 5, 5};
  const auto spec = LayerSpec::conv2d(2, 3, 3, 2, 1, false);
  std::mt19937_64 rng(9);
  const MatrixXd x = random_matrix(rng, 2, in.size());
  const MatrixXd cols = nn::im2col<double>(x, in, spec);
  const MatrixXd y = random_matrix(rng, cols.rows(), cols.cols());
  const double lhs = (cols.array() * y.array()).sum();
  const double rhs = (x.array() * nn::col2im<double>(y, 2, in, spec).array()).sum();
  EXPECT_NEAR(lhs, rhs, 1e-10);
}

TEST(Model, ShapesAndInit) {
  const auto model = nn::make_smallconv<double>(Shape{1, 8, 8}, 5, 3);
  EXPECT_EQ(model.num_trainable(), 4u);
  EXPECT_EQ(model.num_classes(), 5);
  for (std::size_t t = 0; t < model.num_trainable(); ++t) {
    const auto& w = model.weights()[t];
    const double bound = std::sqrt(6.0 / static_cast<double>(model.trainable_spec(t).fan_in()));
    EXPECT_LE(w.leftCols(w.cols() - 1).cwiseAbs().maxCoeff(), bound);
    EXPECT_EQ(w.col(w.cols() - 1).cwiseAbs().maxCoeff(), 0.0);
  }
  EXPECT_THROW(nn::Model<double>(Shape{3, 1, 1}, {LayerSpec::linear(4, 2)}, 1), DimensionError);
}

TEST(Model, SeedDeterminesWeights) {
  const int widths[] = {8};
  const auto a = nn::make_mlp<double>(Shape{4, 1, 1}, widths, 3, 99);
  const auto b = nn::make_mlp<double>(Shape{4, 1, 1}, widths, 3, 99);
  const auto c = nn::make_mlp<double>(Shape{4, 1, 1}, widths, 3, 100);
  EXPECT_TRUE(linalg::identical(a.weights()[0], b.weights()[0]));
  EXPECT_FALSE(linalg::identical(a.weights()[0], c.weights()[0]));
}

TEST(Model, CastPreservesStructure) {
  const int widths[] = {4};
  const auto model = nn::make_mlp<double>(Shape{3, 1, 1}, widths, 2, 1);
  const auto f = model.cast<float>();
  EXPECT_EQ(f.parameter_count(), model.parameter_count());
  EXPECT_EQ(f.weights()[1](0, 0), static_cast<float>(model.weights()[1](0, 0)));
}
