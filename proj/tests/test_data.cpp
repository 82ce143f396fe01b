#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dkfac/data.hpp"
#include "dkfac/report.hpp"
#include "dkfac/trainer.hpp"

using namespace dkfac;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() : path_(fs::temp_directory_path() / ("dkfac_test_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name())) {
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Synthetic, SameSeedSameData) {
  const auto a = data::gen_synthetic(5, 100, 6, 3, 2.0);
  const auto b = data::gen_synthetic(5, 100, 6, 3, 2.0);
  const auto c = data::gen_synthetic(6, 100, 6, 3, 2.0);
  EXPECT_TRUE(linalg::identical(a.inputs, b.inputs));
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_FALSE(linalg::identical(a.inputs, c.inputs));
}

TEST(Synthetic, BalancedLabelsAndShape) {
  const auto ds = data::gen_synthetic(1, 100, 16, 5, 3.0);
  std::vector<int> counts(5, 0);
  for (int y : ds.labels) ++counts[static_cast<std::size_t>(y)];
  EXPECT_EQ(counts, (std::vector<int>{20, 20, 20, 20, 20}));
  EXPECT_EQ(ds.shape, (nn::Shape{1, 4, 4}));
  EXPECT_EQ(data::gen_synthetic(1, 10, 6, 2, 1.0).shape, (nn::Shape{6, 1, 1}));
}

TEST(Synthetic, ClassMeansSitAtDifficultyRadius) {
  const double difficulty = 4.0;
  const auto ds = data::gen_synthetic(2, 20000, 8, 4, difficulty);
  for (int c = 0; c < 4; ++c) {
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(8);
    int n = 0;
    for (Eigen::Index i = 0; i < ds.size(); ++i) {
      if (ds.labels[static_cast<std::size_t>(i)] != c) continue;
      mean += ds.inputs.row(i).transpose();
      ++n;
    }
    EXPECT_NEAR((mean / n).norm(), difficulty, 0.15);
  }
}

TEST(Synthetic, ZeroDifficultyIsChance) {
  const auto split = data::gen_synthetic_split(3, 2000, 1000, 8, 4, 0.0);
  const auto model = nn::make_mlp<double>(nn::Shape{8, 1, 1}, std::span<const int>{}, 4, 3);
  train::TrainConfig tc;
  tc.optimizer = train::Optimizer::sgd;
  tc.epochs = 5;
  tc.warmup_epochs = 1;
  tc.lr_milestones = {3};
  tc.label_smoothing = 0;
  train::Trainer<double> trainer(tc, model, split.train, split.val);
  trainer.run();
  EXPECT_NEAR(train::evaluate(trainer.model(), split.val), 0.25, 0.05);
}

TEST(Synthetic, EasyTaskLinearCeiling) {
  const auto split = data::gen_synthetic_split(4, 2000, 500, 16, 5, 10.0);
  const auto model = nn::make_mlp<double>(nn::Shape{16, 1, 1}, std::span<const int>{}, 5, 4);
  train::TrainConfig tc;
  tc.optimizer = train::Optimizer::sgd;
  tc.epochs = 5;
  tc.warmup_epochs = 1;
  tc.lr_milestones = {3};
  train::Trainer<double> trainer(tc, model, split.train, split.val);
  trainer.run();
  EXPECT_GE(train::evaluate(trainer.model(), split.val), 0.95);
}

TEST(Synthetic, SplitIsDisjointSliceOfOneDraw) {
  const auto split = data::gen_synthetic_split(9, 30, 10, 4, 2, 1.0);
  const auto all = data::gen_synthetic(9, 40, 4, 2, 1.0);
  EXPECT_TRUE(linalg::identical(split.train.inputs, all.inputs.topRows(30)));
  EXPECT_TRUE(linalg::identical(split.val.inputs, all.inputs.bottomRows(10)));
}

TEST(Permutation, SeededPerEpoch) {
  const auto p0 = data::epoch_permutation(50, 7, 0);
  EXPECT_EQ(p0, data::epoch_permutation(50, 7, 0));
  EXPECT_NE(p0, data::epoch_permutation(50, 7, 1));
  auto sorted = p0;
  std::sort(sorted.begin(), sorted.end());
  for (Eigen::Index i = 0; i < 50; ++i) EXPECT_EQ(sorted[static_cast<std::size_t>(i)], i);
}

TEST(Idx, RoundTrip) {
  TempDir dir;
  const std::vector<std::vector<std::uint8_t>> pixels{std::vector<std::uint8_t>(16), std::vector<std::uint8_t>(16)};
  auto px = pixels;
  for (int i = 0; i < 16; ++i) {
    px[0][static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(i * 17);
    px[1][static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(255 - i);
  }
  data::write_idx(dir / "img", dir / "lbl", px, 4, 4, {3, 1});
  const auto ds = data::load_idx(dir / "img", dir / "lbl");
  ASSERT_EQ(ds.size(), 2);
  EXPECT_EQ(ds.shape, (nn::Shape{1, 4, 4}));
  EXPECT_EQ(ds.labels, (std::vector<int>{3, 1}));
  EXPECT_EQ(ds.n_classes, 4);
  for (int i = 0; i < 16; ++i) {
    EXPECT_EQ(ds.inputs(0, i), px[0][static_cast<std::size_t>(i)] / 255.0);
    EXPECT_EQ(ds.inputs(1, i), px[1][static_cast<std::size_t>(i)] / 255.0);
  }
  const auto img = read_bytes(dir / "img");
  EXPECT_EQ(img.size(), 16u + 32u);
  EXPECT_EQ(std::vector<unsigned char>(img.begin(), img.begin() + 4), (std::vector<unsigned char>{0, 0, 8, 3}));
}

TEST(Idx, LabelsWithImageMagic) {
  TempDir dir;
  data::write_idx(dir / "img", dir / "lbl", {std::vector<std::uint8_t>(4)}, 2, 2, {0});
  auto bytes = read_bytes(dir / "lbl");
  bytes[3] = 0x03;
  write_bytes(dir / "lbl", bytes);
  EXPECT_THROW(data::load_idx(dir / "img", dir / "lbl"), FormatError);
}

TEST(Idx, TruncatedImages) {
  TempDir dir;
  data::write_idx(dir / "img", dir / "lbl", {std::vector<std::uint8_t>(4), std::vector<std::uint8_t>(4)}, 2, 2, {0, 1});
  auto bytes = read_bytes(dir / "img");
  bytes.pop_back();
  write_bytes(dir / "img", bytes);
  EXPECT_THROW(data::load_idx(dir / "img", dir / "lbl"), FormatError);
  bytes.push_back(0);
  bytes.push_back(0);
  write_bytes(dir / "img", bytes);
  EXPECT_THROW(data::load_idx(dir / "img", dir / "lbl"), FormatError);
}

TEST(Idx, CountMismatch) {
  TempDir dir;
  data::write_idx(dir / "img", dir / "lbl", {std::vector<std::uint8_t>(4), std::vector<std::uint8_t>(4)}, 2, 2, {0, 1});
  data::write_idx(dir / "img1", dir / "lbl1", {std::vector<std::uint8_t>(4)}, 2, 2, {0});
  EXPECT_THROW(data::load_idx(dir / "img", dir / "lbl1"), FormatError);
  EXPECT_THROW(data::load_idx(dir / "missing", dir / "lbl"), FormatError);
}

TEST(Idx, LabelOutOfDeclaredRange) {
  TempDir dir;
  data::write_idx(dir / "img", dir / "lbl", {std::vector<std::uint8_t>(4)}, 2, 2, {7});
  EXPECT_THROW(data::load_idx(dir / "img", dir / "lbl", 5), FormatError);
}

TEST(Report, ZeroRowsIsHeaderOnly) {
  TempDir dir;
  report::emit_report({}, dir / "m.csv");
  std::ifstream in(dir / "m.csv");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(text,
            "epoch,iteration,train_loss,train_acc,val_acc,lr,damping,decomp_interval,allreduce_calls,allgather_calls,"
            "element_volume,wall_ms\n");
}

TEST(Report, RoundTripAtNineDigits) {
  TempDir dir;
  train::MetricsRow r;
  r.epoch = 3;
  r.iteration = 47;
  r.train_loss = 0.123456789123;
  r.train_acc = 0.9375;
  r.lr = 1.0 / 3.0;
  r.damping = 1e-3;
  r.decomp_interval = 10;
  r.allreduce_calls = 95;
  r.allgather_calls = 5;
  r.element_volume = 123456789012ull;
  r.wall_ms = 12.5;
  report::emit_report({r, r}, dir / "m.csv");
  const auto rows = report::read_report(dir / "m.csv");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].epoch, 3);
  EXPECT_EQ(rows[0].iteration, 47);
  EXPECT_EQ(rows[0].train_loss, 0.123456789);
  EXPECT_EQ(rows[0].lr, 0.333333333);
  EXPECT_TRUE(std::isnan(rows[0].val_acc));
  EXPECT_EQ(rows[0].element_volume, 123456789012ull);
  EXPECT_EQ(report::format_row(rows[1]), report::format_row(r));
}

TEST(Report, UnwritablePathNamesThePath) {
  try {
    report::emit_report({}, "/nonexistent_dir/m.csv");
    FAIL() << "expected an error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent_dir/m.csv"), std::string::npos);
  }
}
