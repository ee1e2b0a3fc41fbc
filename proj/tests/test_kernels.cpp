#include <gtest/gtest.h>

#include <cmath>

#include "segedit/kernels.hpp"
#include "test_util.hpp"

namespace segedit {
namespace {

using testing::random_mat;

// Triple-loop reference, written independently of the kernel row helpers.
Mat naive_matmul(const Mat& a, const Mat& b) {
  Mat o(a.rows, b.cols);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < b.cols; ++j) {
      double s = 0;
      for (int k = 0; k < a.cols; ++k) s += a(i, k) * b(k, j);
      o(i, j) = s;
    }
  return o;
}

Mat transpose(const Mat& a) {
  Mat t(a.cols, a.rows);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  return t;
}

TEST(Kernels, MatmulVariantsAgreeWithNaive) {
  Rng rng(1);
  for (auto [m, k, n] : {std::tuple{1, 1, 1}, {3, 5, 7}, {70, 33, 90}, {256, 32, 40}}) {
    const Mat a = random_mat(m, k, rng), b = random_mat(k, n, rng);
    const Mat ref = naive_matmul(a, b);
    Mat s, p;
    kernels::serial::matmul(a, b, s);
    kernels::parallel::matmul(a, b, p);
    EXPECT_LT(max_abs_diff(s, ref), 1e-12);
    EXPECT_EQ(s, p);

    const Mat bt = transpose(b);
    kernels::serial::matmul_bt(a, bt, s);
    kernels::parallel::matmul_bt(a, bt, p);
    EXPECT_LT(max_abs_diff(s, ref), 1e-12);
    EXPECT_EQ(s, p);

    const Mat at = transpose(a);
    kernels::serial::matmul_at(at, b, s);
    kernels::parallel::matmul_at(at, b, p);
    EXPECT_LT(max_abs_diff(s, ref), 1e-12);
    EXPECT_EQ(s, p);
  }
}

TEST(Kernels, MatmulShapeMismatchThrows) {
  Mat a(2, 3), b(4, 2), o;
  EXPECT_THROW(kernels::serial::matmul(a, b, o), std::invalid_argument);
  EXPECT_THROW(kernels::parallel::matmul(a, b, o), std::invalid_argument);
}

TEST(Kernels, SoftmaxRowsSumToOneAndMatchParallel) {
  Rng rng(2);
  Mat x = random_mat(300, 17, rng, 20.0);
  x(0, 0) = 800.0;  // overflow without max-subtraction
  Mat s, p;
  kernels::serial::softmax_rows(x, s);
  kernels::parallel::softmax_rows(x, p);
  EXPECT_EQ(s, p);
  for (int i = 0; i < s.rows; ++i) {
    double sum = 0;
    for (int j = 0; j < s.cols; ++j) sum += s(i, j);
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
  EXPECT_NEAR(s(0, 0), 1.0, 1e-12);
}

TEST(Kernels, ClassScoresAndLogSoftmax) {
  Rng rng(3);
  const int n = 5000, k = 6;
  std::vector<double> px(n * 3), pr(k * 3);
  for (auto& v : px) v = rng.uniform();
  for (auto& v : pr) v = rng.uniform();
  kernels::ScoreArgs a{px, pr, k, 0.3};
  std::vector<double> s(n * k), p(n * k);
  kernels::serial::class_scores(a, s);
  kernels::parallel::class_scores(a, p);
  EXPECT_EQ(s, p);
  for (int q = 0; q < n; q += 997)
    for (int g = 0; g < k; ++g) {
      double d = 0;
      for (int c = 0; c < 3; ++c) d += std::pow(px[q * 3 + c] - pr[g * 3 + c], 2);
      EXPECT_NEAR(s[q * k + g], -d / 0.3, 1e-12);
    }
  std::vector<double> ls(n * k), lp(n * k);
  kernels::serial::log_softmax_rows(s, k, ls);
  kernels::parallel::log_softmax_rows(s, k, lp);
  EXPECT_EQ(ls, lp);
  for (int q = 0; q < n; q += 499) {
    double z = 0;
    for (int g = 0; g < k; ++g) z += std::exp(s[q * k + g]);
    for (int g = 0; g < k; ++g) EXPECT_NEAR(ls[q * k + g], s[q * k + g] - std::log(z), 1e-10);
  }
  a.temperature = 0.0;
  EXPECT_THROW(kernels::serial::class_scores(a, s), std::invalid_argument);
}

TEST(Kernels, ConfusionMatchesNaiveCount) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const int k = rng.integer(1, 8);
    const int n = rng.integer(1, 20000);
    std::vector<std::uint8_t> gt(n), pred(n), mask(n);
    for (int i = 0; i < n; ++i) {
      gt[i] = rng.bernoulli(0.1) ? 255 : static_cast<std::uint8_t>(rng.integer(0, k - 1));
      pred[i] = rng.bernoulli(0.05) ? static_cast<std::uint8_t>(k + 3) : static_cast<std::uint8_t>(rng.integer(0, k - 1));
      mask[i] = rng.bernoulli(0.7);
    }
    kernels::ConfusionArgs a{pred, gt, trial % 2 ? std::span<const std::uint8_t>(mask) : std::span<const std::uint8_t>{}, k, 255};
    std::vector<std::int64_t> ref(k * k, 0), ref_miss(k, 0);
    for (int i = 0; i < n; ++i) {
      if (gt[i] == 255 || (trial % 2 && !mask[i])) continue;
      if (pred[i] >= k)
        ++ref_miss[gt[i]];
      else
        ++ref[gt[i] * k + pred[i]];
    }
    std::vector<std::int64_t> ms, mp;
    EXPECT_EQ(kernels::serial::confusion(a, &ms), ref);
    EXPECT_EQ(kernels::parallel::confusion(a, &mp), ref);
    EXPECT_EQ(ms, ref_miss);
    EXPECT_EQ(mp, ref_miss);
  }
}

TEST(Kernels, ConfusionRejectsOutOfRangeGroundTruth) {
  std::vector<std::uint8_t> gt(10000, 0), pred(10000, 0);
  gt[9000] = 7;
  kernels::ConfusionArgs a{pred, gt, {}, 3, 255};
  EXPECT_THROW(kernels::serial::confusion(a), std::out_of_range);
  EXPECT_THROW(kernels::parallel::confusion(a), std::out_of_range);
}

}  // namespace
}  // namespace segedit
