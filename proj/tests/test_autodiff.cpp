#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "segedit/autodiff.hpp"
#include "test_util.hpp"

namespace segedit {
namespace {

using testing::random_mat;

// Builds a scalar from a leaf; returns the value. Used for both the taped
// gradient and the central-difference oracle.
using Graph = std::function<ad::Var(ad::Tape&, ad::Var)>;

void check_gradient(const Mat& x0, const Graph& f, double tol = 1e-6) {
  ad::Tape tape;
  ad::Var x = tape.leaf(x0, true);
  ad::Var y = f(tape, x);
  ASSERT_EQ(tape.value(y).size(), 1u);
  tape.backward(y);
  const Mat g = tape.grad(x);
  const double h = 1e-6;
  for (std::size_t i = 0; i < x0.v.size(); ++i) {
    Mat xp = x0, xm = x0;
    xp.v[i] += h;
    xm.v[i] -= h;
    ad::Tape tp, tm;
    const double fp = tp.value(f(tp, tp.leaf(xp, false))).v[0];
    const double fm = tm.value(f(tm, tm.leaf(xm, false))).v[0];
    const double fd = (fp - fm) / (2 * h);
    EXPECT_NEAR(g.v[i], fd, tol * std::max(1.0, std::abs(fd))) << "component " << i;
  }
}

TEST(Autodiff, MatmulAddRowSiluMse) {
  Rng rng(10);
  const Mat w = random_mat(4, 3, rng), b = random_mat(1, 3, rng), target = random_mat(5, 3, rng);
  check_gradient(random_mat(5, 4, rng), [&](ad::Tape& t, ad::Var x) {
    ad::Var h = t.add_row(t.matmul(x, t.constant(w)), t.constant(b));
    return t.mse(t.silu(h), target);
  });
}

TEST(Autodiff, AttentionBlock) {
  Rng rng(11);
  const Mat k = random_mat(6, 4, rng), v = random_mat(6, 4, rng), target = random_mat(5, 4, rng);
  check_gradient(random_mat(5, 4, rng), [&](ad::Tape& t, ad::Var q) {
    ad::Var a = t.softmax_rows(t.scale(t.matmul_bt(q, t.constant(k)), 0.5));
    ad::Var o = t.axpby(1.0, t.matmul(a, t.constant(v)), 0.3, q);
    return t.mse(o, target);
  });
}

TEST(Autodiff, GradientThroughBothMatmulOperands) {
  Rng rng(12);
  const Mat a = random_mat(3, 4, rng), target = random_mat(3, 3, rng);
  check_gradient(random_mat(3, 4, rng), [&](ad::Tape& t, ad::Var x) {
    // x appears on both sides and twice in the sum: accumulation must add.
    ad::Var y = t.add(t.matmul_bt(x, x), t.matmul_bt(t.constant(a), x));
    return t.mse(y, target);
  });
}

TEST(Autodiff, GatherRowsScattersGradient) {
  Rng rng(13);
  const std::vector<int> idx{2, 0, 2, 1};
  const Mat target = random_mat(4, 3, rng);
  check_gradient(random_mat(3, 3, rng), [&](ad::Tape& t, ad::Var table) {
    return t.mse(t.gather_rows(table, idx), target);
  });
}

TEST(Autodiff, ConstantsReceiveNoGradientNode) {
  ad::Tape t;
  ad::Var c = t.constant(Mat(2, 2, 1.0));
  EXPECT_FALSE(t.requires_grad(c));
  ad::Var x = t.leaf(Mat(2, 2, 2.0), true);
  ad::Var y = t.mse(t.add(c, x), Mat(2, 2, 0.0));
  t.backward(y);
  // d/dx mean((1 + x)^2) = 2 (1 + x) / n = 1.5
  for (double g : t.grad(x).v) EXPECT_DOUBLE_EQ(g, 1.5);
}

TEST(Autodiff, ShapeErrorsThrow) {
  ad::Tape t;
  ad::Var a = t.leaf(Mat(2, 3), true), b = t.leaf(Mat(2, 3), true);
  EXPECT_THROW(t.matmul(a, b), std::invalid_argument);
  EXPECT_THROW(t.add(a, t.constant(Mat(3, 2))), std::invalid_argument);
}

}  // namespace
}  // namespace segedit
