#include "segedit/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace segedit {

double max_abs_diff(const Mat& a, const Mat& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) m = std::max(m, std::abs(a.v[i] - b.v[i]));
  return m;
}

bool all_finite(const Mat& a) {
  return std::all_of(a.v.begin(), a.v.end(), [](double x) { return std::isfinite(x); });
}

namespace kernels {
namespace {

void check_matmul(const Mat& a, const Mat& b, int inner_a, int inner_b) {
  if (inner_a != inner_b) {
    throw std::invalid_argument("matmul: inner dimension mismatch (" + std::to_string(inner_a) + " vs " +
                                std::to_string(inner_b) + ")");
  }
  (void)a;
  (void)b;
}

inline void matmul_row(const Mat& a, const Mat& b, Mat& out, int i) {
  double* o = out.v.data() + static_cast<std::size_t>(i) * out.cols;
  std::fill(o, o + out.cols, 0.0);
  const double* ar = a.v.data() + static_cast<std::size_t>(i) * a.cols;
  for (int k = 0; k < a.cols; ++k) {
    const double aik = ar[k];
    if (aik == 0.0) continue;
    const double* br = b.v.data() + static_cast<std::size_t>(k) * b.cols;
    for (int j = 0; j < b.cols; ++j) o[j] += aik * br[j];
  }
}

inline void matmul_bt_row(const Mat& a, const Mat& b, Mat& out, int i) {
  const double* ar = a.v.data() + static_cast<std::size_t>(i) * a.cols;
  double* o = out.v.data() + static_cast<std::size_t>(i) * out.cols;
  for (int j = 0; j < b.rows; ++j) {
    const double* br = b.v.data() + static_cast<std::size_t>(j) * b.cols;
    double s = 0.0;
    for (int k = 0; k < a.cols; ++k) s += ar[k] * br[k];
    o[j] = s;
  }
}

// Row i of a^T * b: sum over k of a(k, i) * b(k, :), accumulated in k order.
inline void matmul_at_row(const Mat& a, const Mat& b, Mat& out, int i) {
  double* o = out.v.data() + static_cast<std::size_t>(i) * out.cols;
  std::fill(o, o + out.cols, 0.0);
  for (int k = 0; k < a.rows; ++k) {
    const double aki = a(k, i);
    if (aki == 0.0) continue;
    const double* br = b.v.data() + static_cast<std::size_t>(k) * b.cols;
    for (int j = 0; j < b.cols; ++j) o[j] += aki * br[j];
  }
}

inline void softmax_row(const double* in, double* out, int n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < n; ++j) mx = std::max(mx, in[j]);
  double s = 0.0;
  for (int j = 0; j < n; ++j) {
    out[j] = std::exp(in[j] - mx);
    s += out[j];
  }
  const double inv = 1.0 / s;
  for (int j = 0; j < n; ++j) out[j] *= inv;
}

inline void score_pixel(const ScoreArgs& a, std::span<double> out, std::size_t p) {
  const double* px = a.pixels.data() + p * 3;
  for (int g = 0; g < a.num_classes; ++g) {
    const double* pr = a.prototypes.data() + static_cast<std::size_t>(g) * 3;
    const double d0 = px[0] - pr[0], d1 = px[1] - pr[1], d2 = px[2] - pr[2];
    out[p * a.num_classes + g] = -(d0 * d0 + d1 * d1 + d2 * d2) / a.temperature;
  }
}

inline void log_softmax_one(const double* s, double* o, int k) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int g = 0; g < k; ++g) mx = std::max(mx, s[g]);
  double acc = 0.0;
  for (int g = 0; g < k; ++g) acc += std::exp(s[g] - mx);
  const double lse = mx + std::log(acc);
  for (int g = 0; g < k; ++g) o[g] = s[g] - lse;
}

void check_scores(const ScoreArgs& a, std::span<double> out) {
  if (a.num_classes <= 0) throw std::invalid_argument("class_scores: num_classes must be positive");
  if (a.prototypes.size() != static_cast<std::size_t>(a.num_classes) * 3)
    throw std::invalid_argument("class_scores: prototype table size mismatch");
  if (a.pixels.size() % 3 != 0) throw std::invalid_argument("class_scores: pixels not RGB");
  if (out.size() != a.pixels.size() / 3 * a.num_classes) throw std::invalid_argument("class_scores: output size");
  if (!(a.temperature > 0.0)) throw std::invalid_argument("class_scores: temperature must be positive");
}

void check_confusion(const ConfusionArgs& a) {
  if (a.pred.size() != a.gt.size()) throw std::invalid_argument("confusion: pred/gt size mismatch");
  if (!a.mask.empty() && a.mask.size() != a.gt.size()) throw std::invalid_argument("confusion: mask size mismatch");
  if (a.num_classes <= 0) throw std::invalid_argument("confusion: num_classes must be positive");
}

inline void confusion_pixel(const ConfusionArgs& a, std::size_t p, std::int64_t* table, std::int64_t* missed) {
  const int g = a.gt[p];
  if (g == a.ignore) return;
  if (!a.mask.empty() && a.mask[p] == 0) return;
  if (g >= a.num_classes) throw std::out_of_range("confusion: ground-truth class out of range");
  const int q = a.pred[p];
  if (q >= a.num_classes) {
    ++missed[g];
    return;
  }
  ++table[static_cast<std::size_t>(g) * a.num_classes + q];
}

}  // namespace

namespace serial {

void matmul(const Mat& a, const Mat& b, Mat& out) {
  check_matmul(a, b, a.cols, b.rows);
  out = Mat(a.rows, b.cols);
  for (int i = 0; i < a.rows; ++i) matmul_row(a, b, out, i);
}

void matmul_bt(const Mat& a, const Mat& b, Mat& out) {
  check_matmul(a, b, a.cols, b.cols);
  out = Mat(a.rows, b.rows);
  for (int i = 0; i < a.rows; ++i) matmul_bt_row(a, b, out, i);
}

void matmul_at(const Mat& a, const Mat& b, Mat& out) {
  check_matmul(a, b, a.rows, b.rows);
  out = Mat(a.cols, b.cols);
  for (int i = 0; i < a.cols; ++i) matmul_at_row(a, b, out, i);
}

void softmax_rows(const Mat& in, Mat& out) {
  out = Mat(in.rows, in.cols);
  for (int i = 0; i < in.rows; ++i) softmax_row(&in.v[static_cast<std::size_t>(i) * in.cols], &out.v[static_cast<std::size_t>(i) * in.cols], in.cols);
}

void class_scores(const ScoreArgs& args, std::span<double> out) {
  check_scores(args, out);
  const std::size_t n = args.pixels.size() / 3;
  for (std::size_t p = 0; p < n; ++p) score_pixel(args, out, p);
}

void log_softmax_rows(std::span<const double> scores, int k, std::span<double> out) {
  if (k <= 0 || scores.size() % k != 0 || out.size() != scores.size())
    throw std::invalid_argument("log_softmax_rows: bad sizes");
  const std::size_t n = scores.size() / k;
  for (std::size_t p = 0; p < n; ++p) log_softmax_one(scores.data() + p * k, out.data() + p * k, k);
}

std::vector<std::int64_t> confusion(const ConfusionArgs& args, std::vector<std::int64_t>* missed) {
  check_confusion(args);
  std::vector<std::int64_t> table(static_cast<std::size_t>(args.num_classes) * args.num_classes, 0);
  std::vector<std::int64_t> miss(args.num_classes, 0);
  for (std::size_t p = 0; p < args.gt.size(); ++p) confusion_pixel(args, p, table.data(), miss.data());
  if (missed) *missed = std::move(miss);
  return table;
}

}  // namespace serial

namespace parallel {

void matmul(const Mat& a, const Mat& b, Mat& out) {
  check_matmul(a, b, a.cols, b.rows);
  out = Mat(a.rows, b.cols);
#pragma omp parallel for schedule(static) if (a.rows * b.cols > 4096)
  for (int i = 0; i < a.rows; ++i) matmul_row(a, b, out, i);
}

void matmul_bt(const Mat& a, const Mat& b, Mat& out) {
  check_matmul(a, b, a.cols, b.cols);
  out = Mat(a.rows, b.rows);
#pragma omp parallel for schedule(static) if (a.rows * b.rows > 4096)
  for (int i = 0; i < a.rows; ++i) matmul_bt_row(a, b, out, i);
}

void matmul_at(const Mat& a, const Mat& b, Mat& out) {
  check_matmul(a, b, a.rows, b.rows);
  out = Mat(a.cols, b.cols);
#pragma omp parallel for schedule(static) if (a.cols * b.cols > 4096)
  for (int i = 0; i < a.cols; ++i) matmul_at_row(a, b, out, i);
}

void softmax_rows(const Mat& in, Mat& out) {
  out = Mat(in.rows, in.cols);
#pragma omp parallel for schedule(static) if (in.rows * in.cols > 4096)
  for (int i = 0; i < in.rows; ++i)
    softmax_row(&in.v[static_cast<std::size_t>(i) * in.cols], &out.v[static_cast<std::size_t>(i) * in.cols], in.cols);
}

void class_scores(const ScoreArgs& args, std::span<double> out) {
  check_scores(args, out);
  const auto n = static_cast<std::int64_t>(args.pixels.size() / 3);
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < n; ++p) score_pixel(args, out, static_cast<std::size_t>(p));
}

void log_softmax_rows(std::span<const double> scores, int k, std::span<double> out) {
  if (k <= 0 || scores.size() % k != 0 || out.size() != scores.size())
    throw std::invalid_argument("log_softmax_rows: bad sizes");
  const auto n = static_cast<std::int64_t>(scores.size() / k);
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < n; ++p) log_softmax_one(scores.data() + p * k, out.data() + p * k, k);
}

std::vector<std::int64_t> confusion(const ConfusionArgs& args, std::vector<std::int64_t>* missed) {
  check_confusion(args);
  const int k = args.num_classes;
  const auto n = static_cast<std::int64_t>(args.gt.size());
  // Fixed chunking; integer partial tables make the merge order irrelevant.
  constexpr std::int64_t kChunk = 4096;
  const std::int64_t chunks = (n + kChunk - 1) / kChunk;
  std::vector<std::int64_t> partial(static_cast<std::size_t>(chunks) * k * k, 0);
  std::vector<std::int64_t> partial_miss(static_cast<std::size_t>(chunks) * k, 0);
  bool bad = false;
#pragma omp parallel for schedule(static)
  for (std::int64_t c = 0; c < chunks; ++c) {
    std::int64_t* t = partial.data() + c * k * k;
    std::int64_t* m = partial_miss.data() + c * k;
    const std::int64_t end = std::min(n, (c + 1) * kChunk);
    for (std::int64_t p = c * kChunk; p < end; ++p) {
      const int g = args.gt[p];
      if (g != args.ignore && g >= k) {
#pragma omp atomic write
        bad = true;
        continue;
      }
      confusion_pixel(args, static_cast<std::size_t>(p), t, m);
    }
  }
  if (bad) throw std::out_of_range("confusion: ground-truth class out of range");
  std::vector<std::int64_t> table(static_cast<std::size_t>(k) * k, 0);
  std::vector<std::int64_t> miss(k, 0);
  for (std::int64_t c = 0; c < chunks; ++c) {
    for (int i = 0; i < k * k; ++i) table[i] += partial[c * k * k + i];
    for (int i = 0; i < k; ++i) miss[i] += partial_miss[c * k + i];
  }
  if (missed) *missed = std::move(miss);
  return table;
}

}  // namespace parallel
}  // namespace kernels
}  // namespace segedit
