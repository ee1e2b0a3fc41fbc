#pragma once

// Data-parallel inner loops. Every kernel exists twice: `serial::` is the
// plain reference used by the tests, `parallel::` is the OpenMP version the
// library calls. Parallel kernels partition over independent outputs only, so
// both variants produce bit-identical results regardless of thread count.

#include <cstdint>
#include <span>
#include <vector>

#include "segedit/matrix.hpp"

namespace segedit::kernels {

// Per-pixel class scores: out[p*K + g] = -||pixel_p - proto_g||^2 / temperature.
// pixels is P x 3 interleaved, prototypes is K x 3.
struct ScoreArgs {
  std::span<const double> pixels;
  std::span<const double> prototypes;
  int num_classes = 0;
  double temperature = 1.0;
};

// Confusion matrix over counted pixels, row = ground truth, col = prediction.
// Pixels with gt == ignore, or mask[p] == 0 when a mask is given, are skipped.
// Predictions outside [0, K) are counted as misses for the gt class only.
struct ConfusionArgs {
  std::span<const std::uint8_t> pred;
  std::span<const std::uint8_t> gt;
  std::span<const std::uint8_t> mask;  // empty = count everything
  int num_classes = 0;
  std::uint8_t ignore = 255;
};

namespace serial {
void matmul(const Mat& a, const Mat& b, Mat& out);      // out = a * b
void matmul_bt(const Mat& a, const Mat& b, Mat& out);   // out = a * b^T
void matmul_at(const Mat& a, const Mat& b, Mat& out);   // out = a^T * b
void softmax_rows(const Mat& in, Mat& out);
void class_scores(const ScoreArgs& args, std::span<double> out);
void log_softmax_rows(std::span<const double> scores, int num_classes, std::span<double> out);
// Returns a (K x K) row-major count table; `missed` collects gt pixels with an
// out-of-range prediction.
std::vector<std::int64_t> confusion(const ConfusionArgs& args, std::vector<std::int64_t>* missed = nullptr);
}  // namespace serial

namespace parallel {
void matmul(const Mat& a, const Mat& b, Mat& out);
void matmul_bt(const Mat& a, const Mat& b, Mat& out);
void matmul_at(const Mat& a, const Mat& b, Mat& out);
void softmax_rows(const Mat& in, Mat& out);
void class_scores(const ScoreArgs& args, std::span<double> out);
void log_softmax_rows(std::span<const double> scores, int num_classes, std::span<double> out);
std::vector<std::int64_t> confusion(const ConfusionArgs& args, std::vector<std::int64_t>* missed = nullptr);
}  // namespace parallel

using parallel::class_scores;
using parallel::confusion;
using parallel::log_softmax_rows;
using parallel::matmul;
using parallel::matmul_at;
using parallel::matmul_bt;
using parallel::softmax_rows;

}  // namespace segedit::kernels
