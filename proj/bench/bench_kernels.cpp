// Serial reference vs OpenMP kernels. Run with OMP_NUM_THREADS set to compare
// thread counts; both variants compute the same outputs.

#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "segedit/kernels.hpp"
#include "segedit/random.hpp"

namespace {

using namespace segedit;

Mat random_mat(int r, int c, std::uint64_t seed) {
  Rng rng(seed);
  Mat m(r, c);
  for (auto& x : m.v) x = rng.normal();
  return m;
}

template <void (*F)(const Mat&, const Mat&, Mat&)>
void BM_Matmul(benchmark::State& st) {
  const int n = static_cast<int>(st.range(0));
  const Mat a = random_mat(n, n, 1), b = random_mat(n, n, 2);
  Mat out;
  for (auto _ : st) {
    F(a, b, out);
    benchmark::DoNotOptimize(out.v.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(n) * n * n);
}
BENCHMARK(BM_Matmul<kernels::serial::matmul>)->Name("matmul/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_Matmul<kernels::parallel::matmul>)->Name("matmul/parallel")->Arg(64)->Arg(256);

template <void (*F)(const Mat&, Mat&)>
void BM_Softmax(benchmark::State& st) {
  // latent positions x prompt tokens, as in cross-attention
  const Mat in = random_mat(static_cast<int>(st.range(0)), 16, 3);
  Mat out;
  for (auto _ : st) {
    F(in, out);
    benchmark::DoNotOptimize(out.v.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(in.v.size()));
}
BENCHMARK(BM_Softmax<kernels::serial::softmax_rows>)->Name("softmax/serial")->Arg(256)->Arg(4096);
BENCHMARK(BM_Softmax<kernels::parallel::softmax_rows>)->Name("softmax/parallel")->Arg(256)->Arg(4096);

template <void (*F)(const kernels::ScoreArgs&, std::span<double>)>
void BM_ClassScores(benchmark::State& st) {
  const int side = static_cast<int>(st.range(0)), k = 6;
  const Mat px = random_mat(side * side, 3, 4), protos = random_mat(k, 3, 5);
  std::vector<double> out(static_cast<std::size_t>(side) * side * k);
  const kernels::ScoreArgs args{px.v, protos.v, k, 0.3};
  for (auto _ : st) {
    F(args, out);
    benchmark::DoNotOptimize(out.data());
  }
  st.SetItemsProcessed(st.iterations() * side * side);
}
BENCHMARK(BM_ClassScores<kernels::serial::class_scores>)->Name("class_scores/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_ClassScores<kernels::parallel::class_scores>)->Name("class_scores/parallel")->Arg(64)->Arg(256);

template <std::vector<std::int64_t> (*F)(const kernels::ConfusionArgs&, std::vector<std::int64_t>*)>
void BM_Confusion(benchmark::State& st) {
  const int side = static_cast<int>(st.range(0)), k = 21;
  Rng rng(6);
  std::vector<std::uint8_t> pred(static_cast<std::size_t>(side) * side), gt(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    gt[i] = rng.bernoulli(0.05) ? 255 : static_cast<std::uint8_t>(rng.integer(0, k - 1));
    pred[i] = static_cast<std::uint8_t>(rng.integer(0, k - 1));
  }
  const kernels::ConfusionArgs args{pred, gt, {}, k};
  for (auto _ : st) {
    auto t = F(args, nullptr);
    benchmark::DoNotOptimize(t.data());
  }
  st.SetItemsProcessed(st.iterations() * side * side);
}
BENCHMARK(BM_Confusion<kernels::serial::confusion>)->Name("confusion/serial")->Arg(256)->Arg(1024);
BENCHMARK(BM_Confusion<kernels::parallel::confusion>)->Name("confusion/parallel")->Arg(256)->Arg(1024);

}  // namespace

BENCHMARK_MAIN();
