#include "segedit/autodiff.hpp"

#include <cmath>
#include <stdexcept>

#include "segedit/kernels.hpp"

namespace segedit::ad {

Var Tape::push(Mat value, bool requires_grad, std::function<void(Tape&)> back) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

bool Tape::any_grad(std::initializer_list<Var> xs) const {
  for (Var x : xs)
    if (nodes_.at(x.id).requires_grad) return true;
  return false;
}

Mat& Tape::grad(Var x) {
  Node& n = nodes_.at(x.id);
  if (!n.has_grad) {
    n.grad = Mat(n.value.rows, n.value.cols);
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::accumulate(Var x, const Mat& g) {
  if (!nodes_[x.id].requires_grad) return;
  Mat& dst = grad(x);
  require_same_shape(dst, g, "Tape::accumulate");
  for (std::size_t i = 0; i < g.v.size(); ++i) dst.v[i] += g.v[i];
}

Var Tape::constant(Mat value) { return push(std::move(value), false, {}); }
Var Tape::leaf(Mat value, bool requires_grad) { return push(std::move(value), requires_grad, {}); }

Var Tape::matmul(Var a, Var b) {
  Mat out;
  kernels::matmul(value(a), value(b), out);
  return push(std::move(out), any_grad({a, b}), [a, b, self = static_cast<int>(nodes_.size())](Tape& t) {
    const Mat& g = t.nodes_[self].grad;
    if (t.requires_grad(a)) {
      Mat da;
      kernels::matmul_bt(g, t.value(b), da);
      t.accumulate(a, da);
    }
    if (t.requires_grad(b)) {
      Mat db;
      kernels::matmul_at(t.value(a), g, db);
      t.accumulate(b, db);
    }
  });
}

Var Tape::matmul_bt(Var a, Var b) {
  Mat out;
  kernels::matmul_bt(value(a), value(b), out);
  return push(std::move(out), any_grad({a, b}), [a, b, self = static_cast<int>(nodes_.size())](Tape& t) {
    const Mat& g = t.nodes_[self].grad;
    if (t.requires_grad(a)) {
      Mat da;
      kernels::matmul(g, t.value(b), da);
      t.accumulate(a, da);
    }
    if (t.requires_grad(b)) {
      Mat db;
      kernels::matmul_at(g, t.value(a), db);
      t.accumulate(b, db);
    }
  });
}

Var Tape::add(Var a, Var b) { return axpby(1.0, a, 1.0, b); }

Var Tape::axpby(double alpha, Var a, double beta, Var b) {
  const Mat& x = value(a);
  const Mat& y = value(b);
  require_same_shape(x, y, "Tape::axpby");
  Mat out(x.rows, x.cols);
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] = alpha * x.v[i] + beta * y.v[i];
  return push(std::move(out), any_grad({a, b}), [=, self = static_cast<int>(nodes_.size())](Tape& t) {
    const Mat& g = t.nodes_[self].grad;
    for (auto [var, coef] : {std::pair{a, alpha}, std::pair{b, beta}}) {
      if (!t.requires_grad(var)) continue;
      Mat& d = t.grad(var);
      for (std::size_t i = 0; i < g.v.size(); ++i) d.v[i] += coef * g.v[i];
    }
  });
}

Var Tape::add_row(Var a, Var row) {
  const Mat& x = value(a);
  const Mat& r = value(row);
  if (r.rows != 1 || r.cols != x.cols) throw std::invalid_argument("Tape::add_row: row shape mismatch");
  Mat out = x;
  for (int i = 0; i < out.rows; ++i)
    for (int j = 0; j < out.cols; ++j) out(i, j) += r(0, j);
  return push(std::move(out), any_grad({a, row}), [a, row, self = static_cast<int>(nodes_.size())](Tape& t) {
    const Mat& g = t.nodes_[self].grad;
    t.accumulate(a, g);
    if (t.requires_grad(row)) {
      Mat& d = t.grad(row);
      for (int i = 0; i < g.rows; ++i)
        for (int j = 0; j < g.cols; ++j) d(0, j) += g(i, j);
    }
  });
}

Var Tape::scale(Var a, double s) {
  Mat out = value(a);
  for (double& x : out.v) x *= s;
  return push(std::move(out), any_grad({a}), [a, s, self = static_cast<int>(nodes_.size())](Tape& t) {
    const Mat& g = t.nodes_[self].grad;
    Mat& d = t.grad(a);
    for (std::size_t i = 0; i < g.v.size(); ++i) d.v[i] += s * g.v[i];
  });
}

Var Tape::silu(Var a) {
  const Mat& x = value(a);
  Mat out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.v.size(); ++i) out.v[i] = x.v[i] / (1.0 + std::exp(-x.v[i]));
  return push(std::move(out), any_grad({a}), [a, self = static_cast<int>(nodes_.size())](Tape& t) {
    const Mat& g = t.nodes_[self].grad;
    const Mat& x = t.value(a);
    Mat& d = t.grad(a);
    for (std::size_t i = 0; i < g.v.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-x.v[i]));
      d.v[i] += g.v[i] * s * (1.0 + x.v[i] * (1.0 - s));
    }
  });
}

Var Tape::softmax_rows(Var a) {
  Mat out;
  kernels::softmax_rows(value(a), out);
  return push(std::move(out), any_grad({a}), [a, self = static_cast<int>(nodes_.size())](Tape& t) {
    const Mat& g = t.nodes_[self].grad;
    const Mat& y = t.nodes_[self].value;
    Mat& d = t.grad(a);
    for (int i = 0; i < y.rows; ++i) {
      double dot = 0.0;
      for (int j = 0; j < y.cols; ++j) dot += g(i, j) * y(i, j);
      for (int j = 0; j < y.cols; ++j) d(i, j) += y(i, j) * (g(i, j) - dot);
    }
  });
}

Var Tape::gather_rows(Var table, std::span<const int> rows) {
  const Mat& tb = value(table);
  Mat out(static_cast<int>(rows.size()), tb.cols);
  std::vector<int> idx(rows.begin(), rows.end());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= tb.rows) throw std::out_of_range("Tape::gather_rows: index out of range");
    for (int j = 0; j < tb.cols; ++j) out(static_cast<int>(i), j) = tb(idx[i], j);
  }
  return push(std::move(out), any_grad({table}),
              [table, idx = std::move(idx), self = static_cast<int>(nodes_.size())](Tape& t) {
                const Mat& g = t.nodes_[self].grad;
                Mat& d = t.grad(table);
                for (std::size_t i = 0; i < idx.size(); ++i)
                  for (int j = 0; j < g.cols; ++j) d(idx[i], j) += g(static_cast<int>(i), j);
              });
}

Var Tape::mse(Var a, const Mat& target) {
  const Mat& x = value(a);
  require_same_shape(x, target, "Tape::mse");
  double s = 0.0;
  for (std::size_t i = 0; i < x.v.size(); ++i) {
    const double d = x.v[i] - target.v[i];
    s += d * d;
  }
  const double n = static_cast<double>(x.v.size());
  Mat out(1, 1, s / n);
  return push(std::move(out), any_grad({a}), [a, target, n, self = static_cast<int>(nodes_.size())](Tape& t) {
    const double g = t.nodes_[self].grad.v[0];
    const Mat& x = t.value(a);
    Mat& d = t.grad(a);
    for (std::size_t i = 0; i < x.v.size(); ++i) d.v[i] += g * 2.0 * (x.v[i] - target.v[i]) / n;
  });
}

void Tape::backward(Var scalar) {
  Node& n = nodes_.at(scalar.id);
  if (n.value.rows != 1 || n.value.cols != 1) throw std::invalid_argument("Tape::backward: expected a 1x1 node");
  grad(scalar).v[0] += 1.0;
  backward_seeded();
}

void Tape::backward_seeded() {
  for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.back && n.has_grad) n.back(*this);
  }
}

}  // namespace segedit::ad
