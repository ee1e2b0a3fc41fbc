#pragma once

// Minimal reverse-mode differentiation over Mat values. A Tape records ops in
// creation order; backward() walks them in reverse. Nodes that do not depend
// on any gradient-requiring leaf record no backward closure at all, so an
// inference-only forward pass costs little more than the raw kernels.

#include <functional>
#include <span>
#include <vector>

#include "segedit/matrix.hpp"

namespace segedit::ad {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  Var constant(Mat value);
  Var leaf(Mat value, bool requires_grad);

  const Mat& value(Var x) const { return nodes_.at(x.id).value; }
  bool requires_grad(Var x) const { return nodes_.at(x.id).requires_grad; }
  // Gradient accumulated into x; zero-filled on first access.
  Mat& grad(Var x);

  Var matmul(Var a, Var b);
  Var matmul_bt(Var a, Var b);
  Var add(Var a, Var b);
  Var add_row(Var a, Var row);  // broadcast a 1 x n row over every row of a
  Var scale(Var a, double s);
  Var axpby(double alpha, Var a, double beta, Var b);  // alpha * a + beta * b
  Var silu(Var a);
  Var softmax_rows(Var a);
  Var gather_rows(Var table, std::span<const int> rows);
  // Scalar (1 x 1): mean of (a - target)^2 over all elements.
  Var mse(Var a, const Mat& target);

  // Seeds d(x)/d(x) = 1 for a 1 x 1 node and propagates.
  void backward(Var scalar);
  // Propagates gradients already seeded through grad().
  void backward_seeded();

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    bool has_grad = false;
    std::function<void(Tape&)> back;
  };

  Var push(Mat value, bool requires_grad, std::function<void(Tape&)> back);
  bool any_grad(std::initializer_list<Var> xs) const;
  void accumulate(Var x, const Mat& g);

  std::vector<Node> nodes_;
};

}  // namespace segedit::ad
