// Copyright 2026 The dpmld Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Minimal reverse-mode automatic differentiation over dense 2-D double
// tensors. A Tape records operations eagerly; backward() walks the recording
// in reverse and accumulates gradients into every node that needs them.
// Graphs are built, differentiated once, and discarded. A tape is confined to
// one thread; kernels may parallelize internally per ExecPolicy.
//
// Shapes are (rows, cols); a scalar is 1x1. There is no broadcasting beyond
// scalar-tensor ops and the explicit add_rowvec bias op.

#ifndef DPMLD_AUTODIFF_HPP_
#define DPMLD_AUTODIFF_HPP_

#include <cstddef>
#include <functional>
#include <vector>

#include "dpmld/parallel.hpp"

namespace dpmld::ad {

class Tape;

// Handle into a Tape. Cheap to copy; valid while the tape is alive.
struct Tensor {
  Tape* tape = nullptr;
  int id = -1;

  std::size_t rows() const;
  std::size_t cols() const;
  std::size_t size() const;
  const std::vector<double>& value() const;
  const std::vector<double>& grad() const;
  bool needs_grad() const;
  double item() const;  // requires shape 1x1
  double at(std::size_t r, std::size_t c) const;
};

class Tape {
 public:
  explicit Tape(ExecPolicy policy = {}) : policy_(policy) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaves copy the provided values; set needs_grad to collect a gradient.
  Tensor leaf(std::size_t rows, std::size_t cols, const double* values,
              bool needs_grad);
  Tensor leaf(std::size_t rows, std::size_t cols,
              const std::vector<double>& values, bool needs_grad);
  Tensor constant(std::size_t rows, std::size_t cols, double fill);
  Tensor scalar(double v);

  // Seeds d(loss)/d(loss) = 1 and propagates. loss must be 1x1. A second call
  // on the same tape is rejected; build a fresh graph instead.
  void backward(const Tensor& loss);

  const ExecPolicy& policy() const { return policy_; }
  std::size_t node_count() const { return nodes_.size(); }

 private:
  friend struct Tensor;
  friend class OpBuilder;

  struct Node {
    std::size_t rows = 0, cols = 0;
    std::vector<double> value;
    std::vector<double> grad;  // allocated only when needs_grad
    bool needs_grad = false;
    std::function<void()> backward;  // absent on leaves/constants
  };

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const {
    return nodes_[static_cast<std::size_t>(id)];
  }
  int push(Node n);

  ExecPolicy policy_;
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// Element-wise ops (operands must share one tape and one shape).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

// Scalar-tensor ops.
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);

// y[i,j] = a[i,j] + b[0,j]; b is a 1 x cols bias row.
Tensor add_rowvec(const Tensor& a, const Tensor& b);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);

// Identity inside [lo, hi], clamped outside; gradient passes where the input
// lies in [lo, hi] (inclusive) and is zero outside.
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, std::size_t rows, std::size_t cols);

// axis 0 stacks rows, axis 1 stacks columns.
Tensor concat(const std::vector<Tensor>& parts, int axis);
// Half-open row/column ranges.
Tensor slice(const Tensor& a, std::size_t r0, std::size_t r1, std::size_t c0,
             std::size_t c1);

// axis 1 normalizes each row, axis 0 each column. Rows/columns sum to 1.
Tensor softmax(const Tensor& a, int axis);

// Per-row standardization: (x - mean) / sqrt(var + 1e-5).
Tensor layer_normalize(const Tensor& a);

Tensor sum(const Tensor& a);   // 1x1
Tensor mean(const Tensor& a);  // 1x1

// Rows come in consecutive blocks of block_rows; returns per-block column
// means, shape (rows/block_rows, cols).
Tensor block_mean_rows(const Tensor& a, std::size_t block_rows);

// Embedding lookup: table is (vocab, dim); out[i,:] = table[ids[i],:].
Tensor embed(const Tensor& table, const std::vector<int>& ids);

// Grouped attention primitives over `groups` samples stacked as row blocks.
// scores: Q is (groups*q_len, d), K is (groups*k_len, d); the result is
// (groups*q_len, k_len) with row block g formed from K's block g only.
Tensor grouped_attn_scores(const Tensor& q, const Tensor& k,
                           std::size_t q_len, std::size_t k_len);
// apply: A is (groups*q_len, k_len), V is (groups*k_len, d); result is
// (groups*q_len, d).
Tensor grouped_attn_apply(const Tensor& a, const Tensor& v, std::size_t q_len,
                          std::size_t k_len);

// Mean over rows of the negative log-softmax at the true class.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

}  // namespace dpmld::ad

#endif  // DPMLD_AUTODIFF_HPP_
