#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "vib/tensor.hpp"

namespace vib {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  bool requires_grad() const;
};

// Gradient buffers handed to an op's backward closure. grad(id) returns
// nullptr for nodes that do not require a gradient, so closures skip work.
class GradSink {
 public:
  explicit GradSink(std::vector<Tensor>& grads, const Tape& tape) : grads_(grads), tape_(tape) {}
  Tensor* grad(std::uint32_t id);

 private:
  std::vector<Tensor>& grads_;
  const Tape& tape_;
};

// Receives the node's own output value and the gradient flowing into it.
using BackwardFn =
    std::function<void(const Tensor& out, const Tensor& grad_out, GradSink& sink)>;

// Gradients of a scalar w.r.t. every requires_grad leaf of a tape.
class Gradients {
 public:
  Gradients() = default;
  Gradients(std::vector<std::uint32_t> leaf_ids, std::vector<Tensor> grads)
      : leaf_ids_(std::move(leaf_ids)), grads_(std::move(grads)) {}

  // Gradient for a leaf; throws if the leaf did not require a gradient.
  const Tensor& of(Var leaf) const;
  const Tensor& of(std::uint32_t id) const;
  std::size_t size() const { return leaf_ids_.size(); }
  const std::vector<std::uint32_t>& leaf_ids() const { return leaf_ids_; }

 private:
  std::vector<std::uint32_t> leaf_ids_;
  std::vector<Tensor> grads_;
};

// Reverse-mode gradient tape. Each op appends a node holding its output value,
// its parent ids, and a closure that propagates the output gradient to the
// parents. Single-threaded; one tape per forward pass.
//
// With recording disabled no closures are stored and backward() is unavailable.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  Var push(Tensor value, std::initializer_list<Var> parents, BackwardFn backward);
  Var push(Tensor value, std::span<const Var> parents, BackwardFn backward);

  const Tensor& value(std::uint32_t id) const { return nodes_[id].value; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  // Propagates d(loss)/d(node) for a 1x1 loss. Leaves not reachable from the
  // loss receive zero gradients.
  Gradients backward(Var loss) const;

 private:
  struct Node {
    Tensor value;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_leaf = false;
  };

  bool recording_;
  std::deque<Node> nodes_;
};

namespace ops {

Var matmul(Var a, Var b);
// a * b^T
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double value);
// a (n x m) + bias (1 x m) broadcast over rows.
Var add_row(Var a, Var bias);
// Affine map x W + b.
Var affine(Var x, Var weight, Var bias);

// Exact GELU: x * Phi(x).
Var gelu(Var x);
// Normalizes each row to zero mean / unit variance (eps 1e-5), then gain and bias (1 x m).
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
// Row-wise softmax, stabilized by row-max subtraction. With `causal`, entry
// (i, j) for j > i is masked to probability zero.
Var softmax_rows(Var x, bool causal = false);
Var exp(Var x);
Var softplus(Var x);
// Gradient is passed through only where lo < x < hi.
Var clamp(Var x, double lo, double hi);

Var slice_cols(Var x, std::size_t lo, std::size_t hi);
Var slice_rows(Var x, std::size_t lo, std::size_t hi);
Var concat_cols(std::span<const Var> parts);
Var gather_rows(Var table, std::span<const int> ids);
// Same elements, new 2-D shape.
Var reshape(Var x, std::size_t rows, std::size_t cols);

Var sum(Var x);
Var mean(Var x);
// Sum over columns: n x m -> n x 1.
Var sum_cols(Var x);
// Mean over rows with target >= 0 of logsumexp(logits_i) - logits_i[target_i].
Var cross_entropy(Var logits, std::span<const int> targets);

}  // namespace ops

// Eager forms used where no gradient is needed.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax_rows(const Tensor& x, bool causal = false);
Tensor gelu(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

}  // namespace vib
