#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// A Var is a shared handle to a graph node. Operations record their inputs and
// a backward closure only when gradient recording is enabled and at least one
// input requires a gradient; otherwise the result is a detached leaf, so
// inference under NoGradGuard keeps no intermediate activations alive.

#include <functional>
#include <memory>
#include <random>
#include <vector>

#include "dfsar/kernels.hpp"
#include "dfsar/tensor.hpp"

namespace dfsar::ag {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  /// grad += g, allocating on first use.
  void accumulate(const Tensor& g);
  Tensor& grad_buffer();
};

using NodePtr = std::shared_ptr<Node>;

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  /// Direct access for optimizers and loaders. Never call inside a recorded graph.
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(std::size_t i) const { return node_->value.dim(i); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  bool has_grad() const { return !node_->grad.empty(); }
  const Tensor& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor(); }

  Var detach() const { return Var(node_->value, false); }
  double item() const;
  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

bool grad_enabled() noexcept;

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Seeds d(root)/d(root) = 1 and propagates to every reachable node.
void backward(const Var& root);

/// Builds a result node; `fn` is dropped when no input needs a gradient.
Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> fn);

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
/// a ⊙ c for a constant c of the same shape, or c of shape N×1×H×W broadcast over channels.
Var mul_const(const Var& a, const Tensor& c);
/// x (N×C×H×W) ⊙ m (N×1×H×W), both differentiable.
Var mul_channel_map(const Var& x, const Var& m);
/// Adds a per-channel bias b[C] to N×C×... input.
Var add_bias(const Var& x, const Var& b);
Var square(const Var& a);

Var relu(const Var& x);
Var leaky_relu(const Var& x, double slope);
Var tanh(const Var& x);
/// Logistic sigmoid, clamped into [1e-12, 1 - 1e-12] so probabilities stay strictly inside (0, 1).
Var sigmoid(const Var& x);

// ---------------------------------------------------------------- reductions

Var sum(const Var& x);
Var mean(const Var& x);
/// mean((a - b)^2)
Var mse(const Var& a, const Var& b);
/// Σ a ⊙ c for a constant c.
Var dot_const(const Var& a, const Tensor& c);
/// x / s for a scalar Var s.
Var div_scalar(const Var& x, const Var& s);

// ---------------------------------------------------------------- shape

Var reshape(const Var& x, Shape shape);
Var concat_channels(const std::vector<Var>& parts);
Var slice_channels(const Var& x, int begin, int end);
Var upsample_nearest2x(const Var& x);
Var max_pool2x2(const Var& x);
Var avg_pool(const Var& x, int k);

// ---------------------------------------------------------------- linear algebra

Var conv2d(const Var& x, const Var& w, const kernels::ConvGeometry& g);
/// x: N×F, w: O×F → N×O (no bias).
Var linear(const Var& x, const Var& w);
/// Batched matmul a[B×M×K]·b[B×K×N], or b[B×N×K] transposed when trans_b.
Var bmm(const Var& a, const Var& b, bool trans_b);
Var softmax_lastdim(const Var& x);
/// Softmax across the channel axis of N×K×H×W.
Var softmax_channels(const Var& x);
Var l2_normalize_lastdim(const Var& x, double eps = 1e-12);
/// Weighted sum over channels, N×C×H×W → N×1×H×W.
Var channel_weighted_sum(const Var& x, const std::vector<double>& weights);

/// Non-overlapping p×p patches of a zero-padded N×C×H×W map → N×P×(C·p·p).
Var extract_patches(const Var& x, int p);
/// Inverse of extract_patches (crops the zero padding).
Var fold_patches(const Var& patches, const Shape& image_shape, int p);

/// Per-sample Gram matrices N×C×C normalized by C·H·W.
Var gram(const Var& x);

/// Row-wise Euclidean distance between N×D inputs → N (gradient 0 at d = 0).
Var row_distance(const Var& a, const Var& b);

/// Rows of an N×D input selected by `index` → M×D.
Var gather_rows(const Var& x, const std::vector<int>& index);

/// Dropout with keep-probability 1 - p and inverted scaling.
Var dropout(const Var& x, double p, std::mt19937_64& rng);

}  // namespace dfsar::ag
