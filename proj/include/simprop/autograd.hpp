#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <vector>

#include "simprop/tensor.hpp"

namespace simprop {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode tape over whole tensors. Single-threaded; one tape per
/// forward/backward pass.
class Tape {
 public:
  /// Receives the gradient flowing into the node's output.
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Trainable input; its gradient is available after backward().
  Var leaf(Tensor value);
  /// Input that never receives a gradient.
  Var constant(Tensor value);

  /// Records an op output. `backward` runs only if some parent needs a gradient.
  Var record(Tensor value, std::vector<Var> parents, BackwardFn backward);

  /// Seeds d(root)/d(root) = 1 and propagates to every node that requires grad.
  void backward(Var root);

  const Tensor& value(const Var& v) const;
  /// Gradient of a node; zeros if nothing flowed into it.
  const Tensor& grad(const Var& v);
  bool requires_grad(const Var& v) const;

  /// Adds `g` into the gradient buffer of `v` (no-op for constants).
  void accumulate(const Var& v, const Tensor& g);
  /// Mutable gradient buffer of `v`, allocated on first use. Only valid for
  /// nodes that require grad.
  Tensor& grad_buffer(const Var& v);

  std::size_t size() const { return nodes_.size(); }

  /// Non-smooth ops fold their active-branch pattern in here, so callers can
  /// tell whether two evaluations took the same piecewise-smooth branch.
  void note_branches(std::uint64_t digest);
  std::uint64_t branch_digest() const { return branch_digest_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  Node& node(const Var& v);
  const Node& node(const Var& v) const;

  std::deque<Node> nodes_;
  std::uint64_t branch_digest_ = 0;
};

struct Conv2dOptions {
  int stride = 1;
  int dilation = 1;
  int padding = 0;
};

// --- differentiable ops ----------------------------------------------------
// All spatial tensors are C x H x W (single sample).

Var conv2d(const Var& input, const Var& kernel, const std::optional<Var>& bias, Conv2dOptions opts = {});
Var relu(const Var& x);
/// Non-overlapping average pooling, window == stride == `factor`.
Var avg_pool(const Var& x, int factor);
/// C x H x W -> C, mean over spatial positions.
Var global_avg_pool(const Var& x);
/// Corner-aligned bilinear interpolation.
Var bilinear_resize(const Var& x, int out_h, int out_w);
/// Stacks along the channel axis. Rank-1 operands of length C are broadcast
/// to C x H x W first.
Var concat_channels(const std::vector<Var>& parts);
Var instance_norm(const Var& x, const Var& gamma, const Var& beta, float eps = 1e-5f);
/// Per-position cosine similarity between feature columns and a probe.
Var cosine_sim_map(const Var& features, const Var& probe, float eps = 1e-6f);
/// Mean pixel cross-entropy of 2 x H x W logits against an H x W {0,1} target.
Var softmax_cross_entropy(const Var& logits, const Tensor& target);
/// Per-pixel version of softmax_cross_entropy (H x W, not averaged).
Var cross_entropy_map(const Var& logits, const Tensor& target);
/// Mask-weighted spatial mean: sum(F * w) / (sum(w) + eps). With `raw`,
/// divides by H*W instead (literal average pooling of the masked map).
Var masked_average(const Var& features, const Tensor& weights, float eps = 1e-6f, bool raw = false);
/// Elementwise mean of equally shaped operands, accumulated in double in
/// argument order.
Var mean_of(const std::vector<Var>& parts);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
/// scale * x + shift
Var affine(const Var& x, float scale, float shift);
Var sum(const Var& x);

}  // namespace simprop
