#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// A Tape records every operation in creation order, so node ids are a
// topological order by construction. Var is a cheap handle (tape, id).
// Nodes are "tracked" when they are leaves created with Tape::leaf or when any
// parent is tracked; untracked nodes never allocate gradients or closures.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "hilo/tensor.hpp"

namespace hilo {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool tracked() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value);
  Var constant(Tensor value);

  // Appends an operation. The closure, if the result is tracked, reads
  // grad(self) and accumulates into parents through grad_buffer().
  Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool tracked(std::size_t id) const { return nodes_[id].tracked; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Gradient of the last backward() root w.r.t. node id; zeros if none reached it.
  Tensor grad(std::size_t id) const;
  Tensor grad(Var v) const { return grad(v.id()); }

  // Mutable accumulator, allocated on first use. Only valid for tracked nodes.
  Tensor& grad_buffer(std::size_t id);
  const Tensor* grad_if_any(std::size_t id) const;

  // Seeds d(root)/d(root) = 1 and replays the tape in reverse, visiting each
  // node at most once. root must hold a single value.
  void backward(Var root);
  void zero_grads();

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool tracked = false;
    std::vector<std::size_t> parents;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// L2-normalisation floor.
inline constexpr double kNormFloor = 1e-12;

// Matrix products. matmul: [n,k] x [k,m]; bmm: [g,n,k] x [g,k,m].
Var matmul(Var a, Var b);
Var bmm(Var a, Var b);
// Swaps the last two axes of a rank-2 or rank-3 tensor.
Var transpose(Var a);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
// Broadcast a vector over the last axis.
Var add_row(Var x, Var row);
Var mul_row(Var x, Var row);
Var scale(Var x, double c);
Var add_scalar(Var x, double c);
Var neg(Var x);

Var exp(Var x);
Var log(Var x);
Var softplus(Var x);
Var gelu(Var x);
Var relu(Var x);
// v log v, continuously extended with 0 at v = 0.
Var xlogx(Var x);

// Last-axis softmax of x / tau. mask (optional, same shape): 0 excludes an
// entry, which then gets probability 0 and no gradient.
Var softmax(Var x, double tau = 1.0);
Var log_softmax(Var x, double tau = 1.0, const Tensor* mask = nullptr);
// Last-axis log-sum-exp; drops the last axis.
Var logsumexp(Var x);

Var sum(Var x);
Var mean(Var x);
// Reductions over one axis; the axis is dropped.
Var sum_axis(Var x, std::size_t axis);
Var mean_axis(Var x, std::size_t axis);

Var concat(std::span<const Var> xs, std::size_t axis);
Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t length);
Var reshape(Var x, Shape shape);
// Rows of a rank-2 tensor, repeats allowed.
Var gather_rows(Var x, std::span<const std::size_t> rows);

// Last-axis standardisation without affine parameters.
Var layer_norm(Var x, double eps = 1e-5);
// Last-axis x / max(||x||, eps).
Var l2_normalize(Var x, double eps = kNormFloor);

// Identity forward; no gradient flows to x.
Var stop_gradient(Var x);

// Pins stop_gradient outputs on this thread while alive. Recording passes
// store each detached value in call order; after replay() every pass starts
// over and gets the stored values back instead, which makes a program with
// detached targets a smooth function for finite differences.
class DetachReplay {
 public:
  DetachReplay();
  ~DetachReplay();
  DetachReplay(const DetachReplay&) = delete;
  DetachReplay& operator=(const DetachReplay&) = delete;

  void replay();
  // Call at the start of each pass.
  void rewind() { next_ = 0; }
  std::size_t size() const { return values_.size(); }

 private:
  friend Var stop_gradient(Var x);
  std::vector<Tensor> values_;
  std::size_t next_ = 0;
  bool replaying_ = false;
  DetachReplay* prev_ = nullptr;
};
// Identity forward; gradient is negated on the way back.
Var grad_reverse(Var x);

// [B*T, H*dh] <-> [B*H, T, dh] for multi-head attention.
Var split_heads(Var x, std::size_t batch, std::size_t tokens, std::size_t heads);
Var merge_heads(Var x, std::size_t batch, std::size_t tokens, std::size_t heads);

// Finite-difference verification of a scalar tensor program.
using ScalarProgram = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

// Max over coordinates of |analytic - central| / (|analytic| + |central| + 1e-12).
// coords selects coordinates per tensor; nullptr checks all of them.
GradCheckReport grad_check(const ScalarProgram& f, std::span<const Tensor> point, double step,
                           const std::vector<std::vector<std::size_t>>* coords = nullptr);

double grad_check(const std::function<Var(Var)>& f, const Tensor& point, double step);

// Same error measure for the derivative along direction[i] on each tensor i.
double directional_check(const ScalarProgram& f, std::span<const Tensor> point,
                         std::span<const Tensor> direction, double step);

}  // namespace hilo
