#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "megt/tensor.hpp"

namespace megt::ad {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
public:
  Var() = default;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  Tape& tape() const { return *tape_; }
  std::uint32_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  bool requires_grad() const;

private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Ordered record of executed operations. backward() replays it in exact
/// reverse order. A tape built with recording disabled stores values only,
/// which is the inference path.
class Tape {
public:
  using BackwardFn = std::function<void(Tape&, std::uint32_t self)>;

  explicit Tape(bool recording = true);
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }

  Var constant(Tensor value);
  /// Leaf bound to an external parameter; backward() accumulates into param.grad().
  /// The parameter must outlive the tape and stay unmodified while it is in use.
  Var parameter(Tensor& param);

  /// Populates gradients of every parameter reachable from `loss` (must be 1x1).
  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value(std::uint32_t id) const;
  bool needs_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  /// Gradient of an intermediate value after backward(); empty if none flowed.
  std::span<const double> grad(Var v) const { return nodes_[v.id()].grad; }

  // -- op-author interface --------------------------------------------------
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);
  /// Incoming gradient of node `id` (same length as its value).
  std::span<const double> upstream(std::uint32_t id) const { return nodes_[id].grad; }
  /// Accumulation buffer for input `id`, or an empty span when it needs no gradient.
  std::span<double> accum(std::uint32_t id);

private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor* param = nullptr;
    Buffer grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  Var push(Node node);

  std::deque<Node> nodes_;  // deque: values stay put as the tape grows
  bool recording_;
};

/// Test hook: scales the input gradients produced by the named op's backward
/// rule by `factor`. Empty name disables. Used for negative-control gradient checks.
void set_gradient_fault(std::string op, double factor = 1.5);
double gradient_fault(const char* op);

// -- operations -------------------------------------------------------------
// Every op validates shapes and throws ShapeError naming both shapes.

Var matmul(Var a, Var b);     // a * b
Var matmul_nt(Var a, Var b);  // a * b^T
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
/// Adds a 1xd row vector to every row of a.
Var add_row(Var a, Var row);
Var scale(Var a, double s);
/// Multiplies every entry of a by the 1x1 value s (differentiable in both).
Var scale_by(Var a, Var s);
Var add_identity(Var a);
Var relu(Var a);
Var softmax_rows(Var a);
Var layer_norm_rows(Var x, Var gamma, Var beta, double eps);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var slice_rows(Var a, std::size_t begin, std::size_t count);
Var gather_rows(Var a, std::span<const std::size_t> index);
Var gather_cols(Var a, std::span<const std::size_t> index);
/// Splits rows into m contiguous segments (first n mod m get one extra row) and averages each.
Var segment_means(Var a, std::size_t m);
/// Symmetric degree normalization D^-1/2 A D^-1/2 with D = diag(row sums of A). A must be
/// square with positive row sums.
Var gcn_normalize(Var a);
/// 1x1 value 1 / (||a||_1 * ||a||_inf): max column and max row absolute sums.
Var pinv_init_scale(Var a);
Var sum(Var a);
Var mean_rows(Var a);  // 1 x cols column means
/// -(1/M) sum_i log p[i, y_i] over the rows of a probability matrix.
Var nll_of_probs(Var probs, std::span<const std::size_t> labels);

}  // namespace megt::ad
