#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "smoe/tensor.hpp"

namespace smoe {

/// Handle to a value recorded on a Tape.
struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const noexcept { return id != UINT32_MAX; }
};

/// Reverse-mode tape over one static graph. Values are appended in
/// topological order as ops run; backward() replays the recorded closures in
/// reverse. A tape is single-use: backward() may run once per reset().
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Tensor<T> value) { return push(std::move(value), false, "constant"); }
  /// Leaf whose gradient is tracked (a parameter or probed input).
  Var variable(Tensor<T> value) { return push(std::move(value), true, "variable"); }

  const Tensor<T>& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  /// Accumulated gradient; zeros when `v` was unreachable from the loss.
  Tensor<T> grad(Var v) const {
    const Node& n = node(v);
    return n.has_grad ? n.grad : Tensor<T>(n.value.shape());
  }

  void backward(Var loss);

  /// Drops every recorded value and closure.
  void reset();

  std::size_t size() const noexcept { return nodes_.size(); }

  // -- op-author interface ------------------------------------------------

  /// Records an op output; non-finite values fail fast with the op name.
  Var push(Tensor<T> value, bool requires_grad, std::string_view op);
  void on_backward(Backward fn) { closures_.push_back(std::move(fn)); }
  Tensor<T>& grad_ref(Var v);
  bool has_grad(Var v) const { return node(v).has_grad; }
  bool any_requires_grad(std::initializer_list<Var> vars) const {
    for (Var v : vars)
      if (v.valid() && node(v).requires_grad) return true;
    return false;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool has_grad = false;
  };

  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw ShapeError("Tape: variable does not belong to this tape");
    return nodes_[v.id];
  }
  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw ShapeError("Tape: variable does not belong to this tape");
    return nodes_[v.id];
  }

  std::vector<Node> nodes_;
  std::vector<Backward> closures_;
  bool backward_done_ = false;
};

/// Differentiable primitives. Every op records its output on the tape and,
/// when any input requires a gradient, a closure computing input gradients.
namespace ag {

template <typename T> Var add(Tape<T>& tape, Var a, Var b);
template <typename T> Var mul(Tape<T>& tape, Var a, Var b);
template <typename T> Var scale(Tape<T>& tape, Var a, T factor);
template <typename T> Var sum(Tape<T>& tape, Var a);
/// (n x k) * (k x m)
template <typename T> Var matmul(Tape<T>& tape, Var a, Var b);
/// Rows of `table` (V x d) selected by `ids`.
template <typename T> Var embedding(Tape<T>& tape, Var table, std::span<const std::int32_t> ids);
/// Row-wise x / rms(x) * gain for x of shape (n x d) and gain (d).
template <typename T> Var rmsnorm(Tape<T>& tape, Var x, Var gain, T eps);
/// Exact (erf) GELU.
template <typename T> Var gelu(Tape<T>& tape, Var x);
template <typename T> Var sigmoid(Tape<T>& tape, Var x);
/// Mean over rows of an (n x c) matrix, giving (c).
template <typename T> Var column_mean(Tape<T>& tape, Var x);
/// Mean NLL over rows with mask != 0; logits (n x V).
template <typename T>
Var cross_entropy(Tape<T>& tape, Var logits, std::span<const std::int32_t> targets,
                  std::span<const std::uint8_t> mask = {});

}  // namespace ag

/// Central differences (f(x+h) - f(x-h)) / 2h per coordinate.
Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>& f,
                                const Tensor<double>& x, double h = 1e-5);

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
double max_relative_error(std::span<const double> a, std::span<const double> b,
                          double floor = 1e-8);

}  // namespace smoe
