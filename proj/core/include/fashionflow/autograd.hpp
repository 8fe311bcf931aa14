#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fashionflow/tensor.hpp"

namespace ff {

// A trainable tensor. The gradient buffer stays absent until a backward pass
// reaches the parameter; repeated passes accumulate into it.
struct Parameter {
  Tensor value;
  std::optional<Tensor> grad;
  bool requires_grad = true;

  Parameter() = default;
  explicit Parameter(Tensor v) : value(std::move(v)) {}
  void zero_grad() { grad.reset(); }
};

class Tape;

// Handle to a value recorded on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::int64_t dim(int axis) const { return value().dim(axis); }
  int rank() const { return value().rank(); }
  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Records operations of one forward pass. Created per step and discarded;
// never shared between threads.
class Tape {
 public:
  // Backward rule: receives the node's output value and its gradient, and
  // accumulates into input gradients through Tape::grad_buffer.
  using BackwardFn = std::function<void(Tape&, const Tensor& out, const Tensor& grad_out)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Tensor value);
  // Leaf whose gradient is collected on the tape (read back with grad()).
  Var input(Tensor value);
  // Leaf bound to a parameter; backward accumulates into param.grad.
  Var param(Parameter& p);

  // Records an op output. `inputs` are the Var ids the rule may write to.
  Var record(Tensor value, std::vector<int> inputs, BackwardFn backward);

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Zero-initialised gradient buffer of node `id`; valid during backward().
  Tensor& grad_buffer(int id);

  // Populates gradients of everything reachable from `loss` (a one-element tensor).
  void backward(const Var& loss);
  // Gradient of a recorded node after backward(), if it was reached.
  const std::optional<Tensor>& grad(const Var& v) const;

 private:
  struct Node {
    Tensor value;
    std::vector<int> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::vector<std::optional<Tensor>> grads_;
  bool grad_enabled_;
};

}  // namespace ff
