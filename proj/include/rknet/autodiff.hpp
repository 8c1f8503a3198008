#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "rknet/tensor.hpp"

namespace rknet {

/// Trainable tensor with a gradient slot of identical shape.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name, Tensor value)
      : name(std::move(name)), value(std::move(value)), grad(Tensor::zeros(this->value.shape(), this->value.dtype())) {}

  void zero_grad() { grad.fill(0.0); }

  std::string name;
  Tensor value;
  Tensor grad;
};

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const;
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  DType dtype() const { return value().dtype(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Ordered record of differentiable operations.
///
/// Every op appends one node; backward() walks the nodes in exact reverse
/// order. A tape may be consumed by backward() only once.
class Tape {
 public:
  // Receives the gradient of the node's output; must accumulate into inputs
  // through Tape::accumulate.
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  // With gradients disabled, parameter leaves do not require grad, so no
  // backward closures are kept (cheap inference).
  explicit Tape(bool grad_enabled) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value, std::string_view name = "constant");
  // Leaf bound to a parameter; its gradient lands in param.grad on backward.
  // Recording the same parameter twice returns the same leaf.
  Var parameter(Parameter& param);

  Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs,
             BackwardFn backward);
  Var record(std::string_view op, Tensor value, const std::vector<Var>& inputs,
             BackwardFn backward);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor& value(Var v) const { return value(v.id()); }
  // Write access for instrumentation probes that perturb forward values.
  Tensor& mutable_value(Var v) { return nodes_.at(v.id()).value; }
  const std::string& op_name(std::size_t id) const { return nodes_.at(id).op; }
  bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  bool grad_enabled() const { return grad_enabled_; }

  void accumulate(Var v, const Tensor& grad);

  // Populates Parameter::grad (accumulating) for every parameter reachable
  // from a scalar loss.
  void backward(Var loss);

  // Node ids whose backward functions ran, in the order they ran.
  const std::vector<std::size_t>& backward_visit_log() const { return visit_log_; }

  // First node whose value holds a NaN or infinity.
  std::optional<std::size_t> first_non_finite() const;

 private:
  struct Node {
    std::string op;
    Tensor value;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  Var push(Node node);

  std::deque<Node> nodes_;  // deque: value references survive later pushes
  std::vector<std::optional<Tensor>> grads_;
  std::vector<std::size_t> visit_log_;
  std::unordered_map<const Parameter*, std::size_t> param_ids_;
  bool consumed_ = false;
  bool grad_enabled_ = true;
};

inline Tape& Var::tape() const {
  if (!tape_) throw TapeError("use of an unbound Var");
  return *tape_;
}

inline const Tensor& Var::value() const { return tape().value(id_); }

}  // namespace rknet
