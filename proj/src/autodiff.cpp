#include "rknet/autodiff.hpp"

namespace rknet {

Var Tape::push(Node node) {
  if (consumed_) throw TapeError("tape already consumed by backward; record on a fresh tape");
  nodes_.push_back(std::move(node));
  grads_.emplace_back();
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value, std::string_view name) {
  Node n;
  n.op = std::string(name);
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::parameter(Parameter& param) {
  if (auto it = param_ids_.find(&param); it != param_ids_.end()) {
    return Var(this, it->second);
  }
  if (param.grad.shape() != param.value.shape() || param.grad.dtype() != param.value.dtype()) {
    param.grad = Tensor::zeros(param.value.shape(), param.value.dtype());
  }
  Node n;
  n.op = "param:" + param.name;
  n.value = param.value;
  n.requires_grad = grad_enabled_;
  n.param = &param;
  Var v = push(std::move(n));
  param_ids_.emplace(&param, v.id());
  return v;
}

Var Tape::record(std::string_view op, Tensor value, std::initializer_list<Var> inputs,
                 BackwardFn backward) {
  return record(op, std::move(value), std::vector<Var>(inputs), std::move(backward));
}

Var Tape::record(std::string_view op, Tensor value, const std::vector<Var>& inputs,
                 BackwardFn backward) {
  Node n;
  n.op = std::string(op);
  n.value = std::move(value);
  for (const auto& in : inputs) {
    if (&in.tape() != this) throw TapeError(n.op + ": input recorded on a different tape");
    n.requires_grad = n.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

void Tape::accumulate(Var v, const Tensor& grad) {
  auto& node = nodes_.at(v.id());
  if (!node.requires_grad) return;
  require_same_shape(node.value, grad, ("gradient for " + node.op).c_str());
  auto& slot = grads_[v.id()];
  if (slot) {
    slot->add_inplace(grad);
  } else {
    slot = grad;
  }
}

void Tape::backward(Var loss) {
  if (consumed_) throw TapeError("tape is single-use: backward already ran");
  if (&loss.tape() != this) throw TapeError("loss was recorded on a different tape");
  const auto& lv = nodes_.at(loss.id()).value;
  if (lv.numel() != 1) {
    throw TapeError("backward needs a scalar loss, got shape " + shape_to_string(lv.shape()));
  }
  consumed_ = true;
  if (!nodes_[loss.id()].requires_grad) return;
  grads_[loss.id()] = Tensor::full(lv.shape(), 1.0, lv.dtype());
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (!grads_[i]) continue;
    if (node.param) {
      node.param->grad.add_inplace(*grads_[i]);
    } else if (node.backward) {
      visit_log_.push_back(i);
      node.backward(*this, *grads_[i]);
    }
    grads_[i].reset();
  }
}

std::optional<std::size_t> Tape::first_non_finite() const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].value.all_finite()) return i;
  }
  return std::nullopt;
}

}  // namespace rknet
