#include "fashionflow/autograd.hpp"

#include "fashionflow/errors.hpp"

namespace ff {

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("use of an empty Var");
  return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, nullptr, false});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::input(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, nullptr, grad_enabled_});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::param(Parameter& p) {
  const bool rg = grad_enabled_ && p.requires_grad;
  nodes_.push_back(Node{p.value, {}, nullptr, rg ? &p : nullptr, rg});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Tensor value, std::vector<int> inputs, BackwardFn backward) {
  bool rg = false;
  if (grad_enabled_) {
    for (int id : inputs) rg = rg || nodes_[static_cast<std::size_t>(id)].requires_grad;
  }
  if (!rg) {
    inputs.clear();
    backward = nullptr;
  }
  nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(backward), nullptr, rg});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor& Tape::grad_buffer(int id) {
  auto& slot = grads_[static_cast<std::size_t>(id)];
  if (!slot) slot.emplace(nodes_[static_cast<std::size_t>(id)].value.shape());
  return *slot;
}

void Tape::backward(const Var& loss) {
  if (&loss.tape() != this) throw ContractError("backward() on a Var from a different tape");
  const Tensor& lv = loss.value();
  if (lv.size() != 1) throw ContractError("backward() needs a scalar loss, got shape " + to_string(lv.shape()));
  grads_.assign(nodes_.size(), std::nullopt);
  if (!nodes_[static_cast<std::size_t>(loss.id())].requires_grad) return;
  grads_[static_cast<std::size_t>(loss.id())].emplace(lv.shape(), Scalar(1));

  for (int id = loss.id(); id >= 0; --id) {
    auto& g = grads_[static_cast<std::size_t>(id)];
    if (!g) continue;
    Node& node = nodes_[static_cast<std::size_t>(id)];
    if (node.backward) node.backward(*this, node.value, *g);
    if (node.param) {
      if (node.param->grad) {
        Tensor& acc = *node.param->grad;
        for (std::int64_t i = 0; i < acc.size(); ++i) acc[i] += (*g)[i];
      } else {
        node.param->grad = *g;
      }
    }
  }
}

const std::optional<Tensor>& Tape::grad(const Var& v) const {
  static const std::optional<Tensor> kNone;
  if (grads_.size() <= static_cast<std::size_t>(v.id())) return kNone;
  return grads_[static_cast<std::size_t>(v.id())];
}

}  // namespace ff
