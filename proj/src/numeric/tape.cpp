#include "bupo/numeric/tape.hpp"

#include <string>

#include "bupo/errors.hpp"

namespace bupo::numeric {

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }
const Tensor* Var::grad() const { return tape_->grad(id_); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw NumericFault("leaf value contains NaN or Inf");
  Node node;
  node.owned = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::borrow(const Tensor& value, bool requires_grad) {
  Node node;
  node.borrowed = &value;
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(const char* op, std::vector<std::size_t> inputs, Tensor value,
                 BackwardFn backward) {
  if (!value.all_finite()) {
    throw NumericFault(std::string(op) + " produced a non-finite value");
  }
  Node node;
  node.op = op;
  node.owned = std::move(value);
  if (recording_) {
    for (std::size_t in : inputs) {
      if (in >= nodes_.size()) throw UsageError(std::string(op) + ": unknown input");
      node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
    }
    if (node.requires_grad) {
      node.inputs = std::move(inputs);
      node.backward = std::move(backward);
    }
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw UsageError("backward: variable belongs to another tape");
  if (!recording_) throw UsageError("backward: tape was created without recording");
  if (value(loss.id()).size() != 1) {
    throw UsageError("backward requires a scalar loss, got shape " +
                     shape_string(value(loss.id()).shape()));
  }
  for (Node& node : nodes_) node.grad.reset();
  if (!nodes_[loss.id()].requires_grad) return;
  grad_buffer(loss.id()).fill(1.0);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.grad || !node.backward) continue;
    node.backward(*this, i);
  }
}

const Tensor& Tape::value(std::size_t id) const {
  const Node& node = nodes_.at(id);
  return node.borrowed ? *node.borrowed : node.owned;
}

const Tensor* Tape::grad(std::size_t id) const {
  const Node& node = nodes_.at(id);
  return node.grad ? &*node.grad : nullptr;
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& node = nodes_.at(id);
  if (!node.grad) node.grad.emplace(value(id).shape());
  return *node.grad;
}

}  // namespace bupo::numeric
