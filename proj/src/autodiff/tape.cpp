#include "nrp/tape.hpp"

#include <stdexcept>

namespace nrp {

const Tensor& Var::value() const {
  if (!tape_) throw std::logic_error("value() on an unbound Var");
  return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

Tensor Gradients::of(const Var& v) const {
  if (reached(v)) return grads_[v.id()];
  return Tensor::zeros(v.shape(), v.dtype());
}

bool Gradients::reached(const Var& v) const { return v.id() < grads_.size() && grads_[v.id()].defined(); }

void Tape::check_open() const {
  if (consumed_) throw std::logic_error("tape already consumed by a backward pass");
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  check_open();
  if (!value.defined()) throw std::invalid_argument("leaf from undefined tensor");
  nodes_.push_back(Node{std::move(value), {}, {}, requires_grad});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
  check_open();
  Node node;
  node.value = std::move(value);
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (in.tape() != this) throw std::invalid_argument("operation mixes variables from different tapes");
    node.inputs.push_back(in.id());
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Gradients Tape::backward(const Var& output) {
  check_open();
  if (output.tape() != this) throw std::invalid_argument("backward on a variable from another tape");
  if (output.value().numel() != 1)
    throw ShapeError("backward requires a scalar output, got " + shape_str(output.shape()));
  consumed_ = true;

  Gradients result;
  result.grads_.resize(nodes_.size());
  const auto& out = nodes_[output.id()];
  result.grads_[output.id()] = Tensor::full(out.value.shape(), 1.0, out.value.dtype());

  for (std::size_t i = output.id() + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (!node.backward || !result.grads_[i].defined()) continue;
    std::vector<bool> needs(node.inputs.size());
    for (std::size_t k = 0; k < node.inputs.size(); ++k) needs[k] = nodes_[node.inputs[k]].requires_grad;
    auto in_grads = node.backward(result.grads_[i], needs);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      if (!needs[k] || k >= in_grads.size() || !in_grads[k].defined()) continue;
      auto& slot = result.grads_[node.inputs[k]];
      slot = slot.defined() ? add_tensors(slot, in_grads[k]) : std::move(in_grads[k]);
    }
    node.backward = nullptr;
  }
  return result;
}

Tensor add_tensors(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.dtype() != b.dtype())
    throw ShapeError("gradient accumulation mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return visit_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = a.data<T>();
    auto y = b.data<T>();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return Tensor(a.shape(), std::move(out));
  });
}

}  // namespace nrp
