#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "nrp/tensor.hpp"

namespace nrp {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  DType dtype() const { return value().dtype(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Given the gradient of the output, returns one gradient per input. Entries for
// inputs whose needs_grad flag is false may be left undefined.
using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out, const std::vector<bool>& needs_grad)>;

class Gradients {
 public:
  /// Gradient for a node; zeros when no path connects it to the output.
  Tensor of(const Var& v) const;
  bool reached(const Var& v) const;

 private:
  friend class Tape;
  std::vector<Tensor> grads_;
};

/// Records primitive operations in execution order. Single owner; one backward
/// pass consumes it.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records an operation. When no input requires a gradient the backward
  /// function is dropped and the node behaves as a constant.
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward);

  Gradients backward(const Var& output);

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  void check_open() const;

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

/// Elementwise a + b for tensors of identical shape and dtype.
Tensor add_tensors(const Tensor& a, const Tensor& b);

}  // namespace nrp
