#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "bupo/numeric/tensor.hpp"

namespace bupo::numeric {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  // Accumulated gradient after Tape::backward, or nullptr if none reached this value.
  const Tensor* grad() const;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Single-owner record of differentiable operations in execution order.
// Backward walks the records once in reverse. Not shareable across threads.
class Tape {
 public:
  // Called with the tape and the id of the record being differentiated;
  // reads that record's gradient and accumulates into its inputs.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  // With recording disabled only forward values are kept (inference).
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false);
  // Leaf referring to external storage; `value` must outlive the tape.
  Var borrow(const Tensor& value, bool requires_grad);

  // Appends an operation record. Non-finite outputs raise NumericFault naming `op`.
  Var record(const char* op, std::vector<std::size_t> inputs, Tensor value,
             BackwardFn backward);

  // Reverse sweep from a scalar loss (seed gradient 1). Clears earlier gradients.
  void backward(Var loss);

  const Tensor& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Tensor* grad(std::size_t id) const;
  // Gradient buffer of `id`, zero-allocated on first use.
  Tensor& grad_buffer(std::size_t id);
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }
  const char* op(std::size_t id) const { return nodes_[id].op; }

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    const char* op = "leaf";
    Tensor owned;
    const Tensor* borrowed = nullptr;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    std::optional<Tensor> grad;
  };

  bool recording_;
  std::vector<Node> nodes_;
};

}  // namespace bupo::numeric
