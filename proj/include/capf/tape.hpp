#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "capf/tensor.hpp"

namespace capf {

// Reverse-mode tape. Nodes are appended in execution order; backward()
// replays them once in reverse, pulling the adjoint of each output into
// its inputs. Gradients are materialized lazily, so leaves created with
// needs_grad = false never allocate one. A tape is confined to a single
// logical thread.
class Tape {
 public:
  // The vjp receives the tape and the node's own id, reads the node's
  // gradient, and accumulates into its inputs' gradient buffers.
  using Vjp = std::function<void(Tape&, int)>;

  struct Node {
    Tensor value;
    Tensor grad;  // empty until first accumulation
    bool needs_grad = false;
    Vjp vjp;  // empty for leaves
  };

  int add(Tensor value, bool needs_grad, Vjp vjp) {
#ifdef CAPF_STRICT_FINITE
    require_finite(value, "tape node");
#endif
    nodes_.push_back(Node{std::move(value), Tensor(), needs_grad, std::move(vjp)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  // Gradient of a node; zeros if the node never received an adjoint.
  Tensor grad_or_zeros(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.grad.empty() ? Tensor::zeros(n.value.shape()) : n.grad;
  }

  // Accumulation buffer for a node that participates in backward.
  Tensor& grad_buffer(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
    return n.grad;
  }

  bool has_grad(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }

  // Reverse sweep from a scalar output. Each recorded operation is visited
  // exactly once; operations whose output never received an adjoint are
  // skipped (their contribution is identically zero).
  void backward(int output_id) {
    Node& out = nodes_[static_cast<std::size_t>(output_id)];
    if (!out.value.is_scalar())
      throw ShapeError("backward: output must be scalar, got " + out.value.shape_str());
    grad_buffer(output_id)[0] = 1.0;
    for (int i = output_id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.vjp && n.needs_grad && !n.grad.empty()) n.vjp(*this, i);
    }
  }

  void reset() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

// Handle to a tape node. Cheap to copy; valid until the tape is reset.
struct Value {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& val() const { return tape->value(id); }
  bool needs_grad() const { return tape->needs_grad(id); }
  Tensor grad() const { return tape->grad_or_zeros(id); }
};

inline Value make_leaf(Tape& t, Tensor v, bool needs_grad) {
  int id = t.add(std::move(v), needs_grad, nullptr);
  return Value{&t, id};
}

inline Value make_constant(Tape& t, Tensor v) { return make_leaf(t, std::move(v), false); }

}  // namespace capf
