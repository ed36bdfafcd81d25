#ifndef SPREFINE_AUTODIFF_TAPE_HPP
#define SPREFINE_AUTODIFF_TAPE_HPP

// Reverse-mode tape over small tensors (flat vectors of doubles).
//
// Every node owns its forward value, computed eagerly when the node is
// recorded. Nodes are appended in evaluation order, so insertion order is a
// topological order and the reverse sweep is a single backwards pass over the
// node list. Gradient buffers are allocated lazily and only for nodes that
// depend on a variable that requires a gradient.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <utility>
#include <vector>

#include "sprefine/error.hpp"

namespace sprefine::ad {

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  std::span<const double> value() const;
  std::size_t size() const;
  double scalar() const;
};

class Tape {
 public:
  /// Reads this node's output gradient and accumulates into its inputs.
  using Backward = std::function<void(Tape&, std::span<const double> out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var variable(std::vector<double> value, bool requires_grad = true) {
    return push(std::move(value), requires_grad, nullptr);
  }
  Var constant(std::vector<double> value) { return push(std::move(value), false, nullptr); }

  /// Appends an operation node. The backward function is dropped when no
  /// input requires a gradient.
  Var record(std::vector<double> value, std::initializer_list<Var> inputs, Backward backward) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || requires_grad(in);
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }
  Var record(std::vector<double> value, std::span<const Var> inputs, Backward backward) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || requires_grad(in);
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }

  std::span<const double> value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Gradient of the last backward() root with respect to v. Empty when v was
  /// not reached.
  std::span<const double> grad(Var v) const { return nodes_[v.id].grad; }

  /// Gradient accumulator of an input, allocated (zeroed) on first use.
  /// Returns an empty span for inputs that do not require a gradient.
  std::span<double> accumulator(Var v) {
    auto& n = nodes_[v.id];
    if (!n.requires_grad) return {};
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }

  /// Single reverse sweep from a scalar root, seeded with d(root) = seed.
  void backward(Var root, double seed = 1.0) {
    if (nodes_[root.id].value.size() != 1) throw InvalidInput("backward: root must be a scalar");
    for (auto& n : nodes_) n.grad.clear();
    if (!nodes_[root.id].requires_grad) return;
    nodes_[root.id].grad.assign(1, seed);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, n.grad);
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<double> value;
    std::vector<double> grad;
    Backward backward;
    bool requires_grad = false;
  };

  Var push(std::vector<double> value, bool requires_grad, Backward backward) {
    nodes_.push_back({std::move(value), {}, std::move(backward), requires_grad});
    return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
};

inline std::span<const double> Var::value() const { return tape->value(*this); }
inline std::size_t Var::size() const { return tape->value(*this).size(); }
inline double Var::scalar() const {
  const auto v = value();
  if (v.size() != 1) throw InvalidInput("Var::scalar on a non-scalar node");
  return v[0];
}

}  // namespace sprefine::ad

#endif
