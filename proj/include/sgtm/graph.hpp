#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "sgtm/tensor.hpp"

namespace sgtm {

struct NodeId {
  std::uint32_t index = std::numeric_limits<std::uint32_t>::max();
  bool valid() const noexcept { return index != std::numeric_limits<std::uint32_t>::max(); }
  friend bool operator==(NodeId, NodeId) = default;
};

enum class GateMode {
  kForward,   // zero the gated columns in the value (and therefore in the gradient)
  kGradient,  // identity forward; zero the gated columns of the incoming gradient
};

// Define-by-run reverse-mode autodiff tape.
//
// Nodes are appended in evaluation order, so the node list is always
// topologically sorted and backward is a single reverse sweep. Gradients are
// only allocated for nodes that (transitively) depend on a leaf created with
// requires_grad = true.
//
// A Graph is single-threaded. Independent graphs share no state.
template <class T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  NodeId constant(Tensor<T> value) { return leaf(std::move(value), false); }
  NodeId leaf(Tensor<T> value, bool requires_grad = true);

  const Tensor<T>& value(NodeId id) const { return node(id).value; }
  // nullptr when the node carries no gradient.
  const Tensor<T>* grad(NodeId id) const;
  Tensor<T>* mutable_grad(NodeId id);
  bool requires_grad(NodeId id) const { return node(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // [m,k] x [k,n], or [m,k] x [n,k]^T when transpose_b.
  NodeId matmul(NodeId a, NodeId b, bool transpose_b = false);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, T factor);
  // x: [rows, n], bias: [n]
  NodeId add_bias(NodeId x, NodeId bias);
  // tanh approximation
  NodeId gelu(NodeId x);
  NodeId softmax(NodeId x, std::size_t axis);
  // Normalizes over the last axis; gain and bias have the last-axis length.
  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, T eps = T(1e-5));
  // Rows of table [vocab, d] selected by ids -> [ids.size(), d]
  NodeId embedding(NodeId table, std::span<const std::int32_t> ids);
  // Mean token cross entropy over rows whose target != ignore_index.
  NodeId cross_entropy(NodeId logits, std::span<const std::int32_t> targets,
                       std::int32_t ignore_index);
  // qkv: [batch*seq, 3*d] laid out as [Q heads | K heads | V heads];
  // returns [batch*seq, d] with head outputs concatenated head-major.
  NodeId causal_attention(NodeId qkv, std::size_t batch, std::size_t seq, std::size_t n_heads);
  // keep has one entry per column of x (last axis); 0 marks a gated column.
  NodeId column_gate(NodeId x, std::vector<std::uint8_t> keep, GateMode mode);
  NodeId sum(NodeId x);
  NodeId mean(NodeId x);

  // Populates gradients of every requires_grad node reachable from loss.
  // Gradients from an earlier call are discarded first.
  void backward(NodeId loss);

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::function<void()> backward;
  };

  Node& node(NodeId id);
  const Node& node(NodeId id) const;
  NodeId push(Tensor<T> value, bool requires_grad, std::function<void()> backward);
  bool needs_grad(std::initializer_list<NodeId> ids) const;
  // Gradient buffer of id, allocated (zeroed) on first use.
  Tensor<T>& grad_buffer(NodeId id);

  std::vector<Node> nodes_;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace sgtm
