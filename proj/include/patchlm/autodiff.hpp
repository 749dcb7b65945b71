#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "patchlm/tensor.hpp"

namespace patchlm {

class Graph;

// Handle to a node of a Graph. Cheap to copy; only valid while its graph lives.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Append-only tape for reverse-mode differentiation.
///
/// Nodes are created in topological order, so backward() walks the tape once
/// from the root towards the leaves. Node values are never mutated after
/// creation; gradients are accumulated into a separate slot per node.
class Graph {
 public:
  // Called during backward with the graph and the node's own id. The node's
  // gradient is available through grad(); contributions go to parents via
  // accumulate().
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  Var parameter(Tensor value);

  // Generic node constructor used by every op (and by tests that need a
  // custom rule). A node requires grad iff any parent does.
  Var make_node(Tensor value, std::span<const Var> parents, BackwardFn backward);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  // Gradient of the last backward root w.r.t. v; zeros if v received none.
  Tensor grad(Var v) const;
  const Tensor& grad_ref(std::size_t id) const { return *nodes_.at(id).grad; }
  const Tensor& value_of(std::size_t id) const { return nodes_.at(id).value; }

  void accumulate(std::size_t id, const Tensor& g);
  void accumulate(std::size_t id, Tensor&& g);

  // Seeds d(root)/d(root) = 1; root must hold a single element.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::optional<Tensor> grad;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

enum class AttentionKernel {
  kReference,  // composed from matmul / masked softmax nodes
  kBlocked,    // tiled online-softmax forward, recomputing probabilities in backward
};

struct AttentionMask {
  bool causal = true;
  // Keys at index >= valid_length are padding. 0 means every key is valid.
  std::size_t valid_length = 0;

  bool allows(std::size_t query, std::size_t key) const {
    if (causal && key > query) return false;
    return valid_length == 0 || key < valid_length;
  }
};

namespace ops {

Var add(Var a, Var b);
Var add_bias(Var x, Var bias);  // x: n×d, bias: {d}
Var scale(Var x, double s);
Var sum(Var x);
Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);  // a·bᵀ
Var softmax_rows(Var x);
Var masked_softmax_rows(Var x, const AttentionMask& mask);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var relu_squared(Var x);
Var rope(Var x, std::span<const std::size_t> positions, double base = 10000.0);
Var gather_rows(Var table, std::span<const std::size_t> rows);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_cols(Var x, std::size_t start, std::size_t count);

// Scaled dot-product attention softmax(q·kᵀ/√d + mask)·v for one head.
Var attention(Var q, Var k, Var v, const AttentionMask& mask, AttentionKernel kernel,
              std::size_t block = 32);

// Σ_i weight_i · (−log softmax(logits_i)[target_i]), log-space with max subtraction.
Var cross_entropy(Var logits, std::span<const std::size_t> targets, std::span<const double> weights);

}  // namespace ops

// Graph-free forward of the rotary rotation, shared with property tests.
Tensor rope_apply(const Tensor& x, std::span<const std::size_t> positions, double base = 10000.0);

}  // namespace patchlm
