// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "qlip/tensor.hpp"

namespace qlip {

using TensorMap = std::map<std::string, Tensor, std::less<>>;
// Non-owning name -> tensor bindings for one evaluation.
using Feed = std::map<std::string, const Tensor*, std::less<>>;

enum class Op {
  Input,
  Param,
  MatMul,
  AddBias,
  Add,
  Sub,
  Scale,
  Gelu,
  Softmax,
  Attention,
  LayerNorm,
  SumAll,
  MeanAll,
  CosineSimilarity,
  L2Norm,
  MeanAbs,
  MeanSquare,
  Fourier,
  ConcatRows,
  SliceRows,
};

std::string_view op_name(Op op);

struct NodeId {
  std::size_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

class GraphError : public std::runtime_error {
 public:
  GraphError(std::size_t node, Op op, const std::string& what);
  std::size_t node() const { return node_; }
  Op op() const { return op_; }

 private:
  std::size_t node_;
  Op op_;
};

/// A fixed-topology computation graph over rank-2 tensors.
///
/// Nodes are appended in topological order; shapes are inferred at
/// construction so a malformed graph is rejected before it is ever run.
/// Parameters are deduplicated by name, which is how two sub-graphs share
/// weights (for example the two encoder passes of a similarity gradient).
class Graph {
 public:
  struct Node {
    Op op;
    std::vector<std::size_t> inputs;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::string name;         // Input / Param
    bool trainable = false;   // Param: receives a gradient; Input: designated for a gradient
    bool needs_grad = false;  // derived: depends on a trainable source
    double scalar = 0.0;      // Scale factor
    std::size_t arg0 = 0;     // SliceRows begin / Attention heads
    std::size_t arg1 = 0;     // SliceRows end
  };

  NodeId input(std::string name, std::size_t rows, std::size_t cols, bool requires_grad = false);
  NodeId param(std::string name, std::size_t rows, std::size_t cols, bool trainable = true);

  NodeId matmul(NodeId a, NodeId w);
  NodeId add_bias(NodeId a, NodeId bias);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);
  NodeId gelu(NodeId a);
  NodeId softmax(NodeId a);
  // Multi-head scaled dot-product attention; queries and keys/values may
  // have different row counts.
  NodeId attention(NodeId q, NodeId k, NodeId v, std::size_t heads);
  NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta);
  NodeId sum(NodeId a);
  NodeId mean(NodeId a);
  NodeId cosine_similarity(NodeId a, NodeId b);
  NodeId l2_norm(NodeId a);
  NodeId mean_abs(NodeId a);
  NodeId mean_square(NodeId a);
  // [sin(2*pi*c*F), cos(2*pi*c*F)] for coordinates c (n x 2) and frequencies F (2 x f).
  NodeId fourier(NodeId coords, NodeId freqs);
  NodeId concat_rows(NodeId a, NodeId b);
  NodeId slice_rows(NodeId a, std::size_t begin, std::size_t end);

  void mark_output(std::string name, NodeId node);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(id.index); }
  const std::vector<Node>& nodes() const { return nodes_; }
  const std::map<std::string, NodeId, std::less<>>& outputs() const { return outputs_; }
  std::vector<std::string> parameter_names() const;
  std::vector<std::string> input_names() const;
  NodeId find(std::string_view name) const;

 private:
  NodeId push(Node n);
  const Node& checked(NodeId id, Op consumer) const;

  std::vector<Node> nodes_;
  std::map<std::string, NodeId, std::less<>> sources_;
  std::map<std::string, NodeId, std::less<>> outputs_;
};

enum class Retain { All, ValuesOnly };

struct Gradients;

class Evaluation {
 public:
  const Tensor& value(NodeId id) const { return values_.at(id.index); }
  const Tensor& output(std::string_view name) const;
  TensorMap outputs() const;

 private:
  friend Evaluation forward(const Graph&, const Feed&, Retain);
  friend Gradients backward(const Graph&, const Evaluation&, NodeId, std::span<const NodeId>);
  const Graph* graph_ = nullptr;
  std::vector<Tensor> values_;
  std::vector<Tensor> saved_;  // per-node data kept for the backward pass
  bool retained_ = true;
};

struct Gradients {
  TensorMap params;                  // every trainable parameter (zeros if unreachable)
  TensorMap inputs;                  // every input declared with requires_grad
  std::map<std::size_t, Tensor> watched;
  const Tensor& at(NodeId id) const { return watched.at(id.index); }
};

/// Evaluates every node in order. Identical feeds give bit-identical values.
/// `Retain::ValuesOnly` skips the attention probabilities needed by
/// `backward`, which keeps large forward-only passes small.
Evaluation forward(const Graph& graph, const Feed& feed, Retain retain = Retain::All);
Evaluation forward(const Graph& graph, const TensorMap& feed, Retain retain = Retain::All);

/// Reverse-mode pass from a scalar node. `watch` lists extra nodes whose
/// gradients should be returned; a watched node that does not depend on any
/// trainable source reports zeros.
Gradients backward(const Graph& graph, const Evaluation& eval, NodeId loss,
                   std::span<const NodeId> watch = {});

Feed make_feed(const TensorMap& tensors);

}  // namespace qlip
