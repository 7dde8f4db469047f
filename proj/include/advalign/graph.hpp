#pragma once

#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advalign/tensor.hpp"

namespace advalign {

using NodeId = std::size_t;
using Bindings = std::map<std::string, Tensor>;

// Primitive operations. Every op's vector-Jacobian product is itself
// expressed with ops from this list, so a gradient graph can be
// differentiated again.
enum class Op {
  Input,
  Parameter,
  Constant,
  Add,  // same-shape elementwise
  Sub,
  Mul,
  Scale,  // x * attrs.scalar
  Relu,
  Step,  // 1 where x > 0, else 0; zero gradient
  Abs,
  Sign,  // zero gradient
  Sqrt,
  InvSqrt,  // x^-1/2 with 0 -> 0
  MatMul,   // [m,k] x [k,n]
  Transpose,
  Conv2d,            // x [N,H,W,Ci], w [kh,kw,Ci,Co]
  Conv2dInputGrad,   // (g, w) -> x-shaped
  Conv2dFilterGrad,  // (x, g) -> w-shaped
  MaxReduce,         // pooled/reduced max, lowest index wins ties
  MaxScatter,        // (x, g): route g to the argmax positions of x
  MaxGather,         // (x, h): read h at the argmax positions of x
  AvgPool2d,
  AvgPool2dTranspose,
  Reshape,
  SumAll,      // -> [1]
  SumLast,     // drop the last axis
  ExpandLast,  // repeat along a new last axis (inverse shape rule of SumLast)
  BroadcastTo,  // x's shape is a suffix of the target, or x is [1]
  SumTo,        // reverse of BroadcastTo
  Softmax,      // along the last axis
  LogSoftmax,
  SoftmaxCrossEntropy,  // (logits [B,K], targets [B,K]) -> [1], batch mean
};

const char* op_name(Op op);

enum class MaxMode { Pool2d, LastAxis, All };

struct OpAttrs {
  double scalar = 0.0;
  std::size_t window_h = 0;
  std::size_t window_w = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  MaxMode max_mode = MaxMode::All;
  Shape shape;  // reshape/broadcast target, or the primal shape for transposed ops
};

struct Node {
  Op op;
  std::vector<NodeId> inputs;
  Shape shape;
  OpAttrs attrs;
  std::string name;  // leaves only
  std::shared_ptr<const Tensor> value;  // constants only
};

// Immutable, topologically ordered computation graph.
class Graph {
 public:
  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }

  std::optional<NodeId> find_leaf(const std::string& name) const;
  std::optional<NodeId> find_output(const std::string& name) const;
  const std::map<std::string, NodeId>& leaves() const noexcept { return leaves_; }
  const std::map<std::string, NodeId>& outputs() const noexcept { return outputs_; }
  std::vector<std::string> parameter_names() const;

 private:
  friend class GraphBuilder;
  std::vector<Node> nodes_;
  std::map<std::string, NodeId> leaves_;
  std::map<std::string, NodeId> outputs_;
};

class GraphBuilder {
 public:
  GraphBuilder() = default;
  explicit GraphBuilder(const Graph& base) : g_(base) {}

  NodeId input(const std::string& name, Shape shape);
  NodeId parameter(const std::string& name, Shape shape);
  NodeId constant(Tensor value);

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double c);
  NodeId relu(NodeId a);
  NodeId step(NodeId a);
  NodeId abs(NodeId a);
  NodeId sign(NodeId a);
  NodeId sqrt(NodeId a);
  NodeId inv_sqrt(NodeId a);
  NodeId matmul(NodeId a, NodeId b);
  NodeId transpose(NodeId a);
  NodeId conv2d(NodeId x, NodeId w, std::size_t stride, std::size_t padding);
  NodeId conv2d_input_grad(NodeId g, NodeId w, const Node& conv);
  NodeId conv2d_filter_grad(NodeId x, NodeId g, const Node& conv);
  NodeId max_pool2d(NodeId x, std::size_t window, std::size_t stride);
  NodeId reduce_max_last(NodeId x);
  NodeId reduce_max_all(NodeId x);
  NodeId max_scatter(NodeId x, NodeId g, const OpAttrs& attrs);
  NodeId max_gather(NodeId x, NodeId h, const OpAttrs& attrs);
  NodeId avg_pool2d(NodeId x, std::size_t window, std::size_t stride);
  NodeId avg_pool2d_transpose(NodeId g, const OpAttrs& attrs);
  NodeId reshape(NodeId a, Shape shape);
  NodeId sum_all(NodeId a);
  NodeId mean_all(NodeId a);
  NodeId sum_last(NodeId a);
  NodeId expand_last(NodeId a, Shape target);
  NodeId broadcast_to(NodeId a, Shape target);
  NodeId sum_to(NodeId a, Shape target);
  NodeId softmax(NodeId a);
  NodeId log_softmax(NodeId a);
  NodeId softmax_cross_entropy(NodeId logits, NodeId targets);

  void mark_output(const std::string& name, NodeId id);

  const Node& node(NodeId id) const { return g_.nodes_.at(id); }
  // By value: node storage moves as the builder grows.
  Shape shape(NodeId id) const { return node(id).shape; }
  std::size_t size() const noexcept { return g_.nodes_.size(); }
  const Graph& peek() const noexcept { return g_; }

  Graph build() const { return g_; }

 private:
  NodeId push(Node n);
  NodeId leaf(Op op, const std::string& name, Shape shape);
  Graph g_;
};

// Node values computed by one evaluation; nodes not needed for the
// requested outputs are left empty.
struct Evaluation {
  std::vector<std::optional<Tensor>> values;
  const Tensor& at(NodeId id) const;
};

Evaluation evaluate_nodes(const Graph& graph, const Bindings& bindings,
                          std::span<const NodeId> outputs);

// Evaluate every named output of the graph.
std::map<std::string, Tensor> evaluate(const Graph& graph, const Bindings& bindings);

std::vector<Tensor> evaluate(const Graph& graph, const Bindings& bindings,
                             std::span<const NodeId> outputs);

// Appends reverse-mode gradient nodes of the scalar `output` with respect to
// each node in `wrt` and returns their ids (same order). Leaves without a
// path to the output get a zero constant.
std::vector<NodeId> add_gradients(GraphBuilder& builder, NodeId output,
                                  std::span<const NodeId> wrt);

std::map<std::string, Tensor> gradients(const Graph& graph, const Bindings& bindings,
                                        NodeId scalar_output,
                                        const std::vector<std::string>& wrt);

struct FiniteDifferenceOptions {
  double step = 1e-5;
  // 0 checks every coordinate; otherwise a seeded subsample per leaf.
  std::size_t max_coords_per_leaf = 0;
  std::uint64_t seed = 0;
};

struct FiniteDifferenceReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // coordinates straddling a relu/abs/max kink
  bool subsampled = false;
  std::uint64_t seed = 0;
};

FiniteDifferenceReport finite_difference_check(const Graph& graph, const Bindings& bindings,
                                               NodeId scalar_output,
                                               const std::vector<std::string>& wrt,
                                               const FiniteDifferenceOptions& opts = {});

}  // namespace advalign
