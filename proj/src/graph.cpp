#include "advalign/graph.hpp"

#include <algorithm>

#include "advalign/errors.hpp"

namespace advalign {

const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Parameter: return "parameter";
    case Op::Constant: return "constant";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::Relu: return "relu";
    case Op::Step: return "step";
    case Op::Abs: return "abs";
    case Op::Sign: return "sign";
    case Op::Sqrt: return "sqrt";
    case Op::InvSqrt: return "inv_sqrt";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Conv2d: return "conv2d";
    case Op::Conv2dInputGrad: return "conv2d_input_grad";
    case Op::Conv2dFilterGrad: return "conv2d_filter_grad";
    case Op::MaxReduce: return "max_reduce";
    case Op::MaxScatter: return "max_scatter";
    case Op::MaxGather: return "max_gather";
    case Op::AvgPool2d: return "avg_pool2d";
    case Op::AvgPool2dTranspose: return "avg_pool2d_transpose";
    case Op::Reshape: return "reshape";
    case Op::SumAll: return "sum_all";
    case Op::SumLast: return "sum_last";
    case Op::ExpandLast: return "expand_last";
    case Op::BroadcastTo: return "broadcast_to";
    case Op::SumTo: return "sum_to";
    case Op::Softmax: return "softmax";
    case Op::LogSoftmax: return "log_softmax";
    case Op::SoftmaxCrossEntropy: return "softmax_cross_entropy";
  }
  return "?";
}

std::optional<NodeId> Graph::find_leaf(const std::string& name) const {
  auto it = leaves_.find(name);
  if (it == leaves_.end()) return std::nullopt;
  return it->second;
}

std::optional<NodeId> Graph::find_output(const std::string& name) const {
  auto it = outputs_.find(name);
  if (it == outputs_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::string> Graph::parameter_names() const {
  std::vector<std::string> names;
  for (const auto& n : nodes_)
    if (n.op == Op::Parameter) names.push_back(n.name);
  return names;
}

namespace {

[[noreturn]] void shape_fail(Op op, const std::string& msg) {
  throw ShapeError(std::string(op_name(op)) + ": " + msg);
}

Shape drop_last(const Shape& s) {
  if (s.size() <= 1) return {1};
  return Shape(s.begin(), s.end() - 1);
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

std::size_t pooled(std::size_t n, std::size_t window, std::size_t stride) {
  return (n - window) / stride + 1;
}

}  // namespace

NodeId GraphBuilder::push(Node n) {
  for (auto in : n.inputs)
    if (in >= g_.nodes_.size()) throw ValidationError("graph input refers to a later node");
  g_.nodes_.push_back(std::move(n));
  return g_.nodes_.size() - 1;
}

NodeId GraphBuilder::leaf(Op op, const std::string& name, Shape shape) {
  if (name.empty()) throw ValidationError("leaf name must be non-empty");
  if (g_.leaves_.count(name)) throw ValidationError("duplicate leaf name '" + name + "'");
  if (shape.empty() || shape_size(shape) == 0) shape_fail(op, "invalid leaf shape");
  Node n{op, {}, std::move(shape), {}, name, nullptr};
  auto id = push(std::move(n));
  g_.leaves_[name] = id;
  return id;
}

NodeId GraphBuilder::input(const std::string& name, Shape shape) {
  return leaf(Op::Input, name, std::move(shape));
}

NodeId GraphBuilder::parameter(const std::string& name, Shape shape) {
  return leaf(Op::Parameter, name, std::move(shape));
}

NodeId GraphBuilder::constant(Tensor value) {
  Shape s = value.shape();
  return push(Node{Op::Constant, {}, std::move(s), {}, {},
                   std::make_shared<const Tensor>(std::move(value))});
}

#define ADVALIGN_SAME_SHAPE(fn, OPK)                                                 \
  NodeId GraphBuilder::fn(NodeId a, NodeId b) {                                      \
    if (shape(a) != shape(b))                                                        \
      shape_fail(OPK, "operand shapes differ " + shape_str(shape(a)) + " vs " +      \
                          shape_str(shape(b)));                                      \
    return push(Node{OPK, {a, b}, shape(a), {}, {}, nullptr});                       \
  }

ADVALIGN_SAME_SHAPE(add, Op::Add)
ADVALIGN_SAME_SHAPE(sub, Op::Sub)
ADVALIGN_SAME_SHAPE(mul, Op::Mul)
#undef ADVALIGN_SAME_SHAPE

NodeId GraphBuilder::scale(NodeId a, double c) {
  OpAttrs at;
  at.scalar = c;
  return push(Node{Op::Scale, {a}, shape(a), at, {}, nullptr});
}

#define ADVALIGN_UNARY(fn, OPK) \
  NodeId GraphBuilder::fn(NodeId a) { return push(Node{OPK, {a}, shape(a), {}, {}, nullptr}); }

ADVALIGN_UNARY(relu, Op::Relu)
ADVALIGN_UNARY(step, Op::Step)
ADVALIGN_UNARY(abs, Op::Abs)
ADVALIGN_UNARY(sign, Op::Sign)
ADVALIGN_UNARY(sqrt, Op::Sqrt)
ADVALIGN_UNARY(inv_sqrt, Op::InvSqrt)
ADVALIGN_UNARY(softmax, Op::Softmax)
ADVALIGN_UNARY(log_softmax, Op::LogSoftmax)
#undef ADVALIGN_UNARY

NodeId GraphBuilder::matmul(NodeId a, NodeId b) {
  const auto& sa = shape(a);
  const auto& sb = shape(b);
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    shape_fail(Op::MatMul, "incompatible " + shape_str(sa) + " x " + shape_str(sb));
  return push(Node{Op::MatMul, {a, b}, {sa[0], sb[1]}, {}, {}, nullptr});
}

NodeId GraphBuilder::transpose(NodeId a) {
  const auto& s = shape(a);
  if (s.size() != 2) shape_fail(Op::Transpose, "expects rank 2, got " + shape_str(s));
  return push(Node{Op::Transpose, {a}, {s[1], s[0]}, {}, {}, nullptr});
}

NodeId GraphBuilder::conv2d(NodeId x, NodeId w, std::size_t stride, std::size_t padding) {
  const auto& sx = shape(x);
  const auto& sw = shape(w);
  if (sx.size() != 4 || sw.size() != 4)
    shape_fail(Op::Conv2d, "expects x [N,H,W,C] and w [kh,kw,Ci,Co]");
  if (sx[3] != sw[2])
    shape_fail(Op::Conv2d, "channel mismatch " + shape_str(sx) + " vs " + shape_str(sw));
  if (stride == 0) shape_fail(Op::Conv2d, "stride must be positive");
  if (sx[1] + 2 * padding < sw[0] || sx[2] + 2 * padding < sw[1])
    shape_fail(Op::Conv2d, "kernel larger than padded input");
  OpAttrs at;
  at.window_h = sw[0];
  at.window_w = sw[1];
  at.stride = stride;
  at.padding = padding;
  at.shape = sx;
  Shape out{sx[0], (sx[1] + 2 * padding - sw[0]) / stride + 1,
            (sx[2] + 2 * padding - sw[1]) / stride + 1, sw[3]};
  return push(Node{Op::Conv2d, {x, w}, out, at, {}, nullptr});
}

NodeId GraphBuilder::conv2d_input_grad(NodeId g, NodeId w, const Node& conv) {
  if (shape(w)[0] != conv.attrs.window_h || shape(w)[1] != conv.attrs.window_w)
    shape_fail(Op::Conv2dInputGrad, "filter geometry mismatch");
  return push(Node{Op::Conv2dInputGrad, {g, w}, conv.attrs.shape, conv.attrs, {}, nullptr});
}

NodeId GraphBuilder::conv2d_filter_grad(NodeId x, NodeId g, const Node& conv) {
  Shape ws{conv.attrs.window_h, conv.attrs.window_w, shape(x)[3], shape(g)[3]};
  return push(Node{Op::Conv2dFilterGrad, {x, g}, ws, conv.attrs, {}, nullptr});
}

static Shape max_output_shape(const Shape& s, const OpAttrs& at) {
  switch (at.max_mode) {
    case MaxMode::All: return {1};
    case MaxMode::LastAxis: return drop_last(s);
    case MaxMode::Pool2d:
      return {s[0], pooled(s[1], at.window_h, at.stride), pooled(s[2], at.window_w, at.stride),
              s[3]};
  }
  return {1};
}

NodeId GraphBuilder::max_pool2d(NodeId x, std::size_t window, std::size_t stride) {
  const auto& s = shape(x);
  if (s.size() != 4) shape_fail(Op::MaxReduce, "pool2d expects [N,H,W,C]");
  if (window == 0 || stride == 0 || window > s[1] || window > s[2])
    shape_fail(Op::MaxReduce, "invalid pooling window");
  OpAttrs at;
  at.max_mode = MaxMode::Pool2d;
  at.window_h = at.window_w = window;
  at.stride = stride;
  return push(Node{Op::MaxReduce, {x}, max_output_shape(s, at), at, {}, nullptr});
}

NodeId GraphBuilder::reduce_max_last(NodeId x) {
  OpAttrs at;
  at.max_mode = MaxMode::LastAxis;
  return push(Node{Op::MaxReduce, {x}, max_output_shape(shape(x), at), at, {}, nullptr});
}

NodeId GraphBuilder::reduce_max_all(NodeId x) {
  OpAttrs at;
  at.max_mode = MaxMode::All;
  return push(Node{Op::MaxReduce, {x}, {1}, at, {}, nullptr});
}

NodeId GraphBuilder::max_scatter(NodeId x, NodeId g, const OpAttrs& at) {
  if (shape(g) != max_output_shape(shape(x), at))
    shape_fail(Op::MaxScatter, "cotangent shape mismatch");
  return push(Node{Op::MaxScatter, {x, g}, shape(x), at, {}, nullptr});
}

NodeId GraphBuilder::max_gather(NodeId x, NodeId h, const OpAttrs& at) {
  if (shape(h) != shape(x)) shape_fail(Op::MaxGather, "operand shape mismatch");
  return push(Node{Op::MaxGather, {x, h}, max_output_shape(shape(x), at), at, {}, nullptr});
}

NodeId GraphBuilder::avg_pool2d(NodeId x, std::size_t window, std::size_t stride) {
  const auto& s = shape(x);
  if (s.size() != 4) shape_fail(Op::AvgPool2d, "expects [N,H,W,C]");
  if (window == 0 || stride == 0 || window > s[1] || window > s[2])
    shape_fail(Op::AvgPool2d, "invalid pooling window");
  OpAttrs at;
  at.window_h = at.window_w = window;
  at.stride = stride;
  at.shape = s;
  Shape out{s[0], pooled(s[1], window, stride), pooled(s[2], window, stride), s[3]};
  return push(Node{Op::AvgPool2d, {x}, out, at, {}, nullptr});
}

NodeId GraphBuilder::avg_pool2d_transpose(NodeId g, const OpAttrs& at) {
  return push(Node{Op::AvgPool2dTranspose, {g}, at.shape, at, {}, nullptr});
}

NodeId GraphBuilder::reshape(NodeId a, Shape target) {
  if (target.empty() || shape_size(target) != shape_size(shape(a)))
    shape_fail(Op::Reshape, "cannot reshape " + shape_str(shape(a)) + " to " + shape_str(target));
  OpAttrs at;
  at.shape = target;
  return push(Node{Op::Reshape, {a}, std::move(target), at, {}, nullptr});
}

NodeId GraphBuilder::sum_all(NodeId a) { return push(Node{Op::SumAll, {a}, {1}, {}, {}, nullptr}); }

NodeId GraphBuilder::mean_all(NodeId a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(shape_size(shape(a))));
}

NodeId GraphBuilder::sum_last(NodeId a) {
  return push(Node{Op::SumLast, {a}, drop_last(shape(a)), {}, {}, nullptr});
}

NodeId GraphBuilder::expand_last(NodeId a, Shape target) {
  if (drop_last(target) != shape(a))
    shape_fail(Op::ExpandLast, shape_str(shape(a)) + " does not expand to " + shape_str(target));
  OpAttrs at;
  at.shape = target;
  return push(Node{Op::ExpandLast, {a}, std::move(target), at, {}, nullptr});
}

NodeId GraphBuilder::broadcast_to(NodeId a, Shape target) {
  const auto& s = shape(a);
  if (!(s == Shape{1} || is_suffix(s, target)))
    shape_fail(Op::BroadcastTo, shape_str(s) + " does not broadcast to " + shape_str(target));
  OpAttrs at;
  at.shape = target;
  return push(Node{Op::BroadcastTo, {a}, std::move(target), at, {}, nullptr});
}

NodeId GraphBuilder::sum_to(NodeId a, Shape target) {
  const auto& s = shape(a);
  if (!(target == Shape{1} || is_suffix(target, s)))
    shape_fail(Op::SumTo, shape_str(s) + " does not sum to " + shape_str(target));
  OpAttrs at;
  at.shape = target;
  return push(Node{Op::SumTo, {a}, std::move(target), at, {}, nullptr});
}

NodeId GraphBuilder::softmax_cross_entropy(NodeId logits, NodeId targets) {
  const auto& s = shape(logits);
  if (s.size() != 2) shape_fail(Op::SoftmaxCrossEntropy, "logits must be [B,K]");
  if (shape(targets) != s) shape_fail(Op::SoftmaxCrossEntropy, "targets must match logits");
  return push(Node{Op::SoftmaxCrossEntropy, {logits, targets}, {1}, {}, {}, nullptr});
}

void GraphBuilder::mark_output(const std::string& name, NodeId id) {
  if (id >= size()) throw ValidationError("output refers to unknown node");
  g_.outputs_[name] = id;
}

}  // namespace advalign
