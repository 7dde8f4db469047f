#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "advalign/errors.hpp"
#include "advalign/graph.hpp"
#include "advalign/rng.hpp"
#include "kernels_detail.hpp"

namespace advalign {

namespace {

// Vector-Jacobian products expressed as graph ops. Returns one optional
// contribution per input of `node`.
std::vector<std::optional<NodeId>> vjp(GraphBuilder& b, NodeId id, NodeId g) {
  const Node n = b.node(id);  // copy: pushing nodes may reallocate
  const auto& in = n.inputs;
  switch (n.op) {
    case Op::Input:
    case Op::Parameter:
    case Op::Constant:
    case Op::Step:
    case Op::Sign:
      return std::vector<std::optional<NodeId>>(in.size());
    case Op::Add: return {g, g};
    case Op::Sub: return {g, b.scale(g, -1.0)};
    case Op::Mul: return {b.mul(g, in[1]), b.mul(g, in[0])};
    case Op::Scale: return {b.scale(g, n.attrs.scalar)};
    case Op::Relu: return {b.mul(g, b.step(in[0]))};
    case Op::Abs: return {b.mul(g, b.sign(in[0]))};
    case Op::Sqrt: return {b.mul(g, b.scale(b.inv_sqrt(in[0]), 0.5))};
    case Op::InvSqrt: {
      // d/dx x^-1/2 = -1/2 y^3, zero where y was defined as 0.
      auto cube = b.mul(id, b.mul(id, id));
      return {b.mul(g, b.scale(cube, -0.5))};
    }
    case Op::MatMul:
      return {b.matmul(g, b.transpose(in[1])), b.matmul(b.transpose(in[0]), g)};
    case Op::Transpose: return {b.transpose(g)};
    case Op::Conv2d:
      return {b.conv2d_input_grad(g, in[1], n), b.conv2d_filter_grad(in[0], g, n)};
    case Op::Conv2dInputGrad: {
      // n computes B_x^T(g0; w) for the bilinear conv B(x, w).
      auto as_fwd = b.conv2d(g, in[1], n.attrs.stride, n.attrs.padding);
      const Node conv = b.node(as_fwd);
      return {as_fwd, b.conv2d_filter_grad(g, in[0], conv)};
    }
    case Op::Conv2dFilterGrad: {
      auto fwd = b.conv2d(in[0], g, n.attrs.stride, n.attrs.padding);
      const Node conv = b.node(fwd);
      return {b.conv2d_input_grad(in[1], g, conv), fwd};
    }
    case Op::MaxReduce: return {b.max_scatter(in[0], g, n.attrs)};
    case Op::MaxScatter: return {std::nullopt, b.max_gather(in[0], g, n.attrs)};
    case Op::MaxGather: return {std::nullopt, b.max_scatter(in[0], g, n.attrs)};
    case Op::AvgPool2d: return {b.avg_pool2d_transpose(g, n.attrs)};
    case Op::AvgPool2dTranspose: return {b.avg_pool2d(g, n.attrs.window_h, n.attrs.stride)};
    case Op::Reshape: return {b.reshape(g, b.shape(in[0]))};
    case Op::SumAll: return {b.broadcast_to(g, b.shape(in[0]))};
    case Op::SumLast: return {b.expand_last(g, b.shape(in[0]))};
    case Op::ExpandLast: return {b.sum_last(g)};
    case Op::BroadcastTo: return {b.sum_to(g, b.shape(in[0]))};
    case Op::SumTo: return {b.broadcast_to(g, b.shape(in[0]))};
    case Op::Softmax: {
      auto dot = b.expand_last(b.sum_last(b.mul(g, id)), n.shape);
      return {b.mul(id, b.sub(g, dot))};
    }
    case Op::LogSoftmax: {
      auto total = b.expand_last(b.sum_last(g), n.shape);
      return {b.sub(g, b.mul(b.softmax(in[0]), total))};
    }
    case Op::SoftmaxCrossEntropy: {
      const Shape s = b.shape(in[0]);
      const double inv_b = -1.0 / static_cast<double>(s[0]);
      auto gb = b.broadcast_to(g, s);
      // cotangent flowing into log_softmax(z)
      auto h = b.scale(b.mul(gb, in[1]), inv_b);
      auto total = b.expand_last(b.sum_last(h), s);
      auto dz = b.sub(h, b.mul(b.softmax(in[0]), total));
      auto dt = b.scale(b.mul(gb, b.log_softmax(in[0])), inv_b);
      return {dz, dt};
    }
  }
  throw ValidationError(std::string("no gradient rule for ") + op_name(n.op));
}

}  // namespace

std::vector<NodeId> add_gradients(GraphBuilder& b, NodeId output, std::span<const NodeId> wrt) {
  if (output >= b.size()) throw ValidationError("unknown output node");
  if (b.shape(output) != Shape{1})
    throw ShapeError("gradient output must have shape [1], got " + shape_str(b.shape(output)));
  const std::size_t count = output + 1;

  // Only nodes that depend on some wrt node need adjoints.
  std::vector<char> depends(count, 0);
  for (auto w : wrt) {
    if (w >= b.size()) throw ValidationError("unknown wrt node");
    if (w < count) depends[w] = 1;
  }
  for (std::size_t i = 0; i < count; ++i)
    for (auto in : b.node(i).inputs)
      if (depends[in]) depends[i] = 1;

  std::vector<std::optional<NodeId>> adj(count);
  adj[output] = b.constant(Tensor::scalar(1.0));
  for (std::size_t i = count; i-- > 0;) {
    if (!adj[i] || !depends[i]) continue;
    const auto inputs = b.node(i).inputs;
    if (inputs.empty()) continue;
    auto contrib = vjp(b, i, *adj[i]);
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      const NodeId in = inputs[k];
      if (!contrib[k] || !depends[in]) continue;
      adj[in] = adj[in] ? b.add(*adj[in], *contrib[k]) : *contrib[k];
    }
  }

  std::vector<NodeId> result;
  result.reserve(wrt.size());
  for (auto w : wrt) {
    if (w < count && adj[w])
      result.push_back(*adj[w]);
    else
      result.push_back(b.constant(Tensor::zeros(b.shape(w))));
  }
  return result;
}

std::map<std::string, Tensor> gradients(const Graph& graph, const Bindings& bindings,
                                        NodeId scalar_output,
                                        const std::vector<std::string>& wrt) {
  GraphBuilder b(graph);
  std::vector<NodeId> leaves;
  for (const auto& name : wrt) {
    auto id = graph.find_leaf(name);
    if (!id) throw ValidationError("unknown leaf '" + name + "'");
    leaves.push_back(*id);
  }
  auto grads = add_gradients(b, scalar_output, leaves);
  auto values = evaluate(b.build(), bindings, grads);
  std::map<std::string, Tensor> out;
  for (std::size_t i = 0; i < wrt.size(); ++i) out.emplace(wrt[i], std::move(values[i]));
  return out;
}

namespace {

// Discrete state of every non-smooth node: which branch each relu/abs/max
// took. Two points with equal signatures lie in the same smooth piece.
std::vector<double> kink_signature(const Graph& graph, const Evaluation& ev) {
  std::vector<double> sig;
  for (std::size_t i = 0; i < graph.size(); ++i) {
    const Node& n = graph.node(i);
    if (!ev.values[i]) continue;
    switch (n.op) {
      case Op::Relu:
      case Op::Step:
      case Op::Abs:
      case Op::Sign:
      case Op::Sqrt:
      case Op::InvSqrt:
        for (double v : ev.at(n.inputs[0]).data())
          sig.push_back(v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0));
        break;
      case Op::MaxReduce:
      case Op::MaxScatter:
      case Op::MaxGather: {
        const Shape& pooled = n.op == Op::MaxScatter ? ev.at(n.inputs[1]).shape() : n.shape;
        for (auto k : detail::max_indices(ev.at(n.inputs[0]), n.attrs, pooled))
          sig.push_back(static_cast<double>(k));
        break;
      }
      default:
        break;
    }
  }
  return sig;
}

}  // namespace

FiniteDifferenceReport finite_difference_check(const Graph& graph, const Bindings& bindings,
                                               NodeId scalar_output,
                                               const std::vector<std::string>& wrt,
                                               const FiniteDifferenceOptions& opts) {
  if (!(opts.step > 0.0)) throw ValidationError("finite-difference step must be positive");
  auto analytic = gradients(graph, bindings, scalar_output, wrt);

  std::vector<NodeId> needed{scalar_output};

  auto probe = [&](const Bindings& bb) {
    auto ev = evaluate_nodes(graph, bb, needed);
    return std::make_pair(ev.at(scalar_output).item(), kink_signature(graph, ev));
  };

  FiniteDifferenceReport report;
  report.seed = opts.seed;
  Rng rng(opts.seed);
  const auto base_sig = probe(bindings).second;

  for (const auto& name : wrt) {
    const Tensor& grad = analytic.at(name);
    std::vector<std::size_t> coords(grad.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opts.max_coords_per_leaf > 0 && coords.size() > opts.max_coords_per_leaf) {
      rng.shuffle(coords);
      coords.resize(opts.max_coords_per_leaf);
      std::sort(coords.begin(), coords.end());
      report.subsampled = true;
    }
    Bindings shifted = bindings;
    Tensor& leaf = shifted.at(name);
    for (auto c : coords) {
      const double orig = leaf[c];
      leaf[c] = orig + opts.step;
      auto [fp, sp] = probe(shifted);
      leaf[c] = orig - opts.step;
      auto [fm, sm] = probe(shifted);
      leaf[c] = orig;
      if (sp != sm || sp != base_sig) {
        ++report.skipped;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * opts.step);
      const double a = grad[c];
      // Forward rounding (about nodes * eps * |f|) bounds how small a relative
      // error the quotient can resolve; gradients below 1e4 times that noise
      // are compared at the floor.
      const double noise = static_cast<double>(graph.size()) *
                           std::numeric_limits<double>::epsilon() *
                           (std::abs(fp) + std::abs(fm)) / (2.0 * opts.step);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e4 * noise, 1e-12});
      report.max_rel_error = std::max(report.max_rel_error, std::abs(a - numeric) / denom);
      ++report.checked;
    }
  }
  return report;
}

}  // namespace advalign
