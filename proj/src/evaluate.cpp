#include <algorithm>
#include <cmath>
#include <limits>

#include "advalign/errors.hpp"
#include "advalign/graph.hpp"
#include "kernels_detail.hpp"

namespace advalign {

namespace {

using Vec = std::vector<double>;

Tensor make(const Shape& s, Vec v) { return TensorAccess::make_unchecked(s, std::move(v)); }

std::size_t last_dim(const Shape& s) { return s.back(); }

}  // namespace

std::vector<std::size_t> detail::max_indices(const Tensor& x, const OpAttrs& at, const Shape& out) {
  const auto& s = x.shape();
  const auto xs = x.data();
  std::vector<std::size_t> idx(shape_size(out));
  switch (at.max_mode) {
    case MaxMode::All: {
      std::size_t best = 0;
      for (std::size_t i = 1; i < xs.size(); ++i)
        if (xs[i] > xs[best]) best = i;
      idx[0] = best;
      break;
    }
    case MaxMode::LastAxis: {
      const std::size_t n = last_dim(s);
      const std::size_t rows = xs.size() / n;
      for (std::size_t r = 0; r < rows; ++r) {
        std::size_t best = r * n;
        for (std::size_t j = 1; j < n; ++j)
          if (xs[r * n + j] > xs[best]) best = r * n + j;
        idx[r] = best;
      }
      break;
    }
    case MaxMode::Pool2d: {
      const std::size_t H = s[1], W = s[2], C = s[3];
      const std::size_t OH = out[1], OW = out[2];
      std::size_t o = 0;
      for (std::size_t n = 0; n < s[0]; ++n)
        for (std::size_t oh = 0; oh < OH; ++oh)
          for (std::size_t ow = 0; ow < OW; ++ow)
            for (std::size_t c = 0; c < C; ++c, ++o) {
              std::size_t best = std::numeric_limits<std::size_t>::max();
              for (std::size_t kh = 0; kh < at.window_h; ++kh)
                for (std::size_t kw = 0; kw < at.window_w; ++kw) {
                  std::size_t h = oh * at.stride + kh, w = ow * at.stride + kw;
                  std::size_t f = ((n * H + h) * W + w) * C + c;
                  if (best == std::numeric_limits<std::size_t>::max() || xs[f] > xs[best]) best = f;
                }
              idx[o] = best;
            }
      break;
    }
  }
  return idx;
}

namespace {

using detail::max_indices;

Tensor conv2d_fwd(const Tensor& x, const Tensor& w, const OpAttrs& at, const Shape& out) {
  const auto& sx = x.shape();
  const auto& sw = w.shape();
  const std::size_t N = sx[0], H = sx[1], W = sx[2], Ci = sx[3];
  const std::size_t KH = sw[0], KW = sw[1], Co = sw[3];
  const std::size_t OH = out[1], OW = out[2];
  const long pad = static_cast<long>(at.padding);
  const auto xd = x.data();
  const auto wd = w.data();
  Vec y(shape_size(out), 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t oh = 0; oh < OH; ++oh)
      for (std::size_t ow = 0; ow < OW; ++ow) {
        double* yo = &y[((n * OH + oh) * OW + ow) * Co];
        for (std::size_t kh = 0; kh < KH; ++kh) {
          long ih = static_cast<long>(oh * at.stride + kh) - pad;
          if (ih < 0 || ih >= static_cast<long>(H)) continue;
          for (std::size_t kw = 0; kw < KW; ++kw) {
            long iw = static_cast<long>(ow * at.stride + kw) - pad;
            if (iw < 0 || iw >= static_cast<long>(W)) continue;
            const double* xi = &xd[((n * H + ih) * W + iw) * Ci];
            const double* wk = &wd[(kh * KW + kw) * Ci * Co];
            for (std::size_t ci = 0; ci < Ci; ++ci) {
              const double xv = xi[ci];
              const double* wr = wk + ci * Co;
              for (std::size_t co = 0; co < Co; ++co) yo[co] += xv * wr[co];
            }
          }
        }
      }
  return make(out, std::move(y));
}

Tensor conv2d_input_grad(const Tensor& g, const Tensor& w, const OpAttrs& at) {
  const Shape& sx = at.shape;
  const auto& sg = g.shape();
  const auto& sw = w.shape();
  const std::size_t N = sx[0], H = sx[1], W = sx[2], Ci = sx[3];
  const std::size_t KH = sw[0], KW = sw[1], Co = sw[3];
  const std::size_t OH = sg[1], OW = sg[2];
  const long pad = static_cast<long>(at.padding);
  const auto gd = g.data();
  const auto wd = w.data();
  Vec gx(shape_size(sx), 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t oh = 0; oh < OH; ++oh)
      for (std::size_t ow = 0; ow < OW; ++ow) {
        const double* go = &gd[((n * OH + oh) * OW + ow) * Co];
        for (std::size_t kh = 0; kh < KH; ++kh) {
          long ih = static_cast<long>(oh * at.stride + kh) - pad;
          if (ih < 0 || ih >= static_cast<long>(H)) continue;
          for (std::size_t kw = 0; kw < KW; ++kw) {
            long iw = static_cast<long>(ow * at.stride + kw) - pad;
            if (iw < 0 || iw >= static_cast<long>(W)) continue;
            double* xi = &gx[((n * H + ih) * W + iw) * Ci];
            const double* wk = &wd[(kh * KW + kw) * Ci * Co];
            for (std::size_t ci = 0; ci < Ci; ++ci) {
              const double* wr = wk + ci * Co;
              double acc = 0.0;
              for (std::size_t co = 0; co < Co; ++co) acc += go[co] * wr[co];
              xi[ci] += acc;
            }
          }
        }
      }
  return make(sx, std::move(gx));
}

Tensor conv2d_filter_grad(const Tensor& x, const Tensor& g, const OpAttrs& at, const Shape& ws) {
  const auto& sx = x.shape();
  const auto& sg = g.shape();
  const std::size_t N = sx[0], H = sx[1], W = sx[2], Ci = sx[3];
  const std::size_t KH = ws[0], KW = ws[1], Co = ws[3];
  const std::size_t OH = sg[1], OW = sg[2];
  const long pad = static_cast<long>(at.padding);
  const auto xd = x.data();
  const auto gd = g.data();
  Vec gw(shape_size(ws), 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t oh = 0; oh < OH; ++oh)
      for (std::size_t ow = 0; ow < OW; ++ow) {
        const double* go = &gd[((n * OH + oh) * OW + ow) * Co];
        for (std::size_t kh = 0; kh < KH; ++kh) {
          long ih = static_cast<long>(oh * at.stride + kh) - pad;
          if (ih < 0 || ih >= static_cast<long>(H)) continue;
          for (std::size_t kw = 0; kw < KW; ++kw) {
            long iw = static_cast<long>(ow * at.stride + kw) - pad;
            if (iw < 0 || iw >= static_cast<long>(W)) continue;
            const double* xi = &xd[((n * H + ih) * W + iw) * Ci];
            double* wk = &gw[(kh * KW + kw) * Ci * Co];
            for (std::size_t ci = 0; ci < Ci; ++ci) {
              const double xv = xi[ci];
              double* wr = wk + ci * Co;
              for (std::size_t co = 0; co < Co; ++co) wr[co] += xv * go[co];
            }
          }
        }
      }
  return make(ws, std::move(gw));
}

Tensor avg_pool_fwd(const Tensor& x, const OpAttrs& at, const Shape& out) {
  const auto& s = x.shape();
  const std::size_t H = s[1], W = s[2], C = s[3];
  const double inv = 1.0 / static_cast<double>(at.window_h * at.window_w);
  const auto xd = x.data();
  Vec y(shape_size(out), 0.0);
  std::size_t o = 0;
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t oh = 0; oh < out[1]; ++oh)
      for (std::size_t ow = 0; ow < out[2]; ++ow)
        for (std::size_t c = 0; c < C; ++c, ++o) {
          double acc = 0.0;
          for (std::size_t kh = 0; kh < at.window_h; ++kh)
            for (std::size_t kw = 0; kw < at.window_w; ++kw)
              acc += xd[((n * H + oh * at.stride + kh) * W + ow * at.stride + kw) * C + c];
          y[o] = acc * inv;
        }
  return make(out, std::move(y));
}

Tensor avg_pool_transpose(const Tensor& g, const OpAttrs& at) {
  const Shape& s = at.shape;
  const auto& sg = g.shape();
  const std::size_t H = s[1], W = s[2], C = s[3];
  const double inv = 1.0 / static_cast<double>(at.window_h * at.window_w);
  const auto gd = g.data();
  Vec y(shape_size(s), 0.0);
  std::size_t o = 0;
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t oh = 0; oh < sg[1]; ++oh)
      for (std::size_t ow = 0; ow < sg[2]; ++ow)
        for (std::size_t c = 0; c < C; ++c, ++o)
          for (std::size_t kh = 0; kh < at.window_h; ++kh)
            for (std::size_t kw = 0; kw < at.window_w; ++kw)
              y[((n * H + oh * at.stride + kh) * W + ow * at.stride + kw) * C + c] += gd[o] * inv;
  return make(s, std::move(y));
}

Vec log_softmax_rows(std::span<const double> z, std::size_t k) {
  Vec out(z.size());
  for (std::size_t r = 0; r < z.size() / k; ++r) {
    const double* zr = &z[r * k];
    double m = zr[0];
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, zr[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(zr[j] - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = zr[j] - lse;
  }
  return out;
}

Tensor compute(const Node& node, const std::vector<const Tensor*>& in) {
  const Shape& out = node.shape;
  auto unary = [&](auto f) {
    const auto a = in[0]->data();
    Vec y(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) y[i] = f(a[i]);
    return make(out, std::move(y));
  };
  auto binary = [&](auto f) {
    const auto a = in[0]->data();
    const auto b = in[1]->data();
    Vec y(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) y[i] = f(a[i], b[i]);
    return make(out, std::move(y));
  };

  switch (node.op) {
    case Op::Input:
    case Op::Parameter:
    case Op::Constant:
      break;
    case Op::Add: return binary([](double a, double b) { return a + b; });
    case Op::Sub: return binary([](double a, double b) { return a - b; });
    case Op::Mul: return binary([](double a, double b) { return a * b; });
    case Op::Scale: {
      const double c = node.attrs.scalar;
      return unary([c](double a) { return a * c; });
    }
    case Op::Relu: return unary([](double a) { return a > 0.0 ? a : 0.0; });
    case Op::Step: return unary([](double a) { return a > 0.0 ? 1.0 : 0.0; });
    case Op::Abs: return unary([](double a) { return std::abs(a); });
    case Op::Sign:
      return unary([](double a) { return a > 0.0 ? 1.0 : (a < 0.0 ? -1.0 : 0.0); });
    case Op::Sqrt: return unary([](double a) { return std::sqrt(a); });
    case Op::InvSqrt: return unary([](double a) { return a == 0.0 ? 0.0 : 1.0 / std::sqrt(a); });
    case Op::MatMul: {
      const auto& sa = in[0]->shape();
      const std::size_t m = sa[0], k = sa[1], n = out[1];
      const auto a = in[0]->data();
      const auto b = in[1]->data();
      Vec y(m * n, 0.0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = a[i * k + p];
          const double* br = &b[p * n];
          double* yr = &y[i * n];
          for (std::size_t j = 0; j < n; ++j) yr[j] += av * br[j];
        }
      return make(out, std::move(y));
    }
    case Op::Transpose: {
      const auto& s = in[0]->shape();
      const auto a = in[0]->data();
      Vec y(a.size());
      for (std::size_t i = 0; i < s[0]; ++i)
        for (std::size_t j = 0; j < s[1]; ++j) y[j * s[0] + i] = a[i * s[1] + j];
      return make(out, std::move(y));
    }
    case Op::Conv2d: return conv2d_fwd(*in[0], *in[1], node.attrs, out);
    case Op::Conv2dInputGrad: return conv2d_input_grad(*in[0], *in[1], node.attrs);
    case Op::Conv2dFilterGrad: return conv2d_filter_grad(*in[0], *in[1], node.attrs, out);
    case Op::MaxReduce: {
      auto idx = max_indices(*in[0], node.attrs, out);
      const auto a = in[0]->data();
      Vec y(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) y[i] = a[idx[i]];
      return make(out, std::move(y));
    }
    case Op::MaxScatter: {
      auto idx = max_indices(*in[0], node.attrs, in[1]->shape());
      const auto g = in[1]->data();
      Vec y(in[0]->size(), 0.0);
      for (std::size_t i = 0; i < idx.size(); ++i) y[idx[i]] += g[i];
      return make(out, std::move(y));
    }
    case Op::MaxGather: {
      auto idx = max_indices(*in[0], node.attrs, out);
      const auto h = in[1]->data();
      Vec y(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) y[i] = h[idx[i]];
      return make(out, std::move(y));
    }
    case Op::AvgPool2d: return avg_pool_fwd(*in[0], node.attrs, out);
    case Op::AvgPool2dTranspose: return avg_pool_transpose(*in[0], node.attrs);
    case Op::Reshape: return make(out, in[0]->values());
    case Op::SumAll: {
      double s = 0.0;
      for (double v : in[0]->data()) s += v;
      return make(out, {s});
    }
    case Op::SumLast: {
      const std::size_t n = last_dim(in[0]->shape());
      const auto a = in[0]->data();
      Vec y(a.size() / n, 0.0);
      for (std::size_t r = 0; r < y.size(); ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += a[r * n + j];
        y[r] = s;
      }
      return make(out, std::move(y));
    }
    case Op::ExpandLast: {
      const std::size_t n = out.back();
      const auto a = in[0]->data();
      Vec y(shape_size(out));
      for (std::size_t r = 0; r < a.size(); ++r)
        for (std::size_t j = 0; j < n; ++j) y[r * n + j] = a[r];
      return make(out, std::move(y));
    }
    case Op::BroadcastTo: {
      const auto a = in[0]->data();
      Vec y(shape_size(out));
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i % a.size()];
      return make(out, std::move(y));
    }
    case Op::SumTo: {
      const auto g = in[0]->data();
      Vec y(shape_size(out), 0.0);
      for (std::size_t i = 0; i < g.size(); ++i) y[i % y.size()] += g[i];
      return make(out, std::move(y));
    }
    case Op::Softmax: {
      auto y = log_softmax_rows(in[0]->data(), last_dim(out));
      for (double& v : y) v = std::exp(v);
      return make(out, std::move(y));
    }
    case Op::LogSoftmax: return make(out, log_softmax_rows(in[0]->data(), last_dim(out)));
    case Op::SoftmaxCrossEntropy: {
      const auto& s = in[0]->shape();
      auto ls = log_softmax_rows(in[0]->data(), s[1]);
      const auto t = in[1]->data();
      double acc = 0.0;
      for (std::size_t i = 0; i < ls.size(); ++i) acc += t[i] * ls[i];
      return make(out, {-acc / static_cast<double>(s[0])});
    }
  }
  throw ValidationError(std::string("cannot evaluate op ") + op_name(node.op));
}

}  // namespace

const Tensor& Evaluation::at(NodeId id) const {
  if (id >= values.size() || !values[id]) throw ValidationError("node value not computed");
  return *values[id];
}

Evaluation evaluate_nodes(const Graph& graph, const Bindings& bindings,
                          std::span<const NodeId> outputs) {
  const auto& nodes = graph.nodes();
  std::vector<char> needed(nodes.size(), 0);
  for (auto o : outputs) {
    if (o >= nodes.size()) throw ValidationError("requested output is not a graph node");
    needed[o] = 1;
  }
  for (std::size_t i = nodes.size(); i-- > 0;)
    if (needed[i])
      for (auto in : nodes[i].inputs) needed[in] = 1;

  Evaluation ev;
  ev.values.resize(nodes.size());
  std::vector<const Tensor*> args;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (!needed[i]) continue;
    const Node& n = nodes[i];
    if (n.op == Op::Input || n.op == Op::Parameter) {
      auto it = bindings.find(n.name);
      if (it == bindings.end()) throw ValidationError("unbound leaf '" + n.name + "'");
      if (it->second.shape() != n.shape)
        throw ShapeError("binding '" + n.name + "' has shape " + shape_str(it->second.shape()) +
                         ", expected " + shape_str(n.shape));
      ev.values[i] = it->second;
      continue;
    }
    if (n.op == Op::Constant) {
      ev.values[i] = *n.value;
      continue;
    }
    args.clear();
    for (auto in : n.inputs) args.push_back(&*ev.values[in]);
    Tensor t = compute(n, args);
    if (!all_finite(t.data()))
      throw NonFiniteError(i, "node " + std::to_string(i) + " (" + op_name(n.op) +
                                  ") produced a non-finite value");
    ev.values[i] = std::move(t);
  }
  return ev;
}

std::vector<Tensor> evaluate(const Graph& graph, const Bindings& bindings,
                             std::span<const NodeId> outputs) {
  auto ev = evaluate_nodes(graph, bindings, outputs);
  std::vector<Tensor> out;
  out.reserve(outputs.size());
  for (auto o : outputs) out.push_back(*ev.values[o]);
  return out;
}

std::map<std::string, Tensor> evaluate(const Graph& graph, const Bindings& bindings) {
  std::vector<NodeId> ids;
  for (const auto& [name, id] : graph.outputs()) ids.push_back(id);
  auto ev = evaluate_nodes(graph, bindings, ids);
  std::map<std::string, Tensor> out;
  for (const auto& [name, id] : graph.outputs()) out.emplace(name, *ev.values[id]);
  return out;
}

}  // namespace advalign
