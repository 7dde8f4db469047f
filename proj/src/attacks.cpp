#include "advalign/attacks.hpp"

#include <cmath>
#include <mutex>
#include <unordered_map>

namespace advalign {

using json = nlohmann::json;

std::string to_string(Norm norm) { return norm == Norm::L2 ? "l2" : "linf"; }

Norm norm_from_string(const std::string& s) {
  if (s == "l2") return Norm::L2;
  if (s == "linf") return Norm::Linf;
  throw ValidationError("unknown attack norm '" + s + "'");
}

void validate(const AttackConfig& c) {
  if (!(c.epsilon >= 0.0) || !std::isfinite(c.epsilon))
    throw ValidationError("epsilon must be finite and nonnegative");
  if (c.steps < 1) throw ValidationError("attack steps must be at least 1");
  if (!(c.range.lo < c.range.hi)) throw ValidationError("pixel range needs lo < hi");
  if (c.step_size && !(*c.step_size > 0.0)) throw ValidationError("step size must be positive");
}

double resolved_step_size(const AttackConfig& c) {
  return c.step_size ? *c.step_size : 2.5 * c.epsilon / c.steps;
}

json to_json(const AttackConfig& c) {
  json j{{"norm", to_string(c.norm)},
         {"epsilon", c.epsilon},
         {"steps", c.steps},
         {"pixel_range", {c.range.lo, c.range.hi}},
         {"step_size", c.step_size ? json(*c.step_size) : json(nullptr)},
         {"step_rule", c.norm == Norm::L2 ? "normalized gradient" : "gradient sign"},
         {"projection", "ball"}};
  return j;
}

AttackConfig attack_config_from_json(const json& j) {
  AttackConfig c;
  if (j.contains("norm")) c.norm = norm_from_string(j.at("norm").get<std::string>());
  c.epsilon = j.value("epsilon", c.epsilon);
  c.steps = j.value("steps", c.steps);
  if (j.contains("pixel_range")) {
    c.range.lo = j.at("pixel_range").at(0).get<double>();
    c.range.hi = j.at("pixel_range").at(1).get<double>();
  }
  if (j.contains("step_size") && !j.at("step_size").is_null())
    c.step_size = j.at("step_size").get<double>();
  validate(c);
  return c;
}

Tensor project_l2(const Tensor& delta, double epsilon) {
  if (epsilon <= 0.0) return Tensor::zeros(delta.shape());
  const double n = l2_norm(delta);
  if (n <= epsilon) return delta;
  const double s = epsilon / n;
  std::vector<double> v(delta.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = delta[i] * s;
  Tensor out(delta.shape(), std::move(v));
  // Rounding can leave the rescaled norm a few ulps above epsilon.
  while (l2_norm(out) > epsilon)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::nextafter(out[i], 0.0);
  return out;
}

Tensor project_linf(const Tensor& delta, double epsilon) {
  if (epsilon <= 0.0) return Tensor::zeros(delta.shape());
  Tensor out = delta;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(out[i], -epsilon, epsilon);
  return out;
}

Tensor project(const Tensor& delta, Norm norm, double epsilon) {
  return norm == Norm::L2 ? project_l2(delta, epsilon) : project_linf(delta, epsilon);
}

Tensor clamp_pixels(const Tensor& image, PixelRange range) {
  if (!(range.lo < range.hi)) throw ValidationError("pixel range needs lo < hi");
  Tensor out = image;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(out[i], range.lo, range.hi);
  return out;
}

namespace {

// Batch-1 graph giving logits and the input gradient of an attack loss.
struct AttackGraph {
  Graph graph;
  NodeId logits;
  NodeId loss;
  NodeId grad;
};

enum class AttackLoss { CrossEntropy, CwMargin };

std::shared_ptr<const AttackGraph> attack_graph(const ArchSpec& arch, AttackLoss kind) {
  static std::mutex mu;
  static std::unordered_map<std::string, std::shared_ptr<const AttackGraph>> cache;
  const std::string key = to_json(arch).dump() + (kind == AttackLoss::CwMargin ? "#cw" : "#ce");
  std::lock_guard lock(mu);
  if (auto it = cache.find(key); it != cache.end()) return it->second;
  GraphBuilder b;
  auto x = b.input("x", {1, arch.height, arch.width, arch.in_channels});
  auto onehot = b.input("onehot", {1, arch.num_classes});
  auto logits = build_logits(b, arch, x);
  NodeId loss;
  if (kind == AttackLoss::CrossEntropy) {
    loss = b.softmax_cross_entropy(logits, onehot);
  } else {
    // Z_true - max over the other logits; the true logit is pushed far
    // below the rest before the max.
    auto z_true = b.sum_all(b.mul(logits, onehot));
    auto others = b.add(logits, b.scale(onehot, -1e30));
    auto z_other = b.reshape(b.reduce_max_last(others), {1});
    auto margin = b.sub(z_true, z_other);
    auto kappa = b.input("kappa", {1});
    loss = b.relu(b.add(margin, kappa));  // max(margin, -kappa) + kappa
  }
  NodeId xs[] = {x};
  auto grad = add_gradients(b, loss, xs)[0];
  auto g = std::make_shared<const AttackGraph>(AttackGraph{b.build(), logits, loss, grad});
  cache.emplace(key, g);
  return g;
}

Tensor onehot_tensor(int label, std::size_t classes) {
  if (label < 0 || static_cast<std::size_t>(label) >= classes)
    throw ValidationError("label " + std::to_string(label) + " out of range");
  std::vector<double> v(classes, 0.0);
  v[static_cast<std::size_t>(label)] = 1.0;
  return Tensor({1, classes}, std::move(v));
}

Tensor as_batch(const Model& m, const Image& img) {
  const auto& a = m.arch;
  if (img.shape() != Shape{a.height, a.width, a.in_channels})
    throw ShapeError("image shape " + shape_str(img.shape()) + " does not match model input");
  return img.reshaped({1, a.height, a.width, a.in_channels});
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

double attack_norm(const Tensor& t, Norm norm) { return norm == Norm::L2 ? l2_norm(t) : linf_norm(t); }

}  // namespace

AttackResult pgd_attack(const Model& model, const Image& image, int label, const AttackConfig& cfg,
                        const Tensor* init) {
  validate(cfg);
  auto ag = attack_graph(model.arch, AttackLoss::CrossEntropy);
  Bindings bind = model.params;
  bind.insert_or_assign("onehot", onehot_tensor(label, model.arch.num_classes));
  const Tensor x_batch = as_batch(model, image);
  const double alpha = resolved_step_size(cfg);

  // delta is kept as the effective (post-clamp) perturbation.
  Tensor delta = Tensor::zeros(image.shape());
  if (init) {
    if (init->shape() != image.shape()) throw ShapeError("warm-start perturbation shape mismatch");
    delta = sub(clamp_pixels(add(image, project(*init, cfg.norm, cfg.epsilon)), cfg.range), image);
  }

  AttackResult r;
  std::optional<std::pair<Tensor, int>> last_success;
  const std::vector<NodeId> outs{ag->logits, ag->grad};
  auto run = [&](const Tensor& d) {
    bind.insert_or_assign("x", add(x_batch, d.reshaped(x_batch.shape())));
    return evaluate(ag->graph, bind, outs);
  };

  int predicted = 0;
  for (int step = 0; step <= cfg.steps; ++step) {
    auto vals = run(delta);
    predicted = argmax(vals[0].data());
    if (predicted != label) last_success = {delta, predicted};
    if (step == cfg.steps) break;
    const Tensor& g = vals[1];
    Tensor next = delta;
    if (cfg.norm == Norm::L2) {
      const double gn = l2_norm(g);
      if (gn > 0.0)
        for (std::size_t i = 0; i < next.size(); ++i) next[i] += alpha * g[i] / gn;
    } else {
      for (std::size_t i = 0; i < next.size(); ++i)
        next[i] += alpha * (g[i] > 0.0 ? 1.0 : g[i] < 0.0 ? -1.0 : 0.0);
    }
    delta = sub(clamp_pixels(add(image, project(next, cfg.norm, cfg.epsilon)), cfg.range), image);
    r.step_norms.push_back(attack_norm(delta, cfg.norm));
    r.iterations = step + 1;
  }

  if (predicted == label && last_success) {
    delta = last_success->first;
    predicted = last_success->second;
  }
  r.success = predicted != label;
  r.predicted = predicted;
  r.adversarial = add(image, delta);
  r.l2_distortion = l2_norm(delta);
  r.delta = std::move(delta);
  return r;
}

void validate(const CwConfig& c) {
  if (!(c.c > 0.0)) throw ValidationError("CW constant c must be positive");
  if (c.steps < 1) throw ValidationError("CW steps must be at least 1");
  if (!(c.learning_rate > 0.0)) throw ValidationError("CW learning rate must be positive");
  if (c.kappa < 0.0) throw ValidationError("CW kappa must be nonnegative");
  if (!(c.range.lo < c.range.hi)) throw ValidationError("pixel range needs lo < hi");
}

json to_json(const CwConfig& c) {
  return json{{"c", c.c},
              {"steps", c.steps},
              {"learning_rate", c.learning_rate},
              {"kappa", c.kappa},
              {"pixel_range", {c.range.lo, c.range.hi}},
              {"optimizer", "adam"}};
}

CwConfig cw_config_from_json(const json& j) {
  CwConfig c;
  c.c = j.value("c", c.c);
  c.steps = j.value("steps", c.steps);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.kappa = j.value("kappa", c.kappa);
  if (j.contains("pixel_range")) {
    c.range.lo = j.at("pixel_range").at(0).get<double>();
    c.range.hi = j.at("pixel_range").at(1).get<double>();
  }
  validate(c);
  return c;
}

AttackResult cw_l2_attack(const Model& model, const Image& image, int label, const CwConfig& cfg) {
  validate(cfg);
  auto ag = attack_graph(model.arch, AttackLoss::CwMargin);
  const Tensor x_batch = as_batch(model, image);
  Bindings bind = model.params;
  bind.insert_or_assign("onehot", onehot_tensor(label, model.arch.num_classes));
  bind.insert_or_assign("kappa", Tensor({1}, {cfg.kappa}));

  const double lo = cfg.range.lo, half = 0.5 * (cfg.range.hi - cfg.range.lo);
  const std::size_t n = image.size();
  std::vector<double> w(n), m(n, 0.0), v(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = std::clamp((image[i] - lo) / half - 1.0, -1.0 + 1e-12, 1.0 - 1e-12);
    w[i] = std::atanh(u);
  }
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;

  AttackResult best;
  best.delta = Tensor::zeros(image.shape());
  best.adversarial = image;
  best.l2_distortion = std::numeric_limits<double>::infinity();
  const std::vector<NodeId> outs{ag->logits, ag->grad};
  std::vector<double> xadv(n), t(n);
  int last_pred = label;
  for (int step = 0; step <= cfg.steps; ++step) {
    for (std::size_t i = 0; i < n; ++i) {
      t[i] = std::tanh(w[i]);
      xadv[i] = std::clamp(lo + half * (t[i] + 1.0), cfg.range.lo, cfg.range.hi);
    }
    bind.insert_or_assign("x", Tensor(x_batch.shape(), xadv));
    auto vals = evaluate(ag->graph, bind, outs);
    const int pred = argmax(vals[0].data());
    last_pred = pred;
    double d2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) d2 += (xadv[i] - image[i]) * (xadv[i] - image[i]);
    if (pred != label && std::sqrt(d2) < best.l2_distortion) {
      best.l2_distortion = std::sqrt(d2);
      best.adversarial = Tensor(image.shape(), xadv);
      best.delta = sub(best.adversarial, image);
      best.success = true;
      best.predicted = pred;
    }
    best.iterations = step;
    if (step == cfg.steps) break;
    const double c1 = 1.0 - std::pow(b1, step + 1), c2 = 1.0 - std::pow(b2, step + 1);
    for (std::size_t i = 0; i < n; ++i) {
      const double gx = 2.0 * (xadv[i] - image[i]) + cfg.c * vals[1][i];
      const double gw = gx * half * (1.0 - t[i] * t[i]);
      m[i] = b1 * m[i] + (1.0 - b1) * gw;
      v[i] = b2 * v[i] + (1.0 - b2) * gw * gw;
      w[i] -= cfg.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
    best.step_norms.push_back(std::sqrt(d2));
  }
  if (!best.success) {
    best.l2_distortion = 0.0;
    best.predicted = last_pred;
  }
  return best;
}

}  // namespace advalign
