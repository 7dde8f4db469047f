#include "advalign/harmonizer.hpp"

#include <array>
#include <cmath>
#include <mutex>
#include <unordered_map>

namespace advalign {

using json = nlohmann::json;

void validate(const HarmonizerConfig& c) {
  if (!(c.lambda1 >= 0.0)) throw ValidationError("lambda1 must be nonnegative");
  if (c.levels < 1) throw ValidationError("pyramid depth must be at least 1");
  if (!(c.variance_floor >= 0.0)) throw ValidationError("variance floor must be nonnegative");
  validate(c.train);
}

json to_json(const HarmonizerConfig& c) {
  return json{{"lambda1", c.lambda1},
              {"lambda2", c.train.weight_decay},
              {"levels", c.levels},
              {"distance", c.squared_distance ? "squared-l2" : "l2"},
              {"variance_floor", c.variance_floor},
              {"train", to_json(c.train)}};
}

HarmonizerConfig harmonizer_config_from_json(const json& j) {
  HarmonizerConfig c;
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  c.lambda1 = j.value("lambda1", c.lambda1);
  if (j.contains("lambda2")) c.train.weight_decay = j.at("lambda2").get<double>();
  c.levels = j.value("levels", c.levels);
  c.variance_floor = j.value("variance_floor", c.variance_floor);
  if (j.contains("distance")) {
    const auto d = j.at("distance").get<std::string>();
    if (d != "l2" && d != "squared-l2") throw ValidationError("unknown distance '" + d + "'");
    c.squared_distance = d == "squared-l2";
  }
  validate(c);
  return c;
}

namespace {
constexpr std::array<LambdaPreset, 14> kPresets{{
    {"vgg16", 2},         {"resnet50", 2},      {"efficientnet-b0", 20}, {"vit-b16", 5},
    {"convnext-tiny-v1", 1}, {"convnext-tiny-v2", 2}, {"convnext-tiny-v3", 3},
    {"convnext-tiny-v4", 5}, {"convnext-tiny-v5", 8}, {"convnext-tiny-v6", 10},
    {"maxvit-tiny-v1", 1},   {"maxvit-tiny-v2", 2},   {"maxvit-tiny-v3", 5},
    {"maxvit-tiny-v4", 10},
}};
}  // namespace

std::span<const LambdaPreset> lambda_presets() { return kPresets; }

double preset_lambda(const std::string& name) {
  for (const auto& p : kPresets)
    if (name == p.name) return p.lambda;
  throw ValidationError("unknown lambda preset '" + name + "'");
}

NodeId build_saliency(GraphBuilder& b, NodeId x, NodeId logits, NodeId onehot) {
  const Shape s = b.shape(x);
  auto score = b.sum_all(b.mul(logits, onehot));
  NodeId wrt[] = {x};
  auto gx = add_gradients(b, score, wrt)[0];
  auto sal = b.reduce_max_last(b.abs(gx));  // [B,H,W]
  return b.reshape(sal, {s[0], s[1] * s[2]});
}

ImportanceMap saliency_map(const Model& model, const Image& image, int label) {
  const auto& a = model.arch;
  if (image.shape() != Shape{a.height, a.width, a.in_channels})
    throw ShapeError("image shape " + shape_str(image.shape()) + " does not match model input");
  if (label < 0 || static_cast<std::size_t>(label) >= a.num_classes)
    throw ValidationError("label out of range");
  struct SaliencyGraph {
    Graph graph;
    NodeId out;
  };
  static std::mutex mu;
  static std::unordered_map<std::string, std::shared_ptr<const SaliencyGraph>> cache;
  std::shared_ptr<const SaliencyGraph> sg;
  {
    std::lock_guard lock(mu);
    const auto key = to_json(a).dump();
    auto it = cache.find(key);
    if (it == cache.end()) {
      GraphBuilder b;
      auto x = b.input("x", {1, a.height, a.width, a.in_channels});
      auto onehot = b.input("onehot", {1, a.num_classes});
      auto out = build_saliency(b, x, build_logits(b, a, x), onehot);
      it = cache.emplace(key, std::make_shared<const SaliencyGraph>(SaliencyGraph{b.build(), out}))
               .first;
    }
    sg = it->second;
  }
  Bindings bind = model.params;
  bind.insert_or_assign("x", image.reshaped({1, a.height, a.width, a.in_channels}));
  std::vector<double> oh(a.num_classes, 0.0);
  oh[static_cast<std::size_t>(label)] = 1.0;
  bind.insert_or_assign("onehot", Tensor({1, a.num_classes}, std::move(oh)));
  NodeId outs[] = {sg->out};
  return evaluate(sg->graph, bind, outs)[0].reshaped({a.height, a.width});
}

std::vector<std::pair<std::size_t, std::size_t>> pyramid_shapes(std::size_t height,
                                                                std::size_t width,
                                                                std::size_t levels) {
  std::vector<std::pair<std::size_t, std::size_t>> out{{height, width}};
  while (out.size() < levels) {
    auto [h, w] = out.back();
    if (h == 1 && w == 1) break;
    out.emplace_back((h + 1) / 2, (w + 1) / 2);
  }
  return out;
}

namespace {

// Per-row z-normalization of [B, n]; rows with zero variance become 0.
NodeId z_rows(GraphBuilder& b, NodeId s, double floor) {
  const Shape shape = b.shape(s);
  const double inv_n = 1.0 / static_cast<double>(shape[1]);
  auto mean = b.expand_last(b.scale(b.sum_last(s), inv_n), shape);
  auto c = b.sub(s, mean);
  auto var = b.scale(b.sum_last(b.mul(c, c)), inv_n);
  if (floor > 0.0) var = b.add(var, b.constant(Tensor::filled({shape[0]}, floor)));
  return b.mul(c, b.expand_last(b.inv_sqrt(var), shape));
}

Tensor transposed(const Tensor& m) {
  const std::size_t r = m.shape()[0], c = m.shape()[1];
  std::vector<double> v(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[j * r + i] = m[i * c + j];
  return Tensor({c, r}, std::move(v));
}

}  // namespace

NodeId build_alignment_term(GraphBuilder& b, NodeId saliency, std::size_t height,
                            std::size_t width, const HarmonizerConfig& cfg) {
  const std::size_t B = b.shape(saliency)[0];
  auto shapes = pyramid_shapes(height, width, cfg.levels);
  auto mask = b.input("phi_mask", {B});
  NodeId level = saliency;
  std::optional<NodeId> total;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (i > 0) {
      auto [h, w] = shapes[i - 1];
      level = b.matmul(level, b.constant(transposed(pyramid_down_matrix(h, w))));
    }
    const std::size_t n = shapes[i].first * shapes[i].second;
    auto target = b.input("phi_level" + std::to_string(i), {B, n});
    auto d = b.sub(b.relu(z_rows(b, level, cfg.variance_floor)), target);
    auto sq = b.sum_last(b.mul(d, d));  // [B]
    auto dist = cfg.squared_distance ? sq : b.sqrt(sq);
    auto term = b.sum_all(b.mul(dist, mask));
    total = total ? b.add(*total, term) : term;
  }
  return b.scale(*total, cfg.lambda1 / static_cast<double>(B));
}

std::vector<Tensor> target_levels(const ImportanceMap& phi, std::size_t levels) {
  auto p = gaussian_pyramid(phi, levels);
  std::vector<Tensor> out;
  for (const auto& lv : p.levels) {
    auto z = z_normalize(lv);
    std::vector<double> v(z.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::max(0.0, z[i]);
    out.emplace_back(Shape{z.size()}, std::move(v));
  }
  return out;
}

void bind_alignment_targets(std::span<const Item> batch, const HarmonizerConfig& cfg,
                            Bindings& bindings) {
  const std::size_t B = batch.size();
  const auto& img = batch[0].image.shape();
  auto shapes = pyramid_shapes(img[0], img[1], cfg.levels);
  std::vector<std::vector<double>> levels(shapes.size());
  std::vector<double> mask(B, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& it = batch[b];
    if (it.map) {
      mask[b] = 1.0;
      auto t = target_levels(*it.map, cfg.levels);
      for (std::size_t i = 0; i < shapes.size(); ++i)
        levels[i].insert(levels[i].end(), t[i].data().begin(), t[i].data().end());
    } else {
      for (std::size_t i = 0; i < shapes.size(); ++i)
        levels[i].insert(levels[i].end(), shapes[i].first * shapes[i].second, 0.0);
    }
  }
  bindings.insert_or_assign("phi_mask", Tensor({B}, std::move(mask)));
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const std::size_t n = shapes[i].first * shapes[i].second;
    bindings.insert_or_assign("phi_level" + std::to_string(i), Tensor({B, n}, std::move(levels[i])));
  }
}

training::ObjectiveGraph harmonization_objective(const ArchSpec& arch, std::size_t batch,
                                                 const HarmonizerConfig& cfg) {
  GraphBuilder b;
  auto base = training::build_base_objective(b, arch, batch, cfg.train.weight_decay);
  if (cfg.lambda1 == 0.0)
    return training::finish_objective(b, base, b.add(base.cce, base.decay), std::nullopt);
  auto onehot = b.input("onehot", {batch, arch.num_classes});
  auto sal = build_saliency(b, base.x, base.logits, onehot);
  auto align = build_alignment_term(b, sal, arch.height, arch.width, cfg);
  auto total = b.add(b.add(base.cce, align), base.decay);
  return training::finish_objective(b, base, total, align);
}

namespace {

void bind_onehot(const ArchSpec& arch, std::span<const Item> batch, Bindings& bindings) {
  std::vector<double> v(batch.size() * arch.num_classes, 0.0);
  for (std::size_t i = 0; i < batch.size(); ++i)
    v[i * arch.num_classes + static_cast<std::size_t>(batch[i].label)] = 1.0;
  bindings.insert_or_assign("onehot", Tensor({batch.size(), arch.num_classes}, std::move(v)));
}

bool any_map(std::span<const Item> batch) {
  for (const auto& it : batch)
    if (it.map) return true;
  return false;
}

}  // namespace

HarmonizationLoss harmonization_loss(const Model& model, std::span<const Item> batch,
                                     const HarmonizerConfig& cfg) {
  validate(cfg);
  if (batch.empty()) throw ValidationError("harmonization loss of an empty batch");
  auto og = harmonization_objective(model.arch, batch.size(), cfg);
  Bindings bind = model.params;
  training::bind_images_and_targets(model.arch, batch, cfg.train.label_smoothing, bind);
  if (og.alignment) {
    bind_onehot(model.arch, batch, bind);
    bind_alignment_targets(batch, cfg, bind);
  }
  std::vector<NodeId> outs{og.total, og.cce, og.decay};
  if (og.alignment) outs.push_back(*og.alignment);
  outs.insert(outs.end(), og.grads.begin(), og.grads.end());
  auto vals = evaluate(og.graph, bind, outs);
  HarmonizationLoss r;
  r.total = vals[0].item();
  r.cce = vals[1].item();
  r.decay = vals[2].item();
  const std::size_t g0 = og.alignment ? 4 : 3;
  if (og.alignment) r.alignment = vals[3].item();
  for (std::size_t k = 0; k < model.param_order.size(); ++k)
    r.gradients.emplace(model.param_order[k], std::move(vals[g0 + k]));
  r.no_maps_warning = cfg.lambda1 > 0.0 && !any_map(batch);
  return r;
}

TrainResult harmonize_train(const Model& model, const Dataset& data, const HarmonizerConfig& cfg) {
  validate(cfg);
  bool maps = false;
  for (const auto& it : data.items) maps = maps || it.map.has_value();
  if (!maps) throw ValidationError("harmonized training needs importance maps on some items");
  const ArchSpec arch = model.arch;
  auto factory = [arch, cfg](std::size_t batch) { return harmonization_objective(arch, batch, cfg); };
  training::BatchBinder binder;
  if (cfg.lambda1 != 0.0)
    binder = [cfg](const Model& m, std::span<const Item> batch, Bindings& bind) {
      bind_onehot(m.arch, batch, bind);
      bind_alignment_targets(batch, cfg, bind);
    };
  auto result = training::run(model, data, cfg.train, factory, binder);
  result.model.add_tag("harmonized");
  result.model.metadata["training"] = {{"routine", "harmonize"}, {"config", to_json(cfg)}};
  return result;
}

json to_json(const AdversarialTrainConfig& c) {
  return json{{"epsilon", c.epsilon},
              {"norm", "linf"},
              {"steps", c.steps},
              {"step_size", c.step_size ? json(*c.step_size) : json(nullptr)},
              {"train", to_json(c.train)}};
}

TrainResult adversarial_train(const Model& model, const Dataset& data,
                              const AdversarialTrainConfig& cfg) {
  if (!(cfg.epsilon >= 0.0)) throw ValidationError("adversarial training epsilon must be >= 0");
  const ArchSpec arch = model.arch;
  const double wd = cfg.train.weight_decay;
  auto factory = [arch, wd](std::size_t batch) {
    GraphBuilder b;
    auto base = training::build_base_objective(b, arch, batch, wd);
    return training::finish_objective(b, base, b.add(base.cce, base.decay), std::nullopt);
  };
  training::BatchBinder binder;
  if (cfg.epsilon > 0.0) {
    AttackConfig ac;
    ac.norm = Norm::Linf;
    ac.epsilon = cfg.epsilon;
    ac.steps = cfg.steps;
    ac.step_size = cfg.step_size;
    ac.range = data.pixel_range;
    validate(ac);
    binder = [ac](const Model& m, std::span<const Item> batch, Bindings& bind) {
      std::vector<double> xs;
      for (const auto& it : batch) {
        auto r = pgd_attack(m, it.image, it.label, ac);
        xs.insert(xs.end(), r.adversarial.data().begin(), r.adversarial.data().end());
      }
      bind.insert_or_assign("x", Tensor(bind.at("x").shape(), std::move(xs)));
    };
  }
  auto result = training::run(model, data, cfg.train, factory, binder);
  result.model.add_tag("adv-trained");
  result.model.metadata["training"] = {{"routine", "adversarial"}, {"config", to_json(cfg)}};
  return result;
}

}  // namespace advalign
