#include "advalign/training.hpp"

#include <cmath>

#include "advalign/rng.hpp"

namespace advalign::training {

BaseObjective build_base_objective(GraphBuilder& b, const ArchSpec& arch, std::size_t batch,
                                   double weight_decay) {
  BaseObjective o;
  o.x = b.input("x", {batch, arch.height, arch.width, arch.in_channels});
  o.targets = b.input("targets", {batch, arch.num_classes});
  o.logits = build_logits(b, arch, o.x);
  o.cce = b.softmax_cross_entropy(o.logits, o.targets);
  std::optional<NodeId> sq;
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (b.node(i).op != Op::Parameter) continue;
    o.params.push_back(i);
  }
  for (auto p : o.params) {
    auto s = b.sum_all(b.mul(p, p));
    sq = sq ? b.add(*sq, s) : s;
  }
  o.decay = b.scale(*sq, weight_decay);
  return o;
}

ObjectiveGraph finish_objective(GraphBuilder& b, const BaseObjective& base, NodeId total,
                                std::optional<NodeId> alignment) {
  ObjectiveGraph g;
  g.grads = add_gradients(b, total, base.params);
  g.total = total;
  g.cce = base.cce;
  g.alignment = alignment;
  g.decay = base.decay;
  g.graph = b.build();
  return g;
}

void bind_images_and_targets(const ArchSpec& arch, std::span<const Item> batch,
                             double label_smoothing, Bindings& bindings) {
  const std::size_t n = batch.size();
  std::vector<double> xs, ts;
  xs.reserve(n * arch.height * arch.width * arch.in_channels);
  ts.reserve(n * arch.num_classes);
  for (const auto& it : batch) {
    xs.insert(xs.end(), it.image.data().begin(), it.image.data().end());
    auto t = smoothed_targets(it.label, arch.num_classes, label_smoothing);
    ts.insert(ts.end(), t.begin(), t.end());
  }
  bindings.insert_or_assign("x", Tensor({n, arch.height, arch.width, arch.in_channels}, std::move(xs)));
  bindings.insert_or_assign("targets", Tensor({n, arch.num_classes}, std::move(ts)));
}

TrainResult run(const Model& init, const Dataset& data, const TrainConfig& cfg,
                const ObjectiveFactory& factory, const BatchBinder& binder) {
  validate(cfg);
  if (data.empty()) throw ValidationError("cannot train on an empty dataset");
  validate_dataset(data);
  const auto& a = init.arch;
  if (data.items[0].image.shape() != Shape{a.height, a.width, a.in_channels})
    throw ShapeError("dataset images do not match the model input");
  if (static_cast<std::size_t>(data.num_classes) != a.num_classes)
    throw ValidationError("dataset and model disagree on the number of classes");

  TrainResult result{init, {}};
  Model& model = result.model;
  std::map<std::size_t, ObjectiveGraph> graphs;
  std::map<std::string, Tensor> velocity;
  for (const auto& name : model.param_order)
    velocity.emplace(name, Tensor::zeros(model.params.at(name).shape()));

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  double lr = cfg.learning_rate;
  std::vector<Item> batch;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.lr_decay_every > 0 && epoch > 0 && epoch % cfg.lr_decay_every == 0)
      lr *= cfg.lr_decay_factor;
    rng.shuffle(order);
    EpochLoss sums{epoch, 0, 0, 0, 0};
    std::size_t seen = 0;
    int batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      batch.clear();
      for (std::size_t i = 0; i < n; ++i) {
        const Item& it = data.items[order[start + i]];
        batch.push_back(cfg.flip && rng.uniform() < 0.5 ? left_right_flip(it) : it);
      }
      auto git = graphs.find(n);
      if (git == graphs.end()) git = graphs.emplace(n, factory(n)).first;
      const ObjectiveGraph& og = git->second;

      Bindings bind = model.params;
      bind_images_and_targets(a, batch, cfg.label_smoothing, bind);
      if (binder) binder(model, batch, bind);

      std::vector<NodeId> outs{og.total, og.cce, og.decay};
      if (og.alignment) outs.push_back(*og.alignment);
      outs.insert(outs.end(), og.grads.begin(), og.grads.end());
      std::vector<Tensor> vals;
      try {
        vals = evaluate(og.graph, bind, outs);
      } catch (const NonFiniteError& e) {
        throw DivergenceError(epoch, batch_index,
                              "training diverged at epoch " + std::to_string(epoch) + ", batch " +
                                  std::to_string(batch_index) + ": " + e.what());
      }
      const double total = vals[0].item();
      if (!std::isfinite(total))
        throw DivergenceError(epoch, batch_index,
                              "non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                  std::to_string(batch_index));
      const double w = static_cast<double>(n);
      sums.total += total * w;
      sums.cce += vals[1].item() * w;
      sums.decay += vals[2].item() * w;
      if (og.alignment) sums.alignment += vals[3].item() * w;
      seen += n;

      const std::size_t g0 = og.alignment ? 4 : 3;
      for (std::size_t k = 0; k < model.param_order.size(); ++k) {
        const auto& name = model.param_order[k];
        Tensor& p = model.params.at(name);
        Tensor& v = velocity.at(name);
        const Tensor& g = vals[g0 + k];
        for (std::size_t i = 0; i < p.size(); ++i) {
          v[i] = cfg.momentum * v[i] + g[i];
          p[i] -= lr * v[i];
        }
        if (!all_finite(p.data()))
          throw DivergenceError(epoch, batch_index,
                                "parameter '" + name + "' became non-finite at epoch " +
                                    std::to_string(epoch) + ", batch " + std::to_string(batch_index));
      }
    }
    const double inv = 1.0 / static_cast<double>(seen);
    sums.total *= inv;
    sums.cce *= inv;
    sums.decay *= inv;
    sums.alignment *= inv;
    result.trace.push_back(sums);
  }
  return result;
}

}  // namespace advalign::training
