#pragma once

#include <functional>
#include <optional>
#include <span>

#include "advalign/models.hpp"

// Shared minibatch SGD machinery used by cross-entropy, harmonized and
// adversarial training.
namespace advalign::training {

struct ObjectiveGraph {
  Graph graph;
  NodeId total = 0;
  NodeId cce = 0;
  std::optional<NodeId> alignment;
  NodeId decay = 0;
  std::vector<NodeId> grads;  // in model.param_order
};

// Nodes of the common part of every objective for one batch size.
struct BaseObjective {
  NodeId x;        // input "x" [B,H,W,C]
  NodeId targets;  // input "targets" [B,K]
  NodeId logits;
  NodeId cce;
  NodeId decay;  // lambda2 * sum of squared parameters
  std::vector<NodeId> params;
};

BaseObjective build_base_objective(GraphBuilder& b, const ArchSpec& arch, std::size_t batch,
                                   double weight_decay);

// Adds gradient nodes of `total` with respect to every parameter.
ObjectiveGraph finish_objective(GraphBuilder& b, const BaseObjective& base, NodeId total,
                                std::optional<NodeId> alignment);

using ObjectiveFactory = std::function<ObjectiveGraph(std::size_t batch)>;

// Adds batch-dependent bindings. "x" and "targets" are already bound from
// the items when this runs; it may overwrite them.
using BatchBinder =
    std::function<void(const Model& current, std::span<const Item> batch, Bindings& bindings)>;

void bind_images_and_targets(const ArchSpec& arch, std::span<const Item> batch,
                             double label_smoothing, Bindings& bindings);

TrainResult run(const Model& init, const Dataset& data, const TrainConfig& cfg,
                const ObjectiveFactory& factory, const BatchBinder& binder = {});

}  // namespace advalign::training
