#pragma once

#include <span>
#include <string>
#include <vector>

#include "advalign/attacks.hpp"
#include "advalign/models.hpp"
#include "advalign/pyramid.hpp"
#include "advalign/training.hpp"

namespace advalign {

struct HarmonizerConfig {
  double lambda1 = 1.0;
  std::size_t levels = 5;         // level 0 is the input resolution
  bool squared_distance = false;  // per-level ||.||^2 instead of ||.||
  double variance_floor = 0.0;    // added to the saliency variance before 1/sqrt
  TrainConfig train;              // train.weight_decay is lambda2
};

void validate(const HarmonizerConfig& cfg);
nlohmann::json to_json(const HarmonizerConfig& cfg);
HarmonizerConfig harmonizer_config_from_json(const nlohmann::json& j);

// Named lambda settings of the harmonized reference models.
struct LambdaPreset {
  const char* name;
  double lambda;
};
std::span<const LambdaPreset> lambda_presets();
double preset_lambda(const std::string& name);

// |d logit_label / d x|, max over channels: [H, W].
ImportanceMap saliency_map(const Model& model, const Image& image, int label);

// Appends the saliency of each row of `logits` for the one-hot rows of
// `onehot` with respect to `x` [B,H,W,C]; returns [B, H*W].
NodeId build_saliency(GraphBuilder& b, NodeId x, NodeId logits, NodeId onehot);

// Multi-scale alignment term for saliency rows [B, n] of an H x W map.
// Binds "phi_level<i>" [B, n_i] (rectified z-normalized target levels) and
// "phi_mask" [B] (1 where the item has a map). Returns the scalar
// lambda1 / B * sum_i sum_b mask_b * dist(level i, row b).
NodeId build_alignment_term(GraphBuilder& b, NodeId saliency, std::size_t height,
                            std::size_t width, const HarmonizerConfig& cfg);

// Level shapes actually produced for an H x W map with the requested depth.
std::vector<std::pair<std::size_t, std::size_t>> pyramid_shapes(std::size_t height,
                                                                std::size_t width,
                                                                std::size_t levels);

// Rectified z-normalized pyramid levels of phi, flattened.
std::vector<Tensor> target_levels(const ImportanceMap& phi, std::size_t levels);

void bind_alignment_targets(std::span<const Item> batch, const HarmonizerConfig& cfg,
                            Bindings& bindings);

training::ObjectiveGraph harmonization_objective(const ArchSpec& arch, std::size_t batch,
                                                 const HarmonizerConfig& cfg);

struct HarmonizationLoss {
  double total = 0.0;
  double cce = 0.0;
  double alignment = 0.0;
  double decay = 0.0;
  Bindings gradients;  // per parameter
  bool no_maps_warning = false;
};

HarmonizationLoss harmonization_loss(const Model& model, std::span<const Item> batch,
                                     const HarmonizerConfig& cfg);

TrainResult harmonize_train(const Model& model, const Dataset& data, const HarmonizerConfig& cfg);

struct AdversarialTrainConfig {
  double epsilon = 0.0;  // linf radius, pixel units
  int steps = 3;
  std::optional<double> step_size;
  TrainConfig train;
};

nlohmann::json to_json(const AdversarialTrainConfig& cfg);

TrainResult adversarial_train(const Model& model, const Dataset& data,
                              const AdversarialTrainConfig& cfg);

}  // namespace advalign
