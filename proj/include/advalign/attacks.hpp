#pragma once

#include <optional>
#include <string>
#include <vector>

#include "advalign/models.hpp"

namespace advalign {

enum class Norm { L2, Linf };

std::string to_string(Norm norm);
Norm norm_from_string(const std::string& s);

struct AttackConfig {
  Norm norm = Norm::L2;
  double epsilon = 0.0;
  std::optional<double> step_size;  // default 2.5 * epsilon / steps
  int steps = 3;
  PixelRange range{0.0, 255.0};
};

void validate(const AttackConfig& cfg);
double resolved_step_size(const AttackConfig& cfg);
nlohmann::json to_json(const AttackConfig& cfg);
AttackConfig attack_config_from_json(const nlohmann::json& j);

// Ball projections. eps = 0 gives the zero tensor.
Tensor project_l2(const Tensor& delta, double epsilon);
Tensor project_linf(const Tensor& delta, double epsilon);
Tensor project(const Tensor& delta, Norm norm, double epsilon);

Tensor clamp_pixels(const Tensor& image, PixelRange range);

struct AttackResult {
  Tensor delta;        // effective perturbation: adversarial - image
  Tensor adversarial;  // within the pixel range
  bool success = false;
  double l2_distortion = 0.0;
  int iterations = 0;
  int predicted = 0;                // class of the adversarial image
  std::vector<double> step_norms;   // perturbation norm (attack norm) after each step
};

// Untargeted PGD with per-step normalized ascent directions (l2: g/|g|,
// linf: sign g), ball projection and pixel clamping every step. `init`
// warm-starts the perturbation; it is projected onto the ball first. The
// returned perturbation is the final iterate if adversarial, otherwise the
// latest adversarial iterate seen, otherwise the final iterate.
AttackResult pgd_attack(const Model& model, const Image& image, int label, const AttackConfig& cfg,
                        const Tensor* init = nullptr);

struct CwConfig {
  double c = 1.0;
  int steps = 200;
  double learning_rate = 0.01;  // Adam, in tanh space
  double kappa = 0.0;
  PixelRange range{0.0, 255.0};
};

void validate(const CwConfig& cfg);
nlohmann::json to_json(const CwConfig& cfg);
CwConfig cw_config_from_json(const nlohmann::json& j);

// Minimizes |delta|^2 + c * max(Z_true - max_{i != true} Z_i, -kappa) over
// x_adv = lo + (hi - lo) * (tanh(w) + 1) / 2. Returns the smallest
// successful perturbation seen, or success = false.
AttackResult cw_l2_attack(const Model& model, const Image& image, int label, const CwConfig& cfg);

}  // namespace advalign
