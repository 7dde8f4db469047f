#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "advalign/attacks.hpp"

namespace advalign {

struct ToleranceConfig {
  double eps_lo = 0.001;
  double eps_hi = 10.0;
  double k = 0.01;
  AttackConfig attack;  // epsilon is overwritten by the search
  bool warm_start = true;
};

void validate(const ToleranceConfig& cfg);
nlohmann::json to_json(const ToleranceConfig& cfg);
ToleranceConfig tolerance_config_from_json(const nlohmann::json& j);

// Upper bound on attacks per image: bisection steps plus the final re-attack.
int max_search_iterations(const ToleranceConfig& cfg);

struct BisectionStep {
  double lo, hi, mid;
  bool success;
};

struct BisectionResult {
  double epsilon = 0.0;  // final upper bound r
  int iterations = 0;    // attacks run, including the final re-attack
  bool final_success = false;
  std::vector<BisectionStep> history;
};

// Bisection over [lo, hi] with midpoint l + (r - l) / 2 while r - l >= k;
// success moves r, failure moves l; the final attack is re-run at r.
BisectionResult bisect_min_epsilon(const std::function<bool(double)>& attack_succeeds, double lo,
                                   double hi, double k);

struct ToleranceRecord {
  std::string id;
  double epsilon = 0.0;
  double l2_distortion = 0.0;
  int iterations = 0;
  bool success_at_eps_hi = true;
  bool included = false;
  std::string exclusion_reason;  // "", "clean-misclassified", "attack-failed-at-eps-hi"
  std::optional<AttackResult> attack;  // final re-attack
};

ToleranceRecord min_tolerance_image(const Model& model, const Image& image, int label,
                                    const ToleranceConfig& cfg, const std::string& id = "");

struct ToleranceSummary {
  double mean = 0.0;  // mean l2 distortion over included records
  std::size_t included = 0;
  std::vector<ToleranceRecord> records;  // dataset order
};

// Throws Error("no measurable images") when every image is excluded.
ToleranceSummary perturbation_tolerance(const Model& model, const Dataset& data,
                                        const ToleranceConfig& cfg, std::size_t workers = 1);

// Mean over included records, in record order.
ToleranceSummary summarize(std::vector<ToleranceRecord> records);

}  // namespace advalign
