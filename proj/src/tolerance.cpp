#include "advalign/tolerance.hpp"

#include <cmath>

#include "advalign/parallel.hpp"

namespace advalign {

using json = nlohmann::json;

void validate(const ToleranceConfig& c) {
  if (!(c.eps_lo >= 0.0) || !(c.eps_lo < c.eps_hi) || !std::isfinite(c.eps_hi))
    throw ValidationError("tolerance search needs 0 <= eps_lo < eps_hi");
  if (!(c.k > 0.0)) throw ValidationError("tolerance threshold k must be positive");
  AttackConfig a = c.attack;
  a.epsilon = 0.0;
  validate(a);
}

json to_json(const ToleranceConfig& c) {
  json a = to_json(c.attack);
  a.erase("epsilon");
  return json{{"eps_lo", c.eps_lo}, {"eps_hi", c.eps_hi}, {"k", c.k},
              {"attack", a},        {"warm_start", c.warm_start}};
}

ToleranceConfig tolerance_config_from_json(const json& j) {
  ToleranceConfig c;
  c.eps_lo = j.value("eps_lo", c.eps_lo);
  c.eps_hi = j.value("eps_hi", c.eps_hi);
  c.k = j.value("k", c.k);
  c.warm_start = j.value("warm_start", c.warm_start);
  if (j.contains("attack")) c.attack = attack_config_from_json(j.at("attack"));
  validate(c);
  return c;
}

int max_search_iterations(const ToleranceConfig& c) {
  validate(c);
  return static_cast<int>(std::ceil(std::log2((c.eps_hi - c.eps_lo) / c.k))) + 1;
}

BisectionResult bisect_min_epsilon(const std::function<bool(double)>& attack_succeeds, double lo,
                                   double hi, double k) {
  BisectionResult r;
  double l = lo, u = hi;
  while (u - l >= k) {
    const double m = l + (u - l) / 2;
    const bool ok = attack_succeeds(m);
    r.history.push_back({l, u, m, ok});
    ++r.iterations;
    if (ok)
      u = m;
    else
      l = m;
  }
  r.epsilon = u;
  r.final_success = attack_succeeds(u);
  ++r.iterations;
  return r;
}

ToleranceRecord min_tolerance_image(const Model& model, const Image& image, int label,
                                    const ToleranceConfig& cfg, const std::string& id) {
  validate(cfg);
  ToleranceRecord rec;
  rec.id = id;
  if (predict(model, image).label != label) {
    rec.exclusion_reason = "clean-misclassified";
    return rec;
  }
  // The smallest successful perturbation so far seeds later attacks, so
  // success at eps carries over to every larger radius.
  std::optional<Tensor> warm;
  std::optional<AttackResult> last;
  auto attack = [&](double eps) {
    AttackConfig a = cfg.attack;
    a.epsilon = eps;
    auto res = pgd_attack(model, image, label, a, cfg.warm_start && warm ? &*warm : nullptr);
    if (res.success) warm = res.delta;
    last = std::move(res);
    return last->success;
  };
  auto b = bisect_min_epsilon(attack, cfg.eps_lo, cfg.eps_hi, cfg.k);
  rec.epsilon = b.epsilon;
  rec.iterations = b.iterations;
  rec.attack = std::move(last);
  if (!b.final_success) {
    rec.success_at_eps_hi = false;
    rec.exclusion_reason = "attack-failed-at-eps-hi";
    return rec;
  }
  rec.l2_distortion = rec.attack->l2_distortion;
  rec.included = true;
  return rec;
}

ToleranceSummary summarize(std::vector<ToleranceRecord> records) {
  ToleranceSummary s;
  s.records = std::move(records);
  double sum = 0.0;
  for (const auto& r : s.records)
    if (r.included) sum += r.l2_distortion, ++s.included;
  if (s.included == 0) throw Error("no measurable images");
  s.mean = sum / static_cast<double>(s.included);
  return s;
}

ToleranceSummary perturbation_tolerance(const Model& model, const Dataset& data,
                                        const ToleranceConfig& cfg, std::size_t workers) {
  if (data.empty()) throw ValidationError("perturbation tolerance of an empty dataset");
  validate(cfg);
  std::vector<ToleranceRecord> records(data.size());
  parallel_for(data.size(), workers, [&](std::size_t i) {
    const auto& it = data.items[i];
    records[i] = min_tolerance_image(model, it.image, it.label, cfg, it.id);
  });
  return summarize(std::move(records));
}

}  // namespace advalign
