// advalign: generate data, train, attack, evaluate and report from the command line.
#include <algorithm>
#include <cstdio>
#include <fstream>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "advalign/harmonizer.hpp"
#include "advalign/report.hpp"
#include "json.hpp"

using namespace advalign;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kExitError = 1;
constexpr int kExitValidation = 2;
constexpr int kExitPartial = 3;

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

struct ArchFlags {
  std::string kind = "small-cnn";
  std::vector<std::size_t> hidden;
  std::vector<std::size_t> channels{8, 16};
  std::size_t patch = 4, embed_dim = 8, mixer_hidden = 16;
  std::uint64_t init_seed = 0;

  void add(CLI::App* app) {
    app->add_option("--arch", kind, "mlp | small-cnn | tiny-vit")->capture_default_str();
    app->add_option("--hidden", hidden, "mlp hidden widths")->delimiter(',');
    app->add_option("--channels", channels, "small-cnn channel counts")->delimiter(',')
        ->capture_default_str();
    app->add_option("--vit-patch", patch)->capture_default_str();
    app->add_option("--embed-dim", embed_dim)->capture_default_str();
    app->add_option("--mixer-hidden", mixer_hidden)->capture_default_str();
    app->add_option("--init-seed", init_seed)->capture_default_str();
  }

  ArchSpec spec(const Dataset& d) const {
    ArchSpec a;
    a.kind = arch_kind_from_string(kind);
    a.hidden = hidden;
    a.channels = channels;
    a.patch = patch;
    a.embed_dim = embed_dim;
    a.mixer_hidden = mixer_hidden;
    const auto& s = d.items.at(0).image.shape();
    a.height = s[0];
    a.width = s[1];
    a.in_channels = s[2];
    a.num_classes = static_cast<std::size_t>(d.num_classes);
    validate(a);
    return a;
  }
};

struct TrainFlags {
  TrainConfig cfg;
  void add(CLI::App* app) {
    app->add_option("--epochs", cfg.epochs)->capture_default_str();
    app->add_option("--lr", cfg.learning_rate)->capture_default_str();
    app->add_option("--momentum", cfg.momentum)->capture_default_str();
    app->add_option("--batch-size", cfg.batch_size)->capture_default_str();
    app->add_option("--weight-decay,--lambda2", cfg.weight_decay)->capture_default_str();
    app->add_option("--label-smoothing", cfg.label_smoothing)->capture_default_str();
    app->add_option("--seed", cfg.seed)->capture_default_str();
    app->add_option("--lr-decay-every", cfg.lr_decay_every)->capture_default_str();
    app->add_option("--lr-decay-factor", cfg.lr_decay_factor)->capture_default_str();
    app->add_flag("--flip", cfg.flip, "random left-right flips");
  }
};

int gen_data(const SyntheticSpec& spec, const std::string& placement, const fs::path& out) {
  SyntheticSpec s = spec;
  if (placement == "center")
    s.placement = PatchPlacement::Center;
  else if (placement != "random")
    throw ValidationError("placement must be random or center");
  auto d = generate_synthetic_dataset(s);
  save_dataset(d.train, out / "train");
  save_dataset(d.test, out / "test");
  write_json(out / "resolved_config.json",
             {{"command", "gen-data"},
              {"height", s.height},
              {"width", s.width},
              {"channels", s.channels},
              {"num_classes", s.num_classes},
              {"train_per_class", s.train_per_class},
              {"test_per_class", s.test_per_class},
              {"noise", s.noise},
              {"signal", s.signal},
              {"patch", s.patch},
              {"placement", placement},
              {"seed", s.seed}});
  std::fprintf(stderr, "wrote %zu train / %zu test items to %s\n", d.train.size(), d.test.size(),
               out.string().c_str());
  return 0;
}

struct TrainArgs {
  std::string mode = "control";
  fs::path data, out, init;
  ArchFlags arch;
  TrainFlags train;
  double lambda1 = 1.0;
  std::string preset;
  std::size_t levels = 5;
  bool squared = false;
  double variance_floor = 0.0;
  double epsilon = 0.0;
  int adv_steps = 3;
};

int train(const TrainArgs& a) {
  auto data = load_dataset(a.data);
  if (data.empty()) throw ValidationError("training split is empty");
  Model init = a.init.empty() ? build_classifier(a.arch.spec(data), a.arch.init_seed)
                              : load_checkpoint(a.init);
  json resolved{{"command", "train"},
                {"mode", a.mode},
                {"data", a.data.string()},
                {"arch", to_json(init.arch)},
                {"init", a.init.empty() ? json(a.arch.init_seed) : json(a.init.string())}};
  TrainResult r;
  if (a.mode == "control") {
    resolved["train"] = to_json(a.train.cfg);
    r = train_crossentropy(init, data, a.train.cfg);
  } else if (a.mode == "harmonize") {
    HarmonizerConfig h;
    h.lambda1 = a.preset.empty() ? a.lambda1 : preset_lambda(a.preset);
    h.levels = a.levels;
    h.squared_distance = a.squared;
    h.variance_floor = a.variance_floor;
    h.train = a.train.cfg;
    if (!a.preset.empty()) resolved["preset"] = a.preset;
    resolved["harmonizer"] = to_json(h);
    r = harmonize_train(init, data, h);
  } else if (a.mode == "adv") {
    AdversarialTrainConfig c;
    c.epsilon = a.epsilon;
    c.steps = a.adv_steps;
    c.train = a.train.cfg;
    resolved["adversarial"] = to_json(c);
    r = adversarial_train(init, data, c);
  } else {
    throw ValidationError("mode must be control, harmonize or adv");
  }
  fs::create_directories(a.out);
  save_checkpoint(r.model, a.out / "model.ckpt");
  write_loss_trace_csv(r.trace, a.out / "loss_trace.csv");
  write_json(a.out / "resolved_config.json", resolved);
  const auto& last = r.trace.back();
  std::fprintf(stderr, "trained %s: final loss %.6g (cce %.6g, alignment %.6g)\n", a.mode.c_str(),
               last.total, last.cce, last.alignment);
  return 0;
}

struct AttackArgs {
  fs::path model, data, out;
  std::string image_id;
  std::string norm = "l2";
  double epsilon = 1.0;
  int steps = 3;
  bool minimal = false;
  ToleranceConfig tol;
  CwConfig cw;
};

int attack(const AttackArgs& a) {
  auto model = load_checkpoint(a.model);
  auto data = load_dataset(a.data);
  const Item* item = nullptr;
  for (const auto& it : data.items)
    if (it.id == a.image_id) item = &it;
  if (!item) throw ValidationError("no image with id '" + a.image_id + "'");
  json out{{"image_id", item->id}, {"label", item->label}, {"norm", a.norm}};
  json resolved{{"command", "attack"},
                {"model", a.model.string()},
                {"data", a.data.string()},
                {"image_id", a.image_id},
                {"norm", a.norm}};
  AttackResult r;
  if (a.norm == "cw") {
    CwConfig cw = a.cw;
    cw.range = data.pixel_range;
    resolved["cw"] = to_json(cw);
    r = cw_l2_attack(model, item->image, item->label, cw);
  } else {
    AttackConfig ac;
    ac.norm = norm_from_string(a.norm);
    ac.epsilon = a.epsilon;
    ac.steps = a.steps;
    ac.range = data.pixel_range;
    if (a.minimal) {
      ToleranceConfig tc = a.tol;
      tc.attack = ac;
      resolved["tolerance"] = to_json(tc);
      auto rec = min_tolerance_image(model, item->image, item->label, tc, item->id);
      out["included"] = rec.included;
      out["exclusion_reason"] = rec.exclusion_reason;
      out["epsilon"] = rec.epsilon;
      out["iterations"] = rec.iterations;
      if (!rec.attack) {
        fs::create_directories(a.out);
        write_json(a.out / "attack.json", out);
        write_json(a.out / "resolved_config.json", resolved);
        std::printf("%s\n", out.dump().c_str());
        return 0;
      }
      r = *rec.attack;
    } else {
      resolved["attack"] = to_json(ac);
      r = pgd_attack(model, item->image, item->label, ac);
    }
  }
  out["success"] = r.success;
  out["predicted"] = r.predicted;
  out["l2_distortion"] = r.l2_distortion;
  out["linf_distortion"] = linf_norm(r.delta);
  fs::create_directories(a.out);
  write_json(a.out / "attack.json", out);
  write_json(a.out / "resolved_config.json", resolved);
  write_file_atomic(a.out / "delta.bin", [&] {
    auto bytes = encode_blob(r.delta);
    return std::string(bytes.begin(), bytes.end());
  }());
  std::printf("%s\n", out.dump().c_str());
  return 0;
}

struct EvalArgs {
  fs::path config, data, out;
  std::vector<std::string> models;  // id=path
  std::vector<std::string> norms;
  std::size_t parallelism = 1;
  std::uint64_t seed = 0;
  double eps_lo = 0.001, eps_hi = 10.0, k = 0.01;
};

RunConfig eval_config(const EvalArgs& a) {
  RunConfig c;
  if (!a.config.empty()) {
    std::ifstream f(a.config);
    if (!f) throw ValidationError("cannot read " + a.config.string());
    json j = json::parse(f);
    if (!a.out.empty()) j["output"] = a.out.string();
    c = run_config_from_json(j, a.config.parent_path());
  } else {
    c.dataset = a.data;
    c.output = a.out;
    c.seed = a.seed;
    c.tolerance.eps_lo = a.eps_lo;
    c.tolerance.eps_hi = a.eps_hi;
    c.tolerance.k = a.k;
    for (const auto& m : a.models) {
      const auto eq = m.find('=');
      if (eq == std::string::npos) throw ValidationError("--model expects id=checkpoint, got " + m);
      c.models.push_back({m.substr(0, eq), fs::path(m.substr(eq + 1)), std::nullopt, 0});
    }
    if (!a.norms.empty()) c.norms = a.norms;
  }
  if (a.parallelism > 1 || a.config.empty()) c.parallelism = a.parallelism;
  validate(c);
  // attacks run in the dataset's pixel range
  const auto range = load_dataset(c.dataset).pixel_range;
  c.tolerance.attack.range = range;
  if (c.tolerance_linf) c.tolerance_linf->attack.range = range;
  c.cw.range = range;
  return c;
}

int evaluate(const EvalArgs& a) {
  auto cfg = eval_config(a);
  fs::create_directories(cfg.output);
  auto frozen = to_json(cfg);
  // parallelism does not change results; keep it out of the frozen copy
  frozen.erase("parallelism");
  write_json(cfg.output / "resolved_config.json", frozen);
  auto result = run_zoo_evaluation(cfg);
  for (const auto& f : result.failures)
    std::fprintf(stderr, "failed: %s %s: %s\n", f.model_id.c_str(),
                 f.norm.empty() ? "(load)" : f.norm.c_str(), f.message.c_str());
  if (!result.records.empty()) emit_report(result.records, result.details, cfg.output);
  std::fprintf(stderr, "%zu records (%zu computed, %zu resumed), %zu failures\n",
               result.records.size(), result.computed, result.resumed, result.failures.size());
  return result.failures.empty() ? 0 : kExitPartial;
}

int report(const fs::path& dir) {
  std::vector<ZooRecord> records;
  std::vector<ImageDetail> details;
  std::vector<fs::path> files;
  if (!fs::is_directory(dir / "records"))
    throw ValidationError("no records directory under " + dir.string());
  for (const auto& e : fs::directory_iterator(dir / "records"))
    if (e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& p : files) {
    std::ifstream f(p);
    auto j = json::parse(f);
    records.push_back(zoo_record_from_json(j.at("record")));
    for (const auto& d : j.at("details")) details.push_back(image_detail_from_json(d));
  }
  emit_report(records, details, dir);
  std::fprintf(stderr, "reported %zu records\n", records.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adversarial tolerance and alignment toolkit"};
  app.require_subcommand(1);

  SyntheticSpec spec;
  std::string placement = "random";
  fs::path gen_out;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  gen->add_option("--out", gen_out)->required();
  gen->add_option("--seed", spec.seed)->capture_default_str();
  gen->add_option("--height", spec.height)->capture_default_str();
  gen->add_option("--width", spec.width)->capture_default_str();
  gen->add_option("--channels", spec.channels)->capture_default_str();
  gen->add_option("--classes", spec.num_classes)->capture_default_str();
  gen->add_option("--train-per-class", spec.train_per_class)->capture_default_str();
  gen->add_option("--test-per-class", spec.test_per_class)->capture_default_str();
  gen->add_option("--noise", spec.noise)->capture_default_str();
  gen->add_option("--signal", spec.signal)->capture_default_str();
  gen->add_option("--patch", spec.patch)->capture_default_str();
  gen->add_option("--placement", placement, "random | center")->capture_default_str();

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "train a classifier");
  tr->add_option("mode", ta.mode, "control | harmonize | adv")->required();
  tr->add_option("--data", ta.data, "training split directory")->required();
  tr->add_option("--out", ta.out, "output directory")->required();
  tr->add_option("--init", ta.init, "start from this checkpoint");
  ta.arch.add(tr);
  ta.train.add(tr);
  tr->add_option("--lambda1", ta.lambda1)->capture_default_str();
  tr->add_option("--preset", ta.preset, "named lambda1 setting");
  tr->add_option("--levels", ta.levels)->capture_default_str();
  tr->add_flag("--squared-distance", ta.squared);
  tr->add_option("--variance-floor", ta.variance_floor)->capture_default_str();
  tr->add_option("--epsilon", ta.epsilon, "linf radius for adversarial training");
  tr->add_option("--adv-steps", ta.adv_steps)->capture_default_str();

  AttackArgs aa;
  auto* at = app.add_subcommand("attack", "attack one image");
  at->add_option("--model", aa.model)->required();
  at->add_option("--data", aa.data)->required();
  at->add_option("--image-id", aa.image_id)->required();
  at->add_option("--out", aa.out)->required();
  at->add_option("--norm", aa.norm, "l2 | linf | cw")->capture_default_str();
  at->add_option("--epsilon", aa.epsilon)->capture_default_str();
  at->add_option("--steps", aa.steps)->capture_default_str();
  at->add_flag("--minimal", aa.minimal, "bisect for the minimal radius");
  at->add_option("--eps-lo", aa.tol.eps_lo)->capture_default_str();
  at->add_option("--eps-hi", aa.tol.eps_hi)->capture_default_str();
  at->add_option("--k", aa.tol.k)->capture_default_str();
  at->add_option("--cw-c", aa.cw.c)->capture_default_str();
  at->add_option("--cw-steps", aa.cw.steps)->capture_default_str();
  at->add_option("--cw-lr", aa.cw.learning_rate)->capture_default_str();

  EvalArgs ea;
  auto* ev = app.add_subcommand("evaluate", "evaluate a model zoo");
  ev->add_option("--config", ea.config, "run config json");
  ev->add_option("--data", ea.data, "test split directory");
  ev->add_option("--model", ea.models, "id=checkpoint (repeatable)");
  ev->add_option("--norm", ea.norms, "l2 | linf | cw (repeatable)");
  ev->add_option("--out", ea.out, "output directory");
  ev->add_option("--parallelism,-j", ea.parallelism)->capture_default_str();
  ev->add_option("--seed", ea.seed)->capture_default_str();
  ev->add_option("--eps-lo", ea.eps_lo)->capture_default_str();
  ev->add_option("--eps-hi", ea.eps_hi)->capture_default_str();
  ev->add_option("--k", ea.k)->capture_default_str();

  fs::path report_dir;
  auto* rp = app.add_subcommand("report", "rebuild reports from journaled records");
  rp->add_option("--dir", report_dir, "evaluate output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (gen->parsed()) return gen_data(spec, placement, gen_out);
    if (tr->parsed()) return train(ta);
    if (at->parsed()) return attack(aa);
    if (ev->parsed()) return evaluate(ea);
    if (rp->parsed()) return report(report_dir);
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitError;
  }
  return kExitError;
}
