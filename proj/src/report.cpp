#include "advalign/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "advalign/alignment.hpp"
#include "advalign/parallel.hpp"

namespace advalign {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::set<std::string> kFamilies{"cnn", "vit-like", "hybrid", "control", "harmonized",
                                      "adv-trained"};
const std::set<std::string> kNorms{"l2", "linf", "cw"};

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> opt_from(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

void validate_model_id(const std::string& id) {
  if (id.empty()) throw ValidationError("model id must not be empty");
  for (char c : id)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.'))
      throw ValidationError("model id '" + id + "' may only use letters, digits, '-', '_', '.'");
  if (id.find("__") != std::string::npos)
    throw ValidationError("model id '" + id + "' must not contain '__'");
}

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw Error("cannot read " + p.string());
  return std::string((std::istreambuf_iterator<char>(f)), {});
}

std::string sha_of(const std::string& s) {
  return sha256_hex(std::vector<unsigned char>(s.begin(), s.end()));
}

}  // namespace

void validate(const ZooRecord& r) {
  validate_model_id(r.model_id);
  if (!kFamilies.count(r.family)) throw ValidationError("unknown family '" + r.family + "'");
  if (!kNorms.count(r.norm)) throw ValidationError("unknown norm '" + r.norm + "'");
  if (!(r.accuracy >= 0.0 && r.accuracy <= 1.0)) throw ValidationError("accuracy outside [0,1]");
  if (!(r.alignment >= -1.0 && r.alignment <= 1.0)) throw ValidationError("alignment outside [-1,1]");
  if (!(r.tolerance_l2 >= 0.0) || !(r.tolerance_linf >= 0.0))
    throw ValidationError("tolerance must be nonnegative");
}

json to_json(const ZooRecord& r) {
  return json{{"model_id", r.model_id},   {"family", r.family},
              {"accuracy", r.accuracy},   {"tolerance_l2", r.tolerance_l2},
              {"tolerance_linf", r.tolerance_linf}, {"alignment", r.alignment},
              {"norm", r.norm},           {"lambda1", opt(r.lambda1)},
              {"lambda2", opt(r.lambda2)}, {"seed", r.seed},
              {"measured", r.measured},   {"scored", r.scored}};
}

ZooRecord zoo_record_from_json(const json& j) {
  ZooRecord r;
  r.model_id = j.at("model_id").get<std::string>();
  r.family = j.at("family").get<std::string>();
  r.accuracy = j.at("accuracy").get<double>();
  r.tolerance_l2 = j.at("tolerance_l2").get<double>();
  r.tolerance_linf = j.at("tolerance_linf").get<double>();
  r.alignment = j.at("alignment").get<double>();
  r.norm = j.at("norm").get<std::string>();
  r.lambda1 = opt_from(j, "lambda1");
  r.lambda2 = opt_from(j, "lambda2");
  r.seed = j.at("seed").get<std::uint64_t>();
  r.measured = j.value("measured", std::size_t{0});
  r.scored = j.value("scored", std::size_t{0});
  validate(r);
  return r;
}

json to_json(const ImageDetail& d) {
  return json{{"model_id", d.model_id},
              {"norm", d.norm},
              {"image_id", d.image_id},
              {"label", d.label},
              {"included", d.included},
              {"exclusion_reason", d.exclusion_reason},
              {"epsilon", d.epsilon},
              {"l2_distortion", d.l2_distortion},
              {"linf_distortion", d.linf_distortion},
              {"iterations", d.iterations},
              {"rho", opt(d.rho)}};
}

ImageDetail image_detail_from_json(const json& j) {
  ImageDetail d;
  d.model_id = j.at("model_id").get<std::string>();
  d.norm = j.at("norm").get<std::string>();
  d.image_id = j.at("image_id").get<std::string>();
  d.label = j.at("label").get<int>();
  d.included = j.at("included").get<bool>();
  d.exclusion_reason = j.at("exclusion_reason").get<std::string>();
  d.epsilon = j.at("epsilon").get<double>();
  d.l2_distortion = j.at("l2_distortion").get<double>();
  d.linf_distortion = j.at("linf_distortion").get<double>();
  d.iterations = j.at("iterations").get<int>();
  d.rho = opt_from(j, "rho");
  return d;
}

void validate(const RunConfig& c) {
  if (c.models.empty()) throw ValidationError("run config lists no models");
  if (c.norms.empty()) throw ValidationError("run config lists no attack norms");
  if (c.dataset.empty()) throw ValidationError("run config has no dataset path");
  if (c.output.empty()) throw ValidationError("run config has no output directory");
  if (c.parallelism < 1) throw ValidationError("parallelism must be at least 1");
  std::set<std::string> ids, norms;
  for (const auto& m : c.models) {
    validate_model_id(m.id);
    if (!ids.insert(m.id).second) throw ValidationError("duplicate model id '" + m.id + "'");
    if (m.checkpoint.has_value() == m.arch.has_value())
      throw ValidationError("model '" + m.id + "' needs exactly one of checkpoint or arch");
    if (m.arch) validate(*m.arch);
  }
  for (const auto& n : c.norms) {
    if (!kNorms.count(n)) throw ValidationError("unknown attack norm '" + n + "'");
    if (!norms.insert(n).second) throw ValidationError("duplicate attack norm '" + n + "'");
  }
  validate(c.tolerance);
  if (c.tolerance_linf) validate(*c.tolerance_linf);
  validate(c.cw);
}

json to_json(const RunConfig& c) {
  json models = json::array();
  for (const auto& m : c.models) {
    json e{{"id", m.id}};
    if (m.checkpoint) e["checkpoint"] = m.checkpoint->string();
    if (m.arch) {
      e["arch"] = to_json(*m.arch);
      e["init_seed"] = m.init_seed;
    }
    models.push_back(e);
  }
  json j{{"dataset", c.dataset.string()},
         {"models", models},
         {"tolerance", to_json(c.tolerance)},
         {"cw", to_json(c.cw)},
         {"norms", c.norms},
         {"output", c.output.string()},
         {"seed", c.seed},
         {"parallelism", c.parallelism}};
  if (c.tolerance_linf) j["tolerance_linf"] = to_json(*c.tolerance_linf);
  return j;
}

RunConfig run_config_from_json(const json& j, const fs::path& base) {
  auto resolve = [&](const std::string& p) {
    fs::path path(p);
    return path.is_relative() && !base.empty() ? base / path : path;
  };
  RunConfig c;
  c.dataset = resolve(j.at("dataset").get<std::string>());
  for (const auto& e : j.at("models")) {
    ModelEntry m;
    m.id = e.at("id").get<std::string>();
    if (e.contains("checkpoint")) m.checkpoint = resolve(e.at("checkpoint").get<std::string>());
    if (e.contains("arch")) m.arch = arch_from_json(e.at("arch"));
    m.init_seed = e.value("init_seed", std::uint64_t{0});
    c.models.push_back(m);
  }
  if (j.contains("tolerance")) c.tolerance = tolerance_config_from_json(j.at("tolerance"));
  if (j.contains("tolerance_linf"))
    c.tolerance_linf = tolerance_config_from_json(j.at("tolerance_linf"));
  if (j.contains("cw")) c.cw = cw_config_from_json(j.at("cw"));
  if (j.contains("norms")) c.norms = j.at("norms").get<std::vector<std::string>>();
  c.output = resolve(j.at("output").get<std::string>());
  c.seed = j.value("seed", c.seed);
  c.parallelism = j.value("parallelism", c.parallelism);
  validate(c);
  return c;
}

std::string family_of(const Model& model) {
  for (const char* tag : {"harmonized", "adv-trained", "control"})
    if (model.has_tag(tag)) return tag;
  switch (model.arch.kind) {
    case ArchKind::SmallCnn: return "cnn";
    case ArchKind::TinyVit: return "vit-like";
    case ArchKind::Mlp: return "hybrid";
  }
  return "hybrid";
}

namespace {

void fill_training_fields(const Model& model, ZooRecord& r) {
  const auto& md = model.metadata;
  r.seed = md.value("init_seed", std::uint64_t{0});
  if (!md.contains("training")) return;
  const auto& t = md.at("training");
  const auto& cfg = t.at("config");
  const json& train = cfg.contains("train") ? cfg.at("train") : cfg;
  r.seed = train.value("seed", r.seed);
  if (t.at("routine") == "harmonize") {
    r.lambda1 = cfg.at("lambda1").get<double>();
    r.lambda2 = cfg.at("lambda2").get<double>();
  } else {
    r.lambda2 = train.value("weight_decay", 0.0);
  }
}

ImageDetail detail_from(const std::string& model_id, const std::string& norm, const Item& it,
                        const ToleranceRecord& rec) {
  ImageDetail d;
  d.model_id = model_id;
  d.norm = norm;
  d.image_id = it.id;
  d.label = it.label;
  d.included = rec.included;
  d.exclusion_reason = rec.exclusion_reason;
  d.epsilon = rec.epsilon;
  d.iterations = rec.iterations;
  if (rec.included) {
    d.l2_distortion = rec.l2_distortion;
    d.linf_distortion = linf_norm(rec.attack->delta);
  }
  return d;
}

}  // namespace

std::pair<ZooRecord, std::vector<ImageDetail>> evaluate_model(const Model& model,
                                                              const std::string& model_id,
                                                              const Dataset& data,
                                                              const std::string& norm,
                                                              const RunConfig& cfg) {
  if (!kNorms.count(norm)) throw ValidationError("unknown attack norm '" + norm + "'");
  ZooRecord r;
  r.model_id = model_id;
  r.family = family_of(model);
  r.norm = norm;
  fill_training_fields(model, r);
  r.accuracy = accuracy(model, data);

  std::vector<ToleranceRecord> recs(data.size());
  if (norm == "cw") {
    CwConfig cw = cfg.cw;
    cw.range = data.pixel_range;
    parallel_for(data.size(), cfg.parallelism, [&](std::size_t i) {
      const auto& it = data.items[i];
      ToleranceRecord& rec = recs[i];
      rec.id = it.id;
      if (predict(model, it.image).label != it.label) {
        rec.exclusion_reason = "clean-misclassified";
        return;
      }
      auto a = cw_l2_attack(model, it.image, it.label, cw);
      rec.iterations = a.iterations;
      if (!a.success) {
        rec.success_at_eps_hi = false;
        rec.exclusion_reason = "attack-failed";
        return;
      }
      rec.included = true;
      rec.l2_distortion = a.l2_distortion;
      rec.attack = std::move(a);
    });
  } else {
    ToleranceConfig tc = cfg.tolerance;
    if (norm == "linf" && cfg.tolerance_linf) tc = *cfg.tolerance_linf;
    tc.attack.norm = norm == "linf" ? Norm::Linf : Norm::L2;
    tc.attack.range = data.pixel_range;
    recs = perturbation_tolerance(model, data, tc, cfg.parallelism).records;
  }
  auto summary = summarize(recs);
  r.tolerance_l2 = summary.mean;
  r.measured = summary.included;

  std::vector<ImageDetail> details;
  std::vector<AttackResult> attacks(data.size());
  double linf_sum = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    details.push_back(detail_from(model_id, norm, data.items[i], summary.records[i]));
    if (summary.records[i].included) {
      attacks[i] = *summary.records[i].attack;
      linf_sum += details.back().linf_distortion;
    } else {
      attacks[i].delta = Tensor::zeros(data.items[i].image.shape());
    }
  }
  r.tolerance_linf = linf_sum / static_cast<double>(summary.included);

  auto al = adversarial_alignment(data, attacks);
  r.alignment = al.mean;
  r.scored = al.rho.size();
  std::map<std::string, double> rho;
  for (std::size_t k = 0; k < al.ids.size(); ++k) rho[al.ids[k]] = al.rho[k];
  for (auto& d : details)
    if (auto f = rho.find(d.image_id); f != rho.end()) d.rho = f->second;
  validate(r);
  return {r, details};
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

namespace {

std::string fingerprint(const ModelEntry& m, const std::string& norm, const RunConfig& cfg,
                        const std::string& dataset_sha) {
  json j{{"dataset", dataset_sha}, {"norm", norm}};
  if (m.checkpoint)
    j["checkpoint_sha256"] = sha_of(read_file(*m.checkpoint));
  else
    j["arch"] = to_json(*m.arch), j["init_seed"] = m.init_seed;
  if (norm == "cw") {
    j["cw"] = to_json(cfg.cw);
  } else {
    j["tolerance"] = to_json(norm == "linf" && cfg.tolerance_linf ? *cfg.tolerance_linf
                                                                 : cfg.tolerance);
  }
  return sha_of(j.dump());
}

std::optional<std::pair<ZooRecord, std::vector<ImageDetail>>> read_journal(
    const fs::path& path, const std::string& fp) {
  if (!fs::exists(path)) return std::nullopt;
  try {
    auto j = json::parse(read_file(path));
    if (j.at("schema_version") != kReportSchemaVersion || j.at("fingerprint") != fp)
      return std::nullopt;
    std::vector<ImageDetail> details;
    for (const auto& d : j.at("details")) details.push_back(image_detail_from_json(d));
    return std::make_pair(zoo_record_from_json(j.at("record")), std::move(details));
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

bool pair_less(const ZooRecord& a, const ZooRecord& b) {
  return std::tie(a.model_id, a.norm) < std::tie(b.model_id, b.norm);
}

}  // namespace

ZooResult run_zoo_evaluation(const RunConfig& cfg) {
  validate(cfg);
  for (const auto& m : cfg.models)
    if (m.checkpoint && !fs::exists(*m.checkpoint))
      throw ValidationError("checkpoint not found: " + m.checkpoint->string());
  if (!fs::exists(cfg.dataset / "manifest.json"))
    throw ValidationError("dataset not found: " + cfg.dataset.string());
  const auto data = load_dataset(cfg.dataset);
  const auto dataset_sha = sha_of(read_file(cfg.dataset / "manifest.json"));

  ZooResult out;
  std::vector<std::pair<ZooRecord, std::vector<ImageDetail>>> done;
  for (const auto& m : cfg.models) {
    std::optional<Model> model;
    for (const auto& norm : cfg.norms) {
      const auto path = cfg.output / "records" / (m.id + "__" + norm + ".json");
      try {
        const auto fp = fingerprint(m, norm, cfg, dataset_sha);
        if (auto j = read_journal(path, fp)) {
          done.push_back(std::move(*j));
          ++out.resumed;
          continue;
        }
        if (!model) {
          try {
            model = m.checkpoint ? load_checkpoint(*m.checkpoint)
                                 : build_classifier(*m.arch, m.init_seed);
          } catch (const std::exception& e) {
            out.failures.push_back({m.id, "", e.what()});
            break;
          }
        }
        auto result = evaluate_model(*model, m.id, data, norm, cfg);
        json dj = json::array();
        for (const auto& d : result.second) dj.push_back(to_json(d));
        json entry{{"schema_version", kReportSchemaVersion},
                   {"fingerprint", fp},
                   {"record", to_json(result.first)},
                   {"details", dj}};
        write_file_atomic(path, entry.dump(1) + "\n");
        done.push_back(std::move(result));
        ++out.computed;
      } catch (const std::exception& e) {
        out.failures.push_back({m.id, norm, e.what()});
      }
    }
  }
  std::sort(done.begin(), done.end(),
            [](const auto& a, const auto& b) { return pair_less(a.first, b.first); });
  for (auto& [rec, details] : done) {
    out.records.push_back(rec);
    out.details.insert(out.details.end(), details.begin(), details.end());
  }
  return out;
}

namespace {

std::optional<double> field(const ZooRecord& r, const std::string& name) {
  if (name == "accuracy") return r.accuracy;
  if (name == "tolerance_l2") return r.tolerance_l2;
  if (name == "tolerance_linf") return r.tolerance_linf;
  if (name == "alignment") return r.alignment;
  if (name == "lambda1") return r.lambda1;
  if (name == "lambda2") return r.lambda2;
  throw ValidationError("unknown record field '" + name + "'");
}

}  // namespace

Correlation correlate(const std::vector<ZooRecord>& records, const std::string& x_field,
                      const std::string& y_field) {
  std::vector<double> x, y;
  for (const auto& r : records) {
    auto a = field(r, x_field), b = field(r, y_field);
    if (a && b) x.push_back(*a), y.push_back(*b);
  }
  if (x.size() < 3)
    throw ValidationError("correlation needs at least 3 records with " + x_field + " and " +
                          y_field);
  return {spearman_rho(x, y), x.size()};
}

TTest two_sample_t(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw ValidationError("each group needs at least 2 values");
  auto moments = [](std::span<const double> v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::pair{m, s / static_cast<double>(v.size() - 1)};
  };
  auto [ma, va] = moments(a);
  auto [mb, vb] = moments(b);
  const double sa = va / static_cast<double>(a.size()), sb = vb / static_cast<double>(b.size());
  if (sa + sb == 0.0) throw DegenerateInputError("both groups have zero variance");
  TTest t;
  t.t = (ma - mb) / std::sqrt(sa + sb);
  t.dof = (sa + sb) * (sa + sb) /
          (sa * sa / static_cast<double>(a.size() - 1) + sb * sb / static_cast<double>(b.size() - 1));
  return t;
}

json report_summary(const std::vector<ZooRecord>& records) {
  std::map<std::string, std::vector<ZooRecord>> by_norm;
  for (const auto& r : records) by_norm[r.norm].push_back(r);
  json norms = json::object();
  for (const auto& [norm, recs] : by_norm) {
    json corr = json::array();
    const std::pair<const char*, const char*> pairs[] = {{"accuracy", "tolerance_l2"},
                                                         {"accuracy", "alignment"},
                                                         {"tolerance_l2", "alignment"}};
    for (auto [x, y] : pairs) {
      json e{{"x", x}, {"y", y}};
      try {
        auto c = correlate(recs, x, y);
        e["rho"] = c.rho;
        e["n"] = c.n;
      } catch (const Error& err) {
        e["error"] = err.what();
      }
      corr.push_back(e);
    }
    std::map<std::string, std::vector<const ZooRecord*>> fam;
    for (const auto& r : recs) fam[r.family].push_back(&r);
    json tests = json::array();
    for (auto a = fam.begin(); a != fam.end(); ++a)
      for (auto b = std::next(a); b != fam.end(); ++b)
        for (const char* f : {"tolerance_l2", "alignment"}) {
          std::vector<double> xa, xb;
          for (auto* r : a->second) xa.push_back(*field(*r, f));
          for (auto* r : b->second) xb.push_back(*field(*r, f));
          json e{{"group_a", a->first}, {"group_b", b->first}, {"field", f},
                 {"n_a", xa.size()},    {"n_b", xb.size()}};
          try {
            auto t = two_sample_t(xa, xb);
            e["t"] = t.t;
            e["dof"] = t.dof;
          } catch (const Error& err) {
            e["error"] = err.what();
          }
          tests.push_back(e);
        }
    norms[norm] = json{{"records", recs.size()}, {"correlations", corr}, {"family_tests", tests}};
  }
  return json{{"t_test", "welch"},
              {"correlation", "spearman (average ranks)"},
              {"p_values", "not computed"},
              {"by_norm", norms}};
}

std::string records_csv(const std::vector<ZooRecord>& records) {
  std::string s =
      "model_id,family,accuracy,tolerance_l2,tolerance_linf,alignment,norm,lambda1,lambda2,seed\n";
  for (const auto& r : records) {
    s += csv_field(r.model_id) + "," + r.family + "," + num(r.accuracy) + "," +
         num(r.tolerance_l2) + "," + num(r.tolerance_linf) + "," + num(r.alignment) + "," +
         r.norm + "," + (r.lambda1 ? num(*r.lambda1) : "") + "," +
         (r.lambda2 ? num(*r.lambda2) : "") + "," + std::to_string(r.seed) + "\n";
  }
  return s;
}

std::vector<ZooRecord> records_from_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  if (line != "model_id,family,accuracy,tolerance_l2,tolerance_linf,alignment,norm,lambda1,"
              "lambda2,seed")
    throw ValidationError("unexpected report header");
  std::vector<ZooRecord> out;
  while (std::getline(in, line)) {
    auto f = split_csv_line(line);
    if (f.size() != 10) throw ValidationError("malformed report row: " + line);
    ZooRecord r;
    r.model_id = f[0];
    r.family = f[1];
    r.accuracy = std::stod(f[2]);
    r.tolerance_l2 = std::stod(f[3]);
    r.tolerance_linf = std::stod(f[4]);
    r.alignment = std::stod(f[5]);
    r.norm = f[6];
    if (!f[7].empty()) r.lambda1 = std::stod(f[7]);
    if (!f[8].empty()) r.lambda2 = std::stod(f[8]);
    r.seed = std::stoull(f[9]);
    out.push_back(r);
  }
  return out;
}

std::string details_csv(const std::vector<ImageDetail>& details) {
  std::string s =
      "model_id,norm,image_id,label,included,exclusion_reason,epsilon,l2_distortion,"
      "linf_distortion,iterations,rho\n";
  for (const auto& d : details) {
    s += csv_field(d.model_id) + "," + d.norm + "," + csv_field(d.image_id) + "," +
         std::to_string(d.label) + "," + (d.included ? "1" : "0") + "," + d.exclusion_reason +
         "," + num(d.epsilon) + "," + num(d.l2_distortion) + "," + num(d.linf_distortion) + "," +
         std::to_string(d.iterations) + "," + (d.rho ? num(*d.rho) : "") + "\n";
  }
  return s;
}

void emit_report(const std::vector<ZooRecord>& records, const std::vector<ImageDetail>& details,
                 const fs::path& dir) {
  if (records.empty()) throw ValidationError("no records to report");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error("cannot create output directory " + dir.string());
  json recs = json::array();
  for (const auto& r : records) recs.push_back(to_json(r));
  json j{{"schema_version", kReportSchemaVersion},
         {"records", recs},
         {"summary", report_summary(records)}};
  write_file_atomic(dir / "report.csv", records_csv(records));
  write_file_atomic(dir / "report.json", j.dump(2) + "\n");
  write_file_atomic(dir / "details.csv", details_csv(details));
}

}  // namespace advalign
