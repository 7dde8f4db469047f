#include <cmath>
#include <filesystem>
#include <fstream>

#include "advalign/report.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace advalign;
namespace fs = std::filesystem;

namespace {

ZooRecord record(const std::string& id, double acc, double tol, double align,
                 const std::string& family = "cnn") {
  ZooRecord r;
  r.model_id = id;
  r.family = family;
  r.accuracy = acc;
  r.tolerance_l2 = tol;
  r.tolerance_linf = tol / 4;
  r.alignment = align;
  r.norm = "l2";
  r.seed = 3;
  return r;
}

std::string read(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), {});
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("advalign_report_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// A small saved test split and a config over two untrained models.
RunConfig small_run(const fs::path& dir) {
  SyntheticSpec s;
  s.train_per_class = 1;
  s.test_per_class = 6;
  s.seed = 5;
  save_dataset(generate_synthetic_dataset(s).test, dir / "data");
  RunConfig c;
  c.dataset = dir / "data";
  c.output = dir / "out";
  c.tolerance.eps_hi = 2.0;
  ArchSpec mlp;
  mlp.hidden = {8};
  ArchSpec cnn;
  cnn.kind = ArchKind::SmallCnn;
  cnn.channels = {3};
  c.models = {{"m-mlp", std::nullopt, mlp, 1}, {"m-cnn", std::nullopt, cnn, 2}};
  return c;
}

}  // namespace

TEST_CASE("welch t against the textbook formula") {
  std::vector<double> a{1, 2, 3}, b{2, 3, 4};
  auto t = two_sample_t(a, b);
  // means 2 and 3, sample variances 1 and 1
  const double se = std::sqrt(1.0 / 3 + 1.0 / 3);
  CHECK(std::abs(t.t - (2.0 - 3.0) / se) < 1e-12);
  const double num = (1.0 / 3 + 1.0 / 3) * (1.0 / 3 + 1.0 / 3);
  const double den = (1.0 / 9) / 2 + (1.0 / 9) / 2;
  CHECK(std::abs(t.dof - num / den) < 1e-12);

  CHECK(two_sample_t(a, a).t == 0.0);
  std::vector<double> z{0, 0}, o{1, 1}, one{1};
  CHECK_THROWS_AS(two_sample_t(z, o), DegenerateInputError);
  CHECK_THROWS_AS(two_sample_t(one, a), ValidationError);

  std::vector<double> c{1.5, 2.5, 9, 4}, d{0.25, 7};
  auto u = two_sample_t(c, d);
  const double mc = 17.0 / 4, md = 3.625;
  double vc = 0, vd = 0;
  for (double x : c) vc += (x - mc) * (x - mc);
  for (double x : d) vd += (x - md) * (x - md);
  vc /= 3;
  vd /= 1;
  CHECK(std::abs(u.t - (mc - md) / std::sqrt(vc / 4 + vd / 2)) < 1e-12);
}

TEST_CASE("correlate") {
  std::vector<ZooRecord> rs;
  for (int i = 0; i < 6; ++i) rs.push_back(record("m" + std::to_string(i), i / 10.0, i, -i / 10.0));
  CHECK(correlate(rs, "accuracy", "tolerance_l2").rho == 1.0);
  CHECK(correlate(rs, "accuracy", "alignment").rho == -1.0);
  CHECK(correlate(rs, "accuracy", "tolerance_l2").n == 6);
  CHECK_THROWS_AS(correlate({rs[0], rs[1]}, "accuracy", "alignment"), ValidationError);
  CHECK_THROWS_AS(correlate(rs, "accuracy", "lambda1"), ValidationError);
  CHECK_THROWS_AS(correlate(rs, "accuracy", "bogus"), ValidationError);
  for (auto& r : rs) r.tolerance_l2 = 1.0;
  CHECK_THROWS_AS(correlate(rs, "accuracy", "tolerance_l2"), DegenerateInputError);
}

TEST_CASE("correlate ignores monotone transforms of a column") {
  std::vector<ZooRecord> rs;
  const double acc[] = {0.3, 0.9, 0.5, 0.7, 0.1, 0.8};
  const double tol[] = {2, 1, 5, 3, 4, 0.5};
  for (int i = 0; i < 6; ++i) rs.push_back(record("m" + std::to_string(i), acc[i], tol[i], 0));
  const double rho = correlate(rs, "accuracy", "tolerance_l2").rho;
  for (auto& r : rs) r.tolerance_l2 = std::exp(r.tolerance_l2);
  CHECK(correlate(rs, "accuracy", "tolerance_l2").rho == rho);
}

TEST_CASE("csv has a fixed header and mirrors the json") {
  auto r = record("solo", 0.75, 1.0 / 3, 0.1);
  r.lambda1 = 2;
  r.lambda2 = 1e-4;
  auto csv = records_csv({r});
  CHECK(csv.substr(0, csv.find('\n')) ==
        "model_id,family,accuracy,tolerance_l2,tolerance_linf,alignment,norm,lambda1,lambda2,seed");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
  auto back = records_from_csv(csv);
  REQUIRE(back.size() == 1);
  auto fromj = zoo_record_from_json(nlohmann::json::parse(to_json(r).dump()));
  for (const auto* x : {&back[0], &fromj}) {
    CHECK(x->accuracy == r.accuracy);
    CHECK(x->tolerance_l2 == r.tolerance_l2);
    CHECK(x->tolerance_linf == r.tolerance_linf);
    CHECK(x->alignment == r.alignment);
    CHECK(x->lambda1 == r.lambda1);
    CHECK(x->lambda2 == r.lambda2);
    CHECK(x->seed == r.seed);
  }
}

TEST_CASE("records are validated") {
  auto r = record("ok", 0.5, 1, 0.2);
  validate(r);
  r.accuracy = 1.5;
  CHECK_THROWS_AS(validate(r), ValidationError);
  r = record("ok", 0.5, 1, 1.2);
  CHECK_THROWS_AS(validate(r), ValidationError);
  r = record("ok", 0.5, -1, 0.2);
  CHECK_THROWS_AS(validate(r), ValidationError);
  r = record("bad id", 0.5, 1, 0.2);
  CHECK_THROWS_AS(validate(r), ValidationError);
  r = record("ok", 0.5, 1, 0.2, "robust");
  CHECK_THROWS_AS(validate(r), ValidationError);
}

TEST_CASE("summary agrees with correlate and the t-test") {
  std::vector<ZooRecord> rs;
  for (int i = 0; i < 8; ++i)
    rs.push_back(record("m" + std::to_string(i), 0.5 + 0.05 * i, 1 + (i * 7 % 5), 0.1 * (i % 3),
                        i % 2 ? "harmonized" : "control"));
  auto s = report_summary(rs);
  const auto& l2 = s.at("by_norm").at("l2");
  CHECK(l2.at("correlations").at(0).at("rho").get<double>() ==
        correlate(rs, "accuracy", "tolerance_l2").rho);
  std::vector<double> c, h;
  for (const auto& r : rs) (r.family == "control" ? c : h).push_back(r.tolerance_l2);
  CHECK(l2.at("family_tests").at(0).at("t").get<double>() == two_sample_t(c, h).t);
  CHECK(s.at("t_test") == "welch");
}

TEST_CASE("emitted reports are byte-stable") {
  auto dir = scratch("emit");
  std::vector<ZooRecord> rs{record("a", 0.5, 1, 0.25), record("b", 0.75, 2, 0.5)};
  std::vector<ImageDetail> ds(1);
  ds[0].model_id = "a";
  ds[0].norm = "l2";
  ds[0].image_id = "x,1";
  emit_report(rs, ds, dir / "one");
  emit_report(rs, ds, dir / "two");
  for (const char* f : {"report.csv", "report.json", "details.csv"})
    CHECK(read(dir / "one" / f) == read(dir / "two" / f));
  CHECK(read(dir / "one" / "details.csv").find("\"x,1\"") != std::string::npos);
  CHECK_THROWS_AS(emit_report({}, ds, dir / "three"), ValidationError);
  fs::remove_all(dir);
}

TEST_CASE("run configs are validated before any work") {
  RunConfig c;
  c.dataset = "nowhere";
  c.output = "nowhere";
  CHECK_THROWS_AS(run_zoo_evaluation(c), ValidationError);
  c.models = {{"m", std::nullopt, ArchSpec{}, 0}};
  c.norms = {};
  CHECK_THROWS_AS(validate(c), ValidationError);
  c.norms = {"l3"};
  CHECK_THROWS_AS(validate(c), ValidationError);
  c.norms = {"l2"};
  c.models.push_back(c.models[0]);
  CHECK_THROWS_AS(validate(c), ValidationError);
  c.models.pop_back();
  c.models[0].checkpoint = "x.ckpt";
  CHECK_THROWS_AS(validate(c), ValidationError);
}

TEST_CASE("family follows training tags, then architecture") {
  ArchSpec a;
  auto m = build_classifier(a, 1);
  CHECK(family_of(m) == "hybrid");
  a.kind = ArchKind::SmallCnn;
  a.channels = {2};
  CHECK(family_of(build_classifier(a, 1)) == "cnn");
  a.kind = ArchKind::TinyVit;
  CHECK(family_of(build_classifier(a, 1)) == "vit-like");
  m.add_tag("harmonized");
  CHECK(family_of(m) == "harmonized");
}

TEST_CASE("zoo evaluation journals, resumes and isolates failures") {
  auto dir = scratch("zoo");
  auto cfg = small_run(dir);
  cfg.norms = {"l2", "linf"};
  auto first = run_zoo_evaluation(cfg);
  for (const auto& f : first.failures) MESSAGE(f.model_id, " ", f.norm, ": ", f.message);
  REQUIRE(first.failures.empty());
  CHECK(first.computed == 4);
  CHECK(first.records.size() == 4);
  CHECK(first.records[0].model_id == "m-cnn");
  CHECK(first.records[0].norm == "l2");
  CHECK(first.details.size() == 4 * 24);
  emit_report(first.records, first.details, dir / "r1");

  auto again = run_zoo_evaluation(cfg);
  CHECK(again.computed == 0);
  CHECK(again.resumed == 4);
  CHECK(again.records == first.records);

  fs::remove(cfg.output / "records" / "m-mlp__linf.json");
  auto partial = run_zoo_evaluation(cfg);
  CHECK(partial.computed == 1);
  emit_report(partial.records, partial.details, dir / "r2");
  for (const char* f : {"report.csv", "report.json", "details.csv"})
    CHECK(read(dir / "r1" / f) == read(dir / "r2" / f));

  SUBCASE("parallel workers give the same report") {
    auto par = cfg;
    par.output = dir / "out-par";
    par.parallelism = 3;
    auto p = run_zoo_evaluation(par);
    emit_report(p.records, p.details, dir / "r3");
    for (const char* f : {"report.csv", "report.json", "details.csv"})
      CHECK(read(dir / "r1" / f) == read(dir / "r3" / f));
  }
  SUBCASE("a corrupt checkpoint is recorded and the rest still runs") {
    std::ofstream(dir / "bad.ckpt") << "not a checkpoint";
    auto bad = cfg;
    bad.models.push_back({"m-bad", dir / "bad.ckpt", std::nullopt, 0});
    auto r = run_zoo_evaluation(bad);
    CHECK(r.records.size() == 4);
    REQUIRE(r.failures.size() == 1);
    CHECK(r.failures[0].model_id == "m-bad");
    CHECK(r.failures[0].norm.empty());
  }
  fs::remove_all(dir);
}

TEST_CASE("run config json round trip resolves relative paths") {
  auto c = small_run(scratch("cfg"));
  auto j = to_json(c);
  j["dataset"] = "data";
  auto back = run_config_from_json(j, "/base");
  CHECK(back.dataset == fs::path("/base/data"));
  CHECK(back.models.size() == 2);
  CHECK(back.models[1].arch->channels == std::vector<std::size_t>{3});
  CHECK(back.tolerance.eps_hi == 2.0);
  fs::remove_all(fs::temp_directory_path() / "advalign_report_cfg");
}
