#include <cmath>
#include <filesystem>
#include <fstream>

#include "advalign/models.hpp"
#include "advalign/rng.hpp"
#include "advalign/training.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace advalign;
using advalign::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

ArchSpec mlp(std::vector<std::size_t> hidden, std::size_t classes = 4) {
  ArchSpec a;
  a.kind = ArchKind::Mlp;
  a.hidden = std::move(hidden);
  a.num_classes = classes;
  return a;
}

std::size_t scalar_count(const Model& m) {
  std::size_t n = 0;
  for (const auto& [_, t] : m.params) n += t.size();
  return n;
}

double param_norm(const Model& m) {
  double s = 0.0;
  for (const auto& [_, t] : m.params)
    for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

SyntheticData small_data(std::size_t train_per_class, std::uint64_t seed = 3) {
  SyntheticSpec s;
  s.train_per_class = train_per_class;
  s.test_per_class = 25;
  s.seed = seed;
  return generate_synthetic_dataset(s);
}

// Dataset of given labels over random images.
Dataset labelled(Rng& rng, const std::vector<int>& labels, std::size_t classes = 4) {
  Dataset d;
  d.split = "test";
  d.pixel_range = {0, 1};
  d.num_classes = int(classes);
  for (std::size_t i = 0; i < labels.size(); ++i)
    d.items.push_back({"i" + std::to_string(i), random_tensor(rng, {16, 16, 1}, 0, 1), labels[i], {}});
  return d;
}

}  // namespace

TEST_CASE("closed-form parameter counts") {
  CHECK(parameter_count(mlp({32})) == 16 * 16 * 32 + 32 + 32 * 4 + 4);
  CHECK(parameter_count(mlp({32})) == 8356);
  for (std::uint64_t seed : {1, 2}) {
    ArchSpec cnn;
    cnn.kind = ArchKind::SmallCnn;
    cnn.channels = {4, 6};
    ArchSpec vit;
    vit.kind = ArchKind::TinyVit;
    vit.in_channels = 3;
    for (const auto& a : {mlp({32}), mlp({}), mlp({7, 5}, 3), cnn, vit}) {
      auto m = build_classifier(a, seed);
      CHECK(scalar_count(m) == parameter_count(a));
    }
  }
}

TEST_CASE("invalid architectures are rejected") {
  CHECK_THROWS_AS(build_classifier(mlp({32}, 1), 0), ValidationError);
  ArchSpec v;
  v.kind = ArchKind::TinyVit;
  v.patch = 5;
  CHECK_THROWS_AS(build_classifier(v, 0), ValidationError);
  ArchSpec c;
  c.kind = ArchKind::SmallCnn;
  CHECK_THROWS_AS(build_classifier(c, 0), ValidationError);
  CHECK_THROWS_AS(arch_kind_from_string("resnet"), ValidationError);
}

TEST_CASE("initialization is seeded and recorded") {
  auto a = build_classifier(mlp({32}), 5);
  auto b = build_classifier(mlp({32}), 5);
  auto c = build_classifier(mlp({32}), 6);
  CHECK(a.params == b.params);
  CHECK_FALSE(a.params == c.params);
  CHECK(a.metadata.at("init_scheme") == kInitScheme);
  // weights within +-1/sqrt(fan_in), biases zero
  for (double v : a.params.at("fc0.weight").data()) CHECK(std::abs(v) <= 1.0 / 16.0);
  for (double v : a.params.at("fc0.bias").data()) CHECK(v == 0.0);
  CHECK(arch_from_json(to_json(a.arch)) == a.arch);
}

TEST_CASE("prediction shapes and the tie rule") {
  Rng rng(1);
  auto img = random_tensor(rng, {16, 16, 1}, 0, 1);
  auto m2 = build_classifier(mlp({8}, 2), 1);
  auto p = predict(m2, img);
  CHECK(p.logits.size() == 2);

  auto m = build_classifier(mlp({8}), 1);
  m.params.at("fc1.weight") = Tensor::zeros({8, 4});
  auto z = predict(m, img);
  CHECK(z.logits == std::vector<double>(4, 0.0));
  CHECK(z.label == 0);
  CHECK(argmax(std::vector<double>{1, 3, 3, 2}) == 1);
  CHECK_THROWS_AS(predict(m, random_tensor(rng, {8, 8, 1})), ShapeError);
}

TEST_CASE("linear model logits equal a hand matmul") {
  Rng rng(2);
  auto m = build_classifier(mlp({}, 3), 9);
  m.params.at("fc0.bias") = random_tensor(rng, {3});
  const auto& W = m.params.at("fc0.weight");
  const auto& b = m.params.at("fc0.bias");
  for (int t = 0; t < 5; ++t) {
    auto x = random_tensor(rng, {16, 16, 1}, 0, 1);
    auto p = predict(m, x);
    for (std::size_t k = 0; k < 3; ++k) {
      double s = b[k];
      for (std::size_t i = 0; i < 256; ++i) s += x[i] * W[i * 3 + k];
      CHECK(p.logits[k] == doctest::Approx(s).epsilon(1e-13));
    }
  }
}

TEST_CASE("batched prediction equals single prediction") {
  Rng rng(3);
  ArchSpec cnn;
  cnn.kind = ArchKind::SmallCnn;
  cnn.channels = {3};
  auto m = build_classifier(cnn, 3);
  std::vector<Image> imgs;
  for (int i = 0; i < 70; ++i) imgs.push_back(random_tensor(rng, {16, 16, 1}, 0, 1));
  auto batch = predict_batch(m, imgs);
  for (std::size_t i = 0; i < imgs.size(); i += 13)
    CHECK(batch[i].logits == predict(m, imgs[i]).logits);
}

TEST_CASE("accuracy cases") {
  Rng rng(4);
  auto m = build_classifier(mlp({}), 1);
  // constant-class model: all weights zero, bias favours class 2
  m.params.at("fc0.weight") = Tensor::zeros({256, 4});
  m.params.at("fc0.bias") = Tensor({4}, {0, 0, 1, 0});
  auto balanced = labelled(rng, {0, 1, 2, 3, 0, 1, 2, 3});
  CHECK(accuracy(m, balanced) == 0.25);
  CHECK(accuracy(m, labelled(rng, {2, 2, 2})) == 1.0);
  CHECK(accuracy(m, labelled(rng, {0, 1, 3})) == 0.0);
  Dataset empty;
  empty.num_classes = 4;
  CHECK_THROWS_AS(accuracy(m, empty), ValidationError);
}

TEST_CASE("accuracy is additive over disjoint unions") {
  Rng rng(5);
  auto m = build_classifier(mlp({6}), 2);
  for (int t = 0; t < 10; ++t) {
    std::vector<int> l1(1 + rng.below(20)), l2(1 + rng.below(20));
    for (auto& l : l1) l = int(rng.below(4));
    for (auto& l : l2) l = int(rng.below(4));
    auto d1 = labelled(rng, l1), d2 = labelled(rng, l2);
    Dataset u = d1;
    for (auto it : d2.items) {
      it.id += "b";
      u.items.push_back(it);
    }
    const double lhs = accuracy(m, u) * double(u.size());
    const double rhs = accuracy(m, d1) * double(d1.size()) + accuracy(m, d2) * double(d2.size());
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  }
}

TEST_CASE("smoothed targets") {
  auto t = smoothed_targets(1, 4, 0.3);
  CHECK(t[1] == doctest::Approx(0.7));
  CHECK(t[0] == doctest::Approx(0.1));
  CHECK(smoothed_targets(2, 3, 0.0) == std::vector<double>{0, 0, 1});
}

TEST_CASE("zero smoothing gives plain cross-entropy") {
  Rng rng(6);
  auto m = build_classifier(mlp({5}), 6);
  auto d = labelled(rng, {0, 3, 1});
  GraphBuilder b;
  auto base = training::build_base_objective(b, m.arch, 3, 0.0);
  auto g = b.build();
  Bindings bind = m.params;
  training::bind_images_and_targets(m.arch, d.items, 0.0, bind);
  NodeId outs[] = {base.cce};
  const double loss = evaluate(g, bind, outs)[0].item();
  double expect = 0.0;
  for (const auto& it : d.items) {
    auto z = predict(m, it.image).logits;
    double mx = *std::max_element(z.begin(), z.end()), s = 0.0;
    for (double v : z) s += std::exp(v - mx);
    expect += -(z[it.label] - mx - std::log(s));
  }
  CHECK(loss == doctest::Approx(expect / 3).epsilon(1e-14));
}

TEST_CASE("training is deterministic and lr 0 is a no-op") {
  auto data = small_data(20);
  auto m = build_classifier(mlp({16}), 1);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 24;  // 80 items: last batch has 8
  cfg.seed = 11;
  cfg.flip = true;
  auto a = train_crossentropy(m, data.train, cfg);
  auto b = train_crossentropy(m, data.train, cfg);
  CHECK(a.model.params == b.model.params);
  CHECK(a.model.has_tag("control"));
  CHECK(a.trace.size() == 2);

  cfg.learning_rate = 0.0;
  auto z = train_crossentropy(m, data.train, cfg);
  CHECK(z.model.params == m.params);
}

TEST_CASE("weight decay shrinks the parameter norm") {
  auto data = small_data(20);
  auto m = build_classifier(mlp({16}), 2);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.seed = 1;
  auto plain = train_crossentropy(m, data.train, cfg);
  cfg.weight_decay = 1e-3;
  auto decayed = train_crossentropy(m, data.train, cfg);
  CHECK(param_norm(decayed.model) < param_norm(plain.model));
  CHECK(decayed.trace.back().decay > 0.0);
}

TEST_CASE("training reaches high accuracy on the synthetic task") {
  auto data = small_data(500, 1);
  ArchSpec cnn;
  cnn.kind = ArchKind::SmallCnn;
  cnn.channels = {8, 16};
  auto m = build_classifier(cnn, 1);
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.learning_rate = 0.02;
  auto r = train_crossentropy(m, data.train, cfg);
  CHECK(accuracy(r.model, data.test) >= 0.9);
  CHECK(r.trace.back().cce < r.trace.front().cce);
}

TEST_CASE("divergence reports epoch and batch") {
  auto data = small_data(10);
  auto m = build_classifier(mlp({16}), 1);
  TrainConfig cfg;
  cfg.learning_rate = 1e200;
  cfg.momentum = 0.0;
  try {
    train_crossentropy(m, data.train, cfg);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.epoch() == 0);
    CHECK(std::string(e.what()).find("epoch 0") != std::string::npos);
  }
  cfg.epochs = 0;
  CHECK_THROWS_AS(train_crossentropy(m, data.train, cfg), ValidationError);
}

TEST_CASE("loss trace csv") {
  std::vector<EpochLoss> t{{0, 1.5, 0.25, 0.125, 1.875}};
  auto p = fs::temp_directory_path() / "advalign_trace.csv";
  write_loss_trace_csv(t, p);
  std::ifstream f(p);
  std::string h, row;
  std::getline(f, h);
  std::getline(f, row);
  CHECK(h == "epoch,cce,alignment,decay,total");
  CHECK(row == "0,1.5,0.25,0.125,1.875");
  fs::remove(p);
}

TEST_CASE("checkpoint round trip and corruption") {
  ArchSpec vit;
  vit.kind = ArchKind::TinyVit;
  auto m = build_classifier(vit, 4);
  m.add_tag("harmonized");
  auto p = fs::temp_directory_path() / "advalign_ckpt.bin";
  save_checkpoint(m, p);
  auto back = load_checkpoint(p);
  CHECK(back.params == m.params);
  CHECK(back.param_order == m.param_order);
  CHECK(back.arch == m.arch);
  CHECK(back.tags == m.tags);
  CHECK(back.metadata == m.metadata);
  Rng rng(1);
  auto img = random_tensor(rng, {16, 16, 1}, 0, 1);
  CHECK(predict(back, img).logits == predict(m, img).logits);

  fs::resize_file(p, fs::file_size(p) - 3);
  CHECK_THROWS_AS(load_checkpoint(p), CheckpointError);
  {
    std::ofstream f(p, std::ios::binary);
    f << "NOTACKPT";
  }
  CHECK_THROWS_AS(load_checkpoint(p), CheckpointError);
  fs::remove(p);
  CHECK_THROWS_AS(load_checkpoint(p), CheckpointError);
}
