#include "advalign/models.hpp"

#include <cmath>
#include <fstream>
#include <mutex>
#include <unordered_map>

#include "advalign/rng.hpp"
#include "advalign/training.hpp"

namespace advalign {

using json = nlohmann::json;

std::string to_string(ArchKind kind) {
  switch (kind) {
    case ArchKind::Mlp: return "mlp";
    case ArchKind::SmallCnn: return "small-cnn";
    case ArchKind::TinyVit: return "tiny-vit";
  }
  return "?";
}

ArchKind arch_kind_from_string(const std::string& s) {
  if (s == "mlp") return ArchKind::Mlp;
  if (s == "small-cnn") return ArchKind::SmallCnn;
  if (s == "tiny-vit") return ArchKind::TinyVit;
  throw ValidationError("unknown architecture kind '" + s + "'");
}

void validate(const ArchSpec& a) {
  if (a.num_classes < 2) throw ValidationError("num_classes must be at least 2");
  if (a.height == 0 || a.width == 0 || a.in_channels == 0)
    throw ValidationError("input shape must be positive");
  switch (a.kind) {
    case ArchKind::Mlp:
      for (auto w : a.hidden)
        if (w == 0) throw ValidationError("mlp hidden widths must be positive");
      break;
    case ArchKind::SmallCnn:
      if (a.channels.empty()) throw ValidationError("small-cnn needs at least one conv layer");
      for (auto c : a.channels)
        if (c == 0) throw ValidationError("small-cnn channel counts must be positive");
      break;
    case ArchKind::TinyVit:
      if (a.patch == 0 || a.height % a.patch || a.width % a.patch)
        throw ValidationError("tiny-vit patch size must divide the image size");
      if (a.embed_dim == 0 || a.mixer_hidden == 0)
        throw ValidationError("tiny-vit widths must be positive");
      break;
  }
}

namespace {

std::pair<std::size_t, std::size_t> cnn_output_hw(const ArchSpec& a) {
  std::size_t h = a.height, w = a.width;
  for (std::size_t i = 0; i < a.channels.size(); ++i)
    if (h >= 2 && w >= 2) h /= 2, w /= 2;
  return {h, w};
}

}  // namespace

std::size_t parameter_count(const ArchSpec& a) {
  validate(a);
  const std::size_t in = a.height * a.width * a.in_channels;
  std::size_t n = 0;
  switch (a.kind) {
    case ArchKind::Mlp: {
      std::size_t prev = in;
      for (auto w : a.hidden) n += prev * w + w, prev = w;
      n += prev * a.num_classes + a.num_classes;
      break;
    }
    case ArchKind::SmallCnn: {
      std::size_t prev = a.in_channels;
      for (auto c : a.channels) n += 9 * prev * c + c, prev = c;
      auto [h, w] = cnn_output_hw(a);
      n += h * w * prev * a.num_classes + a.num_classes;
      break;
    }
    case ArchKind::TinyVit: {
      const std::size_t tokens = (a.height / a.patch) * (a.width / a.patch);
      const std::size_t D = a.embed_dim, M = a.mixer_hidden;
      n = a.patch * a.patch * a.in_channels * D + D + D * M + M + M * D + D +
          tokens * D * a.num_classes + a.num_classes;
      break;
    }
  }
  return n;
}

json to_json(const ArchSpec& a) {
  return json{{"kind", to_string(a.kind)},   {"hidden", a.hidden},
              {"channels", a.channels},      {"patch", a.patch},
              {"embed_dim", a.embed_dim},    {"mixer_hidden", a.mixer_hidden},
              {"height", a.height},          {"width", a.width},
              {"in_channels", a.in_channels}, {"num_classes", a.num_classes}};
}

ArchSpec arch_from_json(const json& j) {
  ArchSpec a;
  try {
    a.kind = arch_kind_from_string(j.at("kind").get<std::string>());
    a.hidden = j.value("hidden", std::vector<std::size_t>{});
    a.channels = j.value("channels", std::vector<std::size_t>{});
    a.patch = j.value("patch", a.patch);
    a.embed_dim = j.value("embed_dim", a.embed_dim);
    a.mixer_hidden = j.value("mixer_hidden", a.mixer_hidden);
    a.height = j.value("height", a.height);
    a.width = j.value("width", a.width);
    a.in_channels = j.value("in_channels", a.in_channels);
    a.num_classes = j.value("num_classes", a.num_classes);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed architecture spec: ") + e.what());
  }
  validate(a);
  return a;
}

NodeId build_logits(GraphBuilder& b, const ArchSpec& a, NodeId x) {
  validate(a);
  const std::size_t B = b.shape(x)[0];
  if (b.shape(x) != Shape{B, a.height, a.width, a.in_channels})
    throw ShapeError("input " + shape_str(b.shape(x)) + " does not match the architecture");

  auto dense = [&](NodeId h, const std::string& name, std::size_t out) {
    const std::size_t rows = b.shape(h)[0], in = b.shape(h)[1];
    auto w = b.parameter(name + ".weight", {in, out});
    auto bias = b.parameter(name + ".bias", {out});
    return b.add(b.matmul(h, w), b.broadcast_to(bias, {rows, out}));
  };

  switch (a.kind) {
    case ArchKind::Mlp: {
      auto h = b.reshape(x, {B, a.height * a.width * a.in_channels});
      for (std::size_t i = 0; i < a.hidden.size(); ++i)
        h = b.relu(dense(h, "fc" + std::to_string(i), a.hidden[i]));
      return dense(h, "fc" + std::to_string(a.hidden.size()), a.num_classes);
    }
    case ArchKind::SmallCnn: {
      auto h = x;
      std::size_t cin = a.in_channels;
      for (std::size_t i = 0; i < a.channels.size(); ++i) {
        const std::string name = "conv" + std::to_string(i);
        auto w = b.parameter(name + ".weight", {3, 3, cin, a.channels[i]});
        auto bias = b.parameter(name + ".bias", {a.channels[i]});
        auto conv = b.conv2d(h, w, 1, 1);
        h = b.relu(b.add(conv, b.broadcast_to(bias, b.shape(conv))));
        if (b.shape(h)[1] >= 2 && b.shape(h)[2] >= 2) h = b.max_pool2d(h, 2, 2);
        cin = a.channels[i];
      }
      const Shape s = b.shape(h);
      h = b.reshape(h, {B, s[1] * s[2] * s[3]});
      return dense(h, "head", a.num_classes);
    }
    case ArchKind::TinyVit: {
      const std::size_t D = a.embed_dim;
      auto w = b.parameter("embed.weight", {a.patch, a.patch, a.in_channels, D});
      auto bias = b.parameter("embed.bias", {D});
      auto conv = b.conv2d(x, w, a.patch, 0);
      auto tokens_4d = b.add(conv, b.broadcast_to(bias, b.shape(conv)));
      const std::size_t T = b.shape(conv)[1] * b.shape(conv)[2];
      auto tokens = b.reshape(tokens_4d, {B * T, D});
      auto mixed = dense(b.relu(dense(tokens, "mix1", a.mixer_hidden)), "mix2", D);
      auto h = b.reshape(b.add(tokens, mixed), {B, T * D});
      return dense(h, "head", a.num_classes);
    }
  }
  throw ValidationError("unhandled architecture");
}

bool Model::has_tag(const std::string& tag) const {
  return std::find(tags.begin(), tags.end(), tag) != tags.end();
}

void Model::add_tag(const std::string& tag) {
  if (!has_tag(tag)) tags.push_back(tag);
}

std::shared_ptr<const ForwardGraph> forward_graph(const ArchSpec& arch, std::size_t batch) {
  static std::mutex mu;
  static std::unordered_map<std::string, std::shared_ptr<const ForwardGraph>> cache;
  const std::string key = to_json(arch).dump() + "#" + std::to_string(batch);
  std::lock_guard lock(mu);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  GraphBuilder b;
  auto x = b.input("x", {batch, arch.height, arch.width, arch.in_channels});
  auto logits = build_logits(b, arch, x);
  b.mark_output("logits", logits);
  auto fg = std::make_shared<const ForwardGraph>(ForwardGraph{b.build(), x, logits});
  cache.emplace(key, fg);
  return fg;
}

Model build_classifier(const ArchSpec& arch, std::uint64_t seed) {
  validate(arch);
  auto fg = forward_graph(arch, 1);
  Model m;
  m.arch = arch;
  m.graph = std::shared_ptr<const Graph>(fg, &fg->graph);
  Rng rng(seed);
  for (const auto& node : fg->graph.nodes()) {
    if (node.op != Op::Parameter) continue;
    const auto& s = node.shape;
    std::vector<double> v(shape_size(s), 0.0);
    const bool is_bias = node.name.ends_with(".bias");
    if (!is_bias) {
      // fan_in is every axis but the output one
      const std::size_t fan_in = shape_size(s) / s.back();
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (auto& x : v) x = rng.uniform(-bound, bound);
    }
    m.param_order.push_back(node.name);
    m.params.emplace(node.name, Tensor(s, std::move(v)));
  }
  m.metadata["init_scheme"] = kInitScheme;
  m.metadata["init_seed"] = seed;
  m.metadata["parameter_count"] = parameter_count(arch);
  return m;
}

int argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return static_cast<int>(best);
}

std::vector<Prediction> predict_batch(const Model& model, std::span<const Image> images) {
  const auto& a = model.arch;
  const Shape expect{a.height, a.width, a.in_channels};
  std::vector<Prediction> out;
  out.reserve(images.size());
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, images.size() - start);
    auto fg = forward_graph(a, n);
    std::vector<double> xs;
    xs.reserve(n * shape_size(expect));
    for (std::size_t i = 0; i < n; ++i) {
      const auto& img = images[start + i];
      if (img.shape() != expect)
        throw ShapeError("image shape " + shape_str(img.shape()) + " does not match model input " +
                         shape_str(expect));
      xs.insert(xs.end(), img.data().begin(), img.data().end());
    }
    Bindings bind = model.params;
    bind.insert_or_assign("x", Tensor({n, a.height, a.width, a.in_channels}, std::move(xs)));
    std::vector<NodeId> outs{fg->logits};
    auto logits = evaluate(fg->graph, bind, outs)[0];
    for (std::size_t i = 0; i < n; ++i) {
      Prediction p;
      p.logits.assign(logits.data().begin() + i * a.num_classes,
                      logits.data().begin() + (i + 1) * a.num_classes);
      p.label = argmax(p.logits);
      out.push_back(std::move(p));
    }
  }
  return out;
}

Prediction predict(const Model& model, const Image& image) {
  return predict_batch(model, std::span<const Image>(&image, 1))[0];
}

double accuracy(const Model& model, const Dataset& data) {
  if (data.empty()) throw ValidationError("accuracy of an empty dataset is undefined");
  std::vector<Image> images;
  images.reserve(data.size());
  for (const auto& it : data.items) images.push_back(it.image);
  auto preds = predict_batch(model, images);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i].label == data.items[i].label;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

void validate(const TrainConfig& c) {
  if (c.learning_rate < 0 || c.momentum < 0 || c.weight_decay < 0 || c.label_smoothing < 0 ||
      c.lr_decay_factor < 0 || c.lr_decay_every < 0)
    throw ValidationError("training hyperparameters must be nonnegative");
  if (c.epochs < 1) throw ValidationError("epochs must be at least 1");
  if (c.batch_size < 1) throw ValidationError("batch size must be at least 1");
  if (c.label_smoothing >= 1.0) throw ValidationError("label smoothing must be below 1");
}

json to_json(const TrainConfig& c) {
  return json{{"learning_rate", c.learning_rate},   {"momentum", c.momentum},
              {"epochs", c.epochs},                 {"batch_size", c.batch_size},
              {"weight_decay", c.weight_decay},     {"label_smoothing", c.label_smoothing},
              {"seed", c.seed},                     {"lr_decay_every", c.lr_decay_every},
              {"lr_decay_factor", c.lr_decay_factor}, {"flip", c.flip}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.momentum = j.value("momentum", c.momentum);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.label_smoothing = j.value("label_smoothing", c.label_smoothing);
  c.seed = j.value("seed", c.seed);
  c.lr_decay_every = j.value("lr_decay_every", c.lr_decay_every);
  c.lr_decay_factor = j.value("lr_decay_factor", c.lr_decay_factor);
  c.flip = j.value("flip", c.flip);
  validate(c);
  return c;
}

std::vector<double> smoothed_targets(int label, std::size_t classes, double smoothing) {
  std::vector<double> t(classes, smoothing / static_cast<double>(classes - 1));
  t[static_cast<std::size_t>(label)] = 1.0 - smoothing;
  return t;
}

TrainResult train_crossentropy(const Model& model, const Dataset& data, const TrainConfig& cfg) {
  const ArchSpec arch = model.arch;
  auto factory = [arch, &cfg](std::size_t batch) {
    GraphBuilder b;
    auto base = training::build_base_objective(b, arch, batch, cfg.weight_decay);
    return training::finish_objective(b, base, b.add(base.cce, base.decay), std::nullopt);
  };
  auto result = training::run(model, data, cfg, factory);
  result.model.add_tag("control");
  result.model.metadata["training"] = {{"routine", "crossentropy"}, {"config", to_json(cfg)}};
  return result;
}

void write_loss_trace_csv(const std::vector<EpochLoss>& trace, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "epoch,cce,alignment,decay,total\n";
  char buf[256];
  for (const auto& e : trace) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g\n", e.epoch, e.cce, e.alignment,
                  e.decay, e.total);
    out << buf;
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr char kMagic[8] = {'A', 'D', 'V', 'A', 'L', 'I', 'G', 'N'};

void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_le(const std::string& in, std::size_t pos, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= std::uint64_t(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}
}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  json params = json::array();
  for (const auto& name : model.param_order)
    params.push_back({{"name", name}, {"shape", model.params.at(name).shape()}});
  json header{{"arch", to_json(model.arch)},
              {"tags", model.tags},
              {"metadata", model.metadata},
              {"params", params}};
  const std::string text = header.dump();
  std::string out(kMagic, 8);
  put_le(out, kCheckpointVersion, 4);
  put_le(out, text.size(), 8);
  out += text;
  for (const auto& name : model.param_order)
    for (double v : model.params.at(name).data()) put_le(out, std::bit_cast<std::uint64_t>(v), 8);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write checkpoint " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError("short write to checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("missing checkpoint " + path.string());
  std::string in((std::istreambuf_iterator<char>(f)), {});
  const std::string where = " in checkpoint " + path.string();
  if (in.size() < 20 || in.compare(0, 8, std::string(kMagic, 8)) != 0)
    throw CheckpointError("bad magic" + where);
  if (get_le(in, 8, 4) != kCheckpointVersion) throw CheckpointError("unsupported version" + where);
  const std::uint64_t hlen = get_le(in, 12, 8);
  if (20 + hlen > in.size()) throw CheckpointError("truncated header" + where);
  Model m;
  std::size_t pos = 20 + hlen;
  try {
    json header = json::parse(in.substr(20, hlen));
    m.arch = arch_from_json(header.at("arch"));
    m.tags = header.at("tags").get<std::vector<std::string>>();
    m.metadata = header.at("metadata");
    for (const auto& p : header.at("params")) {
      auto name = p.at("name").get<std::string>();
      Shape shape = p.at("shape").get<Shape>();
      const std::size_t n = shape_size(shape);
      if (pos + 8 * n > in.size()) throw CheckpointError("truncated parameter data" + where);
      std::vector<double> v(n);
      for (std::size_t i = 0; i < n; ++i, pos += 8) v[i] = std::bit_cast<double>(get_le(in, pos, 8));
      m.param_order.push_back(name);
      m.params.emplace(name, Tensor(std::move(shape), std::move(v)));
    }
  } catch (const json::exception& e) {
    throw CheckpointError("corrupt header" + where + ": " + e.what());
  } catch (const ValidationError& e) {
    throw CheckpointError("corrupt data" + where + ": " + e.what());
  }
  if (pos != in.size()) throw CheckpointError("trailing bytes" + where);
  auto fg = forward_graph(m.arch, 1);
  if (fg->graph.parameter_names() != m.param_order)
    throw CheckpointError("parameters do not match the architecture" + where);
  for (const auto& name : m.param_order)
    if (m.params.at(name).shape() != fg->graph.node(*fg->graph.find_leaf(name)).shape)
      throw CheckpointError("parameter '" + name + "' has the wrong shape" + where);
  m.graph = std::shared_ptr<const Graph>(fg, &fg->graph);
  return m;
}

}  // namespace advalign
