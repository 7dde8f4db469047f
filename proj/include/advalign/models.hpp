#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "advalign/dataset.hpp"
#include "advalign/graph.hpp"
#include "json.hpp"

namespace advalign {

enum class ArchKind { Mlp, SmallCnn, TinyVit };

std::string to_string(ArchKind kind);
ArchKind arch_kind_from_string(const std::string& s);

// Small reference classifiers.
//  mlp:      flatten -> [dense -> relu] per hidden width -> dense
//  small-cnn: [3x3 same conv -> relu -> 2x2 max-pool] per channel count -> dense
//  tiny-vit: patch-embedding conv (patch x patch, stride patch) -> per-token
//            channel-mixing MLP with a residual -> dense over all tokens
// An mlp with no hidden widths is a linear classifier.
struct ArchSpec {
  ArchKind kind = ArchKind::Mlp;
  std::vector<std::size_t> hidden;    // mlp
  std::vector<std::size_t> channels;  // small-cnn
  std::size_t patch = 4;              // tiny-vit
  std::size_t embed_dim = 8;          // tiny-vit
  std::size_t mixer_hidden = 16;      // tiny-vit
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t in_channels = 1;
  std::size_t num_classes = 4;

  bool operator==(const ArchSpec&) const = default;
};

void validate(const ArchSpec& arch);
std::size_t parameter_count(const ArchSpec& arch);
nlohmann::json to_json(const ArchSpec& arch);
ArchSpec arch_from_json(const nlohmann::json& j);

// Declares the architecture's parameters on `b` and returns the logits node
// [batch, num_classes] for the input node x [batch, H, W, C].
NodeId build_logits(GraphBuilder& b, const ArchSpec& arch, NodeId x);

struct Model {
  ArchSpec arch;
  Bindings params;                       // name -> tensor
  std::vector<std::string> param_order;  // declaration order
  std::vector<std::string> tags;
  nlohmann::json metadata = nlohmann::json::object();
  std::shared_ptr<const Graph> graph;  // batch-1 forward, input "x", output "logits"

  bool has_tag(const std::string& tag) const;
  void add_tag(const std::string& tag);
};

inline constexpr const char* kInitScheme = "uniform(+-1/sqrt(fan_in)) weights, zero biases";

Model build_classifier(const ArchSpec& arch, std::uint64_t seed);

// Shared forward graph for `batch` images, cached per (arch, batch).
struct ForwardGraph {
  Graph graph;
  NodeId input;
  NodeId logits;
};
std::shared_ptr<const ForwardGraph> forward_graph(const ArchSpec& arch, std::size_t batch);

struct Prediction {
  std::vector<double> logits;
  int label = 0;  // argmax, lowest index on ties
};

int argmax(std::span<const double> v);

Prediction predict(const Model& model, const Image& image);
std::vector<Prediction> predict_batch(const Model& model, std::span<const Image> images);

double accuracy(const Model& model, const Dataset& data);

struct TrainConfig {
  double learning_rate = 0.05;
  double momentum = 0.9;
  int epochs = 10;
  std::size_t batch_size = 32;
  double weight_decay = 0.0;     // lambda2 * sum(theta^2)
  double label_smoothing = 0.0;
  std::uint64_t seed = 0;
  int lr_decay_every = 0;        // epochs; 0 disables step decay
  double lr_decay_factor = 0.1;
  bool flip = false;             // random left-right flips
};

void validate(const TrainConfig& cfg);
nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Targets for label smoothing s: 1-s on the label, s/(K-1) elsewhere.
std::vector<double> smoothed_targets(int label, std::size_t classes, double smoothing);

struct EpochLoss {
  int epoch = 0;
  double cce = 0.0;
  double alignment = 0.0;
  double decay = 0.0;
  double total = 0.0;
};

struct TrainResult {
  Model model;
  std::vector<EpochLoss> trace;
};

TrainResult train_crossentropy(const Model& model, const Dataset& data, const TrainConfig& cfg);

void write_loss_trace_csv(const std::vector<EpochLoss>& trace, const std::filesystem::path& path);

// Checkpoint: "ADVALIGN" magic, u32 version, u64 header length, canonical
// JSON header, then little-endian float64 parameter data in declared order.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace advalign
