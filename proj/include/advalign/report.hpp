#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "advalign/attacks.hpp"
#include "advalign/tolerance.hpp"

namespace advalign {

inline constexpr int kReportSchemaVersion = 1;

// One model under one attack: a single point of the accuracy/tolerance/alignment scatter.
struct ZooRecord {
  std::string model_id;
  std::string family;  // cnn | vit-like | hybrid | control | harmonized | adv-trained
  double accuracy = 0.0;
  double tolerance_l2 = 0.0;    // mean l2 norm of the minimal adversarial perturbation
  double tolerance_linf = 0.0;  // mean linf norm of the same perturbations
  double alignment = 0.0;       // mean Spearman rho against importance maps
  std::string norm;             // l2 | linf | cw
  std::optional<double> lambda1;
  std::optional<double> lambda2;
  std::uint64_t seed = 0;
  std::size_t measured = 0;  // images entering the tolerance mean
  std::size_t scored = 0;    // images entering the alignment mean

  bool operator==(const ZooRecord&) const = default;
};

void validate(const ZooRecord& r);
nlohmann::json to_json(const ZooRecord& r);
ZooRecord zoo_record_from_json(const nlohmann::json& j);

// Per-image outcome behind a record.
struct ImageDetail {
  std::string model_id;
  std::string norm;
  std::string image_id;
  int label = 0;
  bool included = false;
  std::string exclusion_reason;
  double epsilon = 0.0;  // final search radius (0 for cw)
  double l2_distortion = 0.0;
  double linf_distortion = 0.0;
  int iterations = 0;
  std::optional<double> rho;

  bool operator==(const ImageDetail&) const = default;
};

nlohmann::json to_json(const ImageDetail& d);
ImageDetail image_detail_from_json(const nlohmann::json& j);

// A zoo member: a checkpoint on disk, or an untrained build from an architecture.
struct ModelEntry {
  std::string id;
  std::optional<std::filesystem::path> checkpoint;
  std::optional<ArchSpec> arch;
  std::uint64_t init_seed = 0;
};

struct RunConfig {
  std::filesystem::path dataset;
  std::vector<ModelEntry> models;
  ToleranceConfig tolerance;                    // l2 search
  std::optional<ToleranceConfig> tolerance_linf;  // defaults to `tolerance` with the linf norm
  CwConfig cw;
  std::vector<std::string> norms{"l2"};  // subset of {l2, linf, cw}
  std::filesystem::path output;
  std::uint64_t seed = 0;
  std::size_t parallelism = 1;
};

void validate(const RunConfig& cfg);
nlohmann::json to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base = {});

// Family from training tags first, then architecture kind.
std::string family_of(const Model& model);

struct ZooFailure {
  std::string model_id;
  std::string norm;  // empty when the model itself could not be loaded
  std::string message;
};

struct ZooResult {
  std::vector<ZooRecord> records;  // sorted by (model_id, norm)
  std::vector<ImageDetail> details;
  std::vector<ZooFailure> failures;
  std::size_t computed = 0;  // pairs evaluated in this call
  std::size_t resumed = 0;   // pairs read back from the journal
};

// Evaluates one model under one norm on `data` (already loaded).
std::pair<ZooRecord, std::vector<ImageDetail>> evaluate_model(const Model& model,
                                                              const std::string& model_id,
                                                              const Dataset& data,
                                                              const std::string& norm,
                                                              const RunConfig& cfg);

// Journaled zoo evaluation. Each finished (model, norm) pair is written
// atomically to <output>/records/<model>__<norm>.json; pairs whose journal
// entry matches the current inputs are read back instead of recomputed.
ZooResult run_zoo_evaluation(const RunConfig& cfg);

struct Correlation {
  double rho = 0.0;
  std::size_t n = 0;
};

// Spearman rho between two record columns: accuracy, tolerance_l2,
// tolerance_linf, alignment, lambda1, lambda2.
Correlation correlate(const std::vector<ZooRecord>& records, const std::string& x_field,
                      const std::string& y_field);

struct TTest {
  double t = 0.0;
  double dof = 0.0;
};

// Welch's t with Welch-Satterthwaite degrees of freedom.
TTest two_sample_t(std::span<const double> a, std::span<const double> b);

nlohmann::json report_summary(const std::vector<ZooRecord>& records);

// Writes report.csv, report.json (records + summary) and details.csv.
void emit_report(const std::vector<ZooRecord>& records, const std::vector<ImageDetail>& details,
                 const std::filesystem::path& dir);

std::string records_csv(const std::vector<ZooRecord>& records);
std::string details_csv(const std::vector<ImageDetail>& details);
std::vector<ZooRecord> records_from_csv(const std::string& csv);

// Writes bytes to a sibling temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

}  // namespace advalign
