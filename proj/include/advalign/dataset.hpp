#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "advalign/errors.hpp"
#include "advalign/tensor.hpp"

namespace advalign {

// Image: [H, W, C] tensor. ImportanceMap: [H, W] nonnegative tensor.
using Image = Tensor;
using ImportanceMap = Tensor;

struct PixelRange {
  double lo = 0.0;
  double hi = 255.0;
  bool operator==(const PixelRange&) const = default;
};

struct Item {
  std::string id;
  Image image;
  int label = 0;
  std::optional<ImportanceMap> map;
  bool operator==(const Item&) const = default;
};

struct Dataset {
  std::string split;  // "train" or "test"
  PixelRange pixel_range;
  int num_classes = 0;
  std::vector<Item> items;

  bool empty() const noexcept { return items.empty(); }
  std::size_t size() const noexcept { return items.size(); }
  bool operator==(const Dataset&) const = default;
};

// Checks unique ids, label bounds, consistent image shapes and map sizes.
void validate_dataset(const Dataset& d);

enum class PatchPlacement { Center, Random };

struct SyntheticSpec {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 1;
  int num_classes = 4;
  std::size_t train_per_class = 500;
  std::size_t test_per_class = 100;
  double noise = 0.1;   // background/patch noise amplitude (uniform +-noise)
  double signal = 0.3;  // class pattern amplitude
  std::size_t patch = 10;
  PatchPlacement placement = PatchPlacement::Random;
  std::uint64_t seed = 0;
};

struct SyntheticData {
  Dataset train;
  Dataset test;
  // Patch top-left corner per item id, for audit and oracles.
  std::vector<std::pair<std::size_t, std::size_t>> train_patch_origin;
  std::vector<std::pair<std::size_t, std::size_t>> test_patch_origin;
};

// Images are mid-gray background noise plus a class-specific sign pattern
// inside a square diagnostic patch; each map is a binomially smoothed patch
// indicator scaled to [0, 1], positive exactly on the patch when the patch
// is at least 5 wide. Pixel range is [0, 1].
SyntheticData generate_synthetic_dataset(const SyntheticSpec& spec);

// Binary patch indicator used as ground truth for map sanity checks.
ImportanceMap patch_indicator(std::size_t height, std::size_t width, std::size_t row,
                              std::size_t col, std::size_t patch);

inline constexpr int kDatasetSchemaVersion = 1;

class DatasetIoError : public Error {
 public:
  enum class Kind { MissingFile, ChecksumMismatch, SchemaVersion, MissingMap, Corrupt };
  DatasetIoError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

// One directory per dataset: manifest.json (sorted keys) plus raw
// little-endian float64 blobs with an 8-byte shape header.
void save_dataset(const Dataset& d, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

// Blob helpers, shared with checkpoints and tests.
std::vector<unsigned char> encode_blob(const Tensor& t);
Tensor decode_blob(const std::vector<unsigned char>& bytes, const std::string& what);
std::string sha256_hex(const std::vector<unsigned char>& bytes);

Dataset left_right_flip(const Dataset& d);
Item left_right_flip(const Item& item);

}  // namespace advalign
