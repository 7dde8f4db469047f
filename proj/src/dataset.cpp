#include "advalign/dataset.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "advalign/pyramid.hpp"
#include "advalign/rng.hpp"
#include "json.hpp"

namespace advalign {

namespace fs = std::filesystem;
using json = nlohmann::json;

void validate_dataset(const Dataset& d) {
  if (d.num_classes < 2) throw ValidationError("dataset needs at least two classes");
  if (!(d.pixel_range.lo < d.pixel_range.hi)) throw ValidationError("invalid pixel range");
  std::set<std::string> ids;
  const Shape* first = nullptr;
  for (const auto& it : d.items) {
    if (!ids.insert(it.id).second) throw ValidationError("duplicate item id '" + it.id + "'");
    if (it.label < 0 || it.label >= d.num_classes)
      throw ValidationError("item '" + it.id + "' has out-of-range label");
    if (it.image.rank() != 3) throw ShapeError("item '" + it.id + "' image must be [H,W,C]");
    if (!first) first = &it.image.shape();
    if (it.image.shape() != *first) throw ShapeError("item '" + it.id + "' has a different shape");
    if (it.map) {
      const auto& s = it.image.shape();
      if (it.map->shape() != Shape{s[0], s[1]})
        throw ShapeError("item '" + it.id + "' map does not match image H x W");
      for (double v : it.map->data())
        if (v < 0.0) throw ValidationError("item '" + it.id + "' map has negative weights");
    }
  }
}

ImportanceMap patch_indicator(std::size_t height, std::size_t width, std::size_t row,
                              std::size_t col, std::size_t patch) {
  std::vector<double> v(height * width, 0.0);
  for (std::size_t r = row; r < row + patch; ++r)
    for (std::size_t c = col; c < col + patch; ++c) v[r * width + c] = 1.0;
  return Tensor({height, width}, std::move(v));
}

namespace {

std::string make_id(const std::string& split, std::size_t i) {
  std::ostringstream os;
  os << split << '-' << std::setw(6) << std::setfill('0') << i;
  return os.str();
}

}  // namespace

SyntheticData generate_synthetic_dataset(const SyntheticSpec& spec) {
  if (spec.num_classes < 2) throw ValidationError("num_classes must be at least 2");
  if (spec.height == 0 || spec.width == 0 || spec.channels == 0)
    throw ValidationError("image dimensions must be positive");
  if (spec.patch == 0 || spec.patch > spec.height || spec.patch > spec.width)
    throw ValidationError("infeasible patch placement: patch " + std::to_string(spec.patch) +
                          " does not fit a " + std::to_string(spec.height) + "x" +
                          std::to_string(spec.width) + " image");
  if (!(spec.noise >= 0.0 && spec.noise < spec.signal))
    throw ValidationError("noise amplitude must be nonnegative and below the signal amplitude");
  if (spec.signal + spec.noise > 0.5)
    throw ValidationError("signal + noise must stay within the [0, 1] pixel range around 0.5");

  Rng rng(spec.seed);
  const std::size_t H = spec.height, W = spec.width, C = spec.channels, P = spec.patch;
  const std::size_t K = static_cast<std::size_t>(spec.num_classes);

  // Class sign patterns, pairwise distinct.
  std::vector<std::vector<double>> patterns;
  while (patterns.size() < K) {
    std::vector<double> p(P * P * C);
    for (auto& v : p) v = rng.uniform() < 0.5 ? -1.0 : 1.0;
    if (std::find(patterns.begin(), patterns.end(), p) == patterns.end())
      patterns.push_back(std::move(p));
  }

  auto make_split = [&](const std::string& split, std::size_t per_class,
                        std::vector<std::pair<std::size_t, std::size_t>>& origins) {
    Dataset d;
    d.split = split;
    d.pixel_range = {0.0, 1.0};
    d.num_classes = spec.num_classes;
    const std::size_t n = per_class * K;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t label = i % K;
      std::size_t row = (H - P) / 2, col = (W - P) / 2;
      if (spec.placement == PatchPlacement::Random) {
        row = rng.below(H - P + 1);
        col = rng.below(W - P + 1);
      }
      std::vector<double> px(H * W * C);
      for (auto& v : px) v = 0.5 + rng.uniform(-spec.noise, spec.noise);
      for (std::size_t r = 0; r < P; ++r)
        for (std::size_t c = 0; c < P; ++c)
          for (std::size_t ch = 0; ch < C; ++ch)
            px[((row + r) * W + col + c) * C + ch] += spec.signal * patterns[label][(r * P + c) * C + ch];
      // Blurring the patch core (shrunk by the kernel radius where the patch
      // allows it) keeps the smoothed map's support on the patch.
      const std::size_t e = std::min<std::size_t>(2, (P - 1) / 2);
      auto phi = binomial_blur(patch_indicator(H, W, row + e, col + e, P - 2 * e));
      double mx = 0.0;
      for (double v : phi.data()) mx = std::max(mx, v);
      for (double& v : phi.data()) v /= mx;
      d.items.push_back(Item{make_id(split, i), Tensor({H, W, C}, std::move(px)),
                             static_cast<int>(label), std::move(phi)});
      origins.emplace_back(row, col);
    }
    return d;
  };

  SyntheticData out;
  out.train = make_split("train", spec.train_per_class, out.train_patch_origin);
  out.test = make_split("test", spec.test_per_class, out.test_patch_origin);
  return out;
}

// ---------------------------------------------------------------------------
// Blob and manifest I/O

std::vector<unsigned char> encode_blob(const Tensor& t) {
  if (t.rank() > 4) throw ShapeError("blobs support at most rank 4");
  std::vector<unsigned char> out(8 + 8 * t.size(), 0);
  for (std::size_t i = 0; i < t.rank(); ++i) {
    if (t.shape()[i] > 0xFFFF) throw ShapeError("blob dimension exceeds 65535");
    out[2 * i] = static_cast<unsigned char>(t.shape()[i] & 0xFF);
    out[2 * i + 1] = static_cast<unsigned char>(t.shape()[i] >> 8);
  }
  for (std::size_t i = 0; i < t.size(); ++i) {
    auto bits = std::bit_cast<std::uint64_t>(t[i]);
    for (int b = 0; b < 8; ++b) out[8 + 8 * i + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  return out;
}

Tensor decode_blob(const std::vector<unsigned char>& bytes, const std::string& what) {
  using Kind = DatasetIoError::Kind;
  if (bytes.size() < 8) throw DatasetIoError(Kind::Corrupt, "blob too short: " + what);
  Shape shape;
  for (int i = 0; i < 4; ++i) {
    std::size_t d = bytes[2 * i] | (std::size_t(bytes[2 * i + 1]) << 8);
    if (d == 0) break;
    shape.push_back(d);
  }
  if (shape.empty() || bytes.size() != 8 + 8 * shape_size(shape))
    throw DatasetIoError(Kind::Corrupt, "blob size does not match its shape header: " + what);
  std::vector<double> v(shape_size(shape));
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= std::uint64_t(bytes[8 + 8 * i + b]) << (8 * b);
    v[i] = std::bit_cast<double>(bits);
  }
  try {
    return Tensor(std::move(shape), std::move(v));
  } catch (const Error&) {
    throw DatasetIoError(Kind::Corrupt, "blob holds non-finite values: " + what);
  }
}

std::string sha256_hex(const std::vector<unsigned char>& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

namespace {

std::vector<unsigned char> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in)
    throw DatasetIoError(DatasetIoError::Kind::MissingFile, "missing file: " + p.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + p.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write to " + p.string());
}

}  // namespace

void save_dataset(const Dataset& d, const fs::path& dir) {
  validate_dataset(d);
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "maps");
  json items = json::array();
  for (const auto& it : d.items) {
    const std::string image_rel = "images/" + it.id + ".bin";
    auto bytes = encode_blob(it.image);
    write_file(dir / image_rel, bytes);
    json entry{{"id", it.id}, {"label", it.label}, {"image_path", image_rel},
               {"sha256", sha256_hex(bytes)}};
    if (it.map) {
      const std::string map_rel = "maps/" + it.id + ".bin";
      write_file(dir / map_rel, encode_blob(*it.map));
      entry["map_path"] = map_rel;
    }
    items.push_back(std::move(entry));
  }
  json manifest{{"schema_version", kDatasetSchemaVersion},
                {"pixel_range", {d.pixel_range.lo, d.pixel_range.hi}},
                {"split", d.split},
                {"num_classes", d.num_classes},
                {"items", std::move(items)}};
  const std::string text = manifest.dump(1) + "\n";
  write_file(dir / "manifest.json", std::vector<unsigned char>(text.begin(), text.end()));
}

Dataset load_dataset(const fs::path& dir) {
  using Kind = DatasetIoError::Kind;
  auto raw = read_file(dir / "manifest.json");
  json manifest;
  try {
    manifest = json::parse(raw.begin(), raw.end());
  } catch (const json::exception& e) {
    throw DatasetIoError(Kind::Corrupt, "manifest is not valid JSON: " + std::string(e.what()));
  }
  if (!manifest.contains("schema_version") || manifest["schema_version"] != kDatasetSchemaVersion)
    throw DatasetIoError(Kind::SchemaVersion,
                         "unsupported manifest schema_version (expected " +
                             std::to_string(kDatasetSchemaVersion) + ")");
  Dataset d;
  try {
    d.split = manifest.value("split", "");
    d.pixel_range = {manifest.at("pixel_range").at(0).get<double>(),
                     manifest.at("pixel_range").at(1).get<double>()};
    d.num_classes = manifest.at("num_classes").get<int>();
    for (const auto& e : manifest.at("items")) {
      Item it;
      it.id = e.at("id").get<std::string>();
      it.label = e.at("label").get<int>();
      const auto image_path = dir / e.at("image_path").get<std::string>();
      auto bytes = read_file(image_path);
      if (sha256_hex(bytes) != e.at("sha256").get<std::string>())
        throw DatasetIoError(Kind::ChecksumMismatch, "checksum mismatch: " + image_path.string());
      it.image = decode_blob(bytes, image_path.string());
      if (e.contains("map_path")) {
        const auto map_path = dir / e.at("map_path").get<std::string>();
        if (!fs::exists(map_path))
          throw DatasetIoError(Kind::MissingMap, "missing map for item " + it.id + ": " +
                                                     map_path.string());
        it.map = decode_blob(read_file(map_path), map_path.string());
      }
      d.items.push_back(std::move(it));
    }
  } catch (const json::exception& e) {
    throw DatasetIoError(Kind::Corrupt, "malformed manifest: " + std::string(e.what()));
  }
  validate_dataset(d);
  return d;
}

Item left_right_flip(const Item& item) {
  Item out = item;
  const auto& s = item.image.shape();
  const std::size_t H = s[0], W = s[1], C = s[2];
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c)
      for (std::size_t ch = 0; ch < C; ++ch)
        out.image[(r * W + c) * C + ch] = item.image[(r * W + (W - 1 - c)) * C + ch];
  if (item.map)
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c) (*out.map)[r * W + c] = (*item.map)[r * W + W - 1 - c];
  return out;
}

Dataset left_right_flip(const Dataset& d) {
  Dataset out = d;
  for (auto& it : out.items) it = left_right_flip(it);
  return out;
}

}  // namespace advalign
