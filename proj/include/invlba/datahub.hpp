#pragma once

// Labeled image datasets: synthesis, folder ingestion, class partitioning,
// poison-target selection and the line-delimited manifest format.

#include <filesystem>
#include <map>
#include <optional>
#include <sstream>

#include "invlba/core.hpp"

namespace invlba {

enum class Provenance { Original, Generated, Poisoned };

inline std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::Original: return "original";
    case Provenance::Generated: return "generated";
    case Provenance::Poisoned: return "poisoned";
  }
  throw ContractError("bad provenance");
}
inline Provenance provenance_from_string(const std::string& s) {
  if (s == "original") return Provenance::Original;
  if (s == "generated") return Provenance::Generated;
  if (s == "poisoned") return Provenance::Poisoned;
  throw IngestionError("unknown provenance: " + s);
}

struct Item {
  Tensor image;  // CHW in [0,1]
  int label = 0;
  Provenance prov = Provenance::Original;
  int source_index = -1;  // originating original item, -1 = none
};

struct LabeledDataset {
  std::vector<Item> items;
  int num_classes = 0;
  std::string split = "train";
  std::optional<int> target_class;  // set on poisoned builds

  int size() const { return static_cast<int>(items.size()); }

  void validate() const {
    if (num_classes <= 0) throw ContractError("dataset: num_classes must be positive");
    const std::vector<int>* shape = nullptr;
    for (size_t i = 0; i < items.size(); ++i) {
      const Item& it = items[i];
      if (it.label < 0 || it.label >= num_classes)
        throw ContractError("dataset: label out of range at item " + std::to_string(i));
      if (!shape) shape = &it.image.shape;
      if (it.image.shape != *shape)
        throw ContractError("dataset: inconsistent image shape at item " + std::to_string(i));
      for (Scalar x : it.image.v)
        if (!(x >= 0.0 && x <= 1.0))
          throw ContractError("dataset: pixel outside [0,1] at item " + std::to_string(i));
      if (it.prov == Provenance::Poisoned) {
        if (!target_class || it.label != *target_class)
          throw ContractError("dataset: poisoned item with non-target label at item " +
                              std::to_string(i));
      }
      if (it.prov != Provenance::Original) {
        if (it.source_index < 0 || it.source_index >= static_cast<int>(items.size()))
          throw ContractError("dataset: dangling source_index at item " + std::to_string(i));
        if (items[static_cast<size_t>(it.source_index)].prov != Provenance::Original)
          throw ContractError("dataset: source_index does not point at an original, item " +
                              std::to_string(i));
      }
    }
  }

  std::vector<int> image_shape() const {
    if (items.empty()) throw ContractError("dataset: empty");
    return items[0].image.shape;
  }
};

// ---------------------------------------------------------------------------
// Synthetic data

struct ClassSignal {
  double blob_radius_frac = 0.17;  // gaussian blob radius as fraction of resolution
  double elongation = 2.2;         // anisotropy of the blob along its class orientation
  double jitter_px = 1.2;          // per-item center jitter
  double amplitude_min = 0.75;     // per-item amplitude drawn from [amplitude_min, 1]
  double background = 0.10;
};

struct SynthSpec {
  int num_classes = 4;
  int per_class = 25;
  int resolution = 16;
  int channels = 3;
  ClassSignal class_signal;
  double noise_level = 0.05;
  uint64_t seed = 0;

  void validate() const {
    if (num_classes < 1) throw ConfigError("synth spec: num_classes must be >= 1");
    if (per_class < 2) throw ConfigError("synth spec: per_class must be >= 2");
    if (resolution < 8) throw ConfigError("synth spec: resolution must be >= 8");
    if (channels != 1 && channels != 3) throw ConfigError("synth spec: channels must be 1 or 3");
    if (noise_level < 0) throw ConfigError("synth spec: noise_level must be >= 0");
  }
};

// Per-class geometry: blob centers spread on a circle (quadrants for C<=4),
// orientation and channel mix distinct per class.
inline Tensor synth_image(const SynthSpec& spec, int cls, Rng& rng) {
  const int R = spec.resolution;
  const ClassSignal& cs = spec.class_signal;
  double angle = 2.0 * 3.14159265358979323846 * (cls + 0.5) / spec.num_classes;
  double cx = R / 2.0 + 0.26 * R * std::cos(angle) + rng.uniform(-cs.jitter_px, cs.jitter_px);
  double cy = R / 2.0 + 0.26 * R * std::sin(angle) + rng.uniform(-cs.jitter_px, cs.jitter_px);
  double theta = 3.14159265358979323846 * cls / spec.num_classes;
  double amp = rng.uniform(cs.amplitude_min, 1.0);
  double r0 = cs.blob_radius_frac * R;
  double ct = std::cos(theta), st = std::sin(theta);

  std::vector<double> chw(static_cast<size_t>(spec.channels), 1.0);
  for (int k = 0; k < spec.channels; ++k) {
    chw[static_cast<size_t>(k)] =
        0.55 + 0.45 * std::cos(2.0 * 3.14159265358979323846 *
                               (static_cast<double>(cls) / spec.num_classes + k / 3.0));
    chw[static_cast<size_t>(k)] = std::max(0.15, chw[static_cast<size_t>(k)]);
  }

  Tensor img({spec.channels, R, R});
  for (int c = 0; c < spec.channels; ++c)
    for (int y = 0; y < R; ++y)
      for (int x = 0; x < R; ++x) {
        double dx = x - cx, dy = y - cy;
        double u = (ct * dx + st * dy) / (r0 * cs.elongation);
        double w = (-st * dx + ct * dy) / r0;
        double blob = amp * std::exp(-0.5 * (u * u + w * w));
        double val = cs.background + blob * chw[static_cast<size_t>(c)] +
                     spec.noise_level * rng.normal();
        img.at(c, y, x) = std::min(1.0, std::max(0.0, val));
      }
  return img;
}

inline LabeledDataset synth_dataset(const SynthSpec& spec) {
  spec.validate();
  LabeledDataset ds;
  ds.num_classes = spec.num_classes;
  Rng rng(derive_seed(spec.seed, "synth"));
  for (int cls = 0; cls < spec.num_classes; ++cls)
    for (int i = 0; i < spec.per_class; ++i) {
      Item it;
      it.image = synth_image(spec, cls, rng);
      it.label = cls;
      it.prov = Provenance::Original;
      ds.items.push_back(std::move(it));
    }
  return ds;
}

// ---------------------------------------------------------------------------
// Folder ingestion: <root>/<class_name>/<file.ppm|pgm>, classes in sorted
// name order. Binary PPM (P6) and PGM (P5) are accepted.

namespace detail {

inline Tensor decode_pnm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IngestionError("cannot open image: " + path);
  std::string magic;
  f >> magic;
  if (magic != "P5" && magic != "P6") throw IngestionError("undecodable image (not P5/P6): " + path);
  auto next_int = [&]() {
    int v;
    // skip whitespace and '#' comments
    while (true) {
      int c = f.peek();
      if (c == '#') {
        std::string line;
        std::getline(f, line);
      } else if (std::isspace(c)) {
        f.get();
      } else {
        break;
      }
    }
    if (!(f >> v)) throw IngestionError("undecodable image header: " + path);
    return v;
  };
  int w = next_int(), h = next_int(), maxv = next_int();
  f.get();  // single whitespace after header
  if (w <= 0 || h <= 0 || maxv <= 0 || maxv > 255)
    throw IngestionError("undecodable image header: " + path);
  int ch = magic == "P6" ? 3 : 1;
  std::vector<unsigned char> raw(static_cast<size_t>(w) * h * ch);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!f) throw IngestionError("undecodable image data (truncated): " + path);
  Tensor img({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        unsigned char b = ch == 3 ? raw[(static_cast<size_t>(y) * w + x) * 3 + c]
                                  : raw[static_cast<size_t>(y) * w + x];
        img.at(c, y, x) = static_cast<double>(b) / maxv;
      }
  return img;
}

inline Tensor resize_bilinear(const Tensor& img, int out_h, int out_w) {
  int C = img.shape[0], H = img.shape[1], W = img.shape[2];
  if (H == out_h && W == out_w) return img;
  Tensor out({C, out_h, out_w});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < out_h; ++y)
      for (int x = 0; x < out_w; ++x) {
        double sy = (y + 0.5) * H / out_h - 0.5;
        double sx = (x + 0.5) * W / out_w - 0.5;
        int y0 = std::clamp(static_cast<int>(std::floor(sy)), 0, H - 1);
        int x0 = std::clamp(static_cast<int>(std::floor(sx)), 0, W - 1);
        int y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
        double fy = std::clamp(sy - y0, 0.0, 1.0), fx = std::clamp(sx - x0, 0.0, 1.0);
        double v = (1 - fy) * ((1 - fx) * img.at(c, y0, x0) + fx * img.at(c, y0, x1)) +
                   fy * ((1 - fx) * img.at(c, y1, x0) + fx * img.at(c, y1, x1));
        out.at(c, y, x) = std::min(1.0, std::max(0.0, v));
      }
  return out;
}

}  // namespace detail

inline LabeledDataset load_image_folder(const std::string& root, int resolution, int num_classes) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw IngestionError("not a directory: " + root);
  std::vector<std::string> class_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) class_dirs.push_back(e.path().filename().string());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (static_cast<int>(class_dirs.size()) != num_classes)
    throw IngestionError("class count mismatch in " + root + ": found " +
                         std::to_string(class_dirs.size()) + ", expected " +
                         std::to_string(num_classes));

  LabeledDataset ds;
  ds.num_classes = num_classes;
  for (int cls = 0; cls < num_classes; ++cls) {
    fs::path dir = fs::path(root) / class_dirs[static_cast<size_t>(cls)];
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file()) files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw IngestionError("empty class directory: " + dir.string());
    for (const auto& f : files) {
      Item it;
      it.image = detail::resize_bilinear(detail::decode_pnm(f), resolution, resolution);
      it.label = cls;
      ds.items.push_back(std::move(it));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Set algebra

inline std::vector<LabeledDataset> partition_by_class(const LabeledDataset& ds) {
  std::vector<LabeledDataset> parts(static_cast<size_t>(ds.num_classes));
  for (auto& p : parts) {
    p.num_classes = ds.num_classes;
    p.split = ds.split;
    p.target_class = ds.target_class;
  }
  for (const auto& it : ds.items) parts[static_cast<size_t>(it.label)].items.push_back(it);
  return parts;
}

// Deterministic index selection used by poison-target sampling. `count`
// distinct indices into [0, n), uniform, sorted.
inline std::vector<int> select_uniform_indices(int n, int count, uint64_t seed) {
  Rng rng(derive_seed(seed, "poison-select"));
  return rng.sample_without_replacement(n, count);
}

// Fraction-of-target-class semantics: the selected count is
// round(alpha * (|gen_c| + |orig_c|)), drawn from the generated pool only.
inline std::vector<int> sample_poison_targets(const LabeledDataset& gen_c,
                                              const LabeledDataset& orig_c, double alpha,
                                              uint64_t seed) {
  int ngen = gen_c.size(), norig = orig_c.size();
  if (alpha < 0) throw ContractError("sample_poison_targets: alpha must be >= 0");
  double max_alpha = static_cast<double>(ngen) / (ngen + norig);
  int count = round_half_up(alpha * (ngen + norig));
  if (count > ngen) {
    std::ostringstream os;
    os << "sample_poison_targets: alpha " << alpha << " infeasible, maximum is " << max_alpha;
    throw InfeasibilityError(os.str());
  }
  return select_uniform_indices(ngen, count, seed);
}

// ---------------------------------------------------------------------------
// Manifest: meta.json + manifest.jsonl + images.f64 in one directory.
// Lines are built by hand so field order and bytes are stable.

inline void save_manifest(const LabeledDataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  auto shape = ds.image_shape();

  {
    std::ofstream meta(fs::path(dir) / "meta.json");
    if (!meta) throw IoError("cannot write meta.json in " + dir);
    meta << "{\n  \"version\": 1,\n  \"num_classes\": " << ds.num_classes << ",\n  \"split\": \""
         << ds.split << "\",\n  \"target_class\": "
         << (ds.target_class ? std::to_string(*ds.target_class) : std::string("null"))
         << ",\n  \"items\": " << ds.size() << ",\n  \"image_shape\": [" << shape[0] << ", "
         << shape[1] << ", " << shape[2] << "]\n}\n";
  }
  {
    std::ofstream man(fs::path(dir) / "manifest.jsonl");
    if (!man) throw IoError("cannot write manifest.jsonl in " + dir);
    for (int i = 0; i < ds.size(); ++i) {
      const Item& it = ds.items[static_cast<size_t>(i)];
      man << "{\"i\": " << i << ", \"label\": " << it.label << ", \"provenance\": \""
          << to_string(it.prov) << "\", \"source_index\": " << it.source_index
          << ", \"split\": \"" << ds.split << "\", \"ref\": \"images.f64#" << i << "\"}\n";
    }
  }
  {
    std::ofstream img(fs::path(dir) / "images.f64", std::ios::binary);
    if (!img) throw IoError("cannot write images.f64 in " + dir);
    for (const auto& it : ds.items)
      img.write(reinterpret_cast<const char*>(it.image.v.data()),
                static_cast<std::streamsize>(it.image.v.size() * sizeof(Scalar)));
  }
}

inline LabeledDataset load_manifest(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream meta(fs::path(dir) / "meta.json");
  if (!meta) throw IoError("cannot read meta.json in " + dir);
  std::string meta_text((std::istreambuf_iterator<char>(meta)), std::istreambuf_iterator<char>());

  auto grab_int = [&](const std::string& key) -> long {
    auto pos = meta_text.find("\"" + key + "\"");
    if (pos == std::string::npos) throw IoError("meta.json missing key " + key);
    pos = meta_text.find(':', pos);
    return std::stol(meta_text.substr(pos + 1));
  };
  LabeledDataset ds;
  ds.num_classes = static_cast<int>(grab_int("num_classes"));
  int n = static_cast<int>(grab_int("items"));
  {
    auto pos = meta_text.find("\"target_class\"");
    pos = meta_text.find(':', pos);
    auto val = meta_text.substr(pos + 1, meta_text.find_first_of(",\n", pos) - pos - 1);
    if (val.find("null") == std::string::npos) ds.target_class = std::stoi(val);
  }
  {
    auto pos = meta_text.find("\"split\"");
    pos = meta_text.find(':', pos);
    auto q1 = meta_text.find('"', pos);
    auto q2 = meta_text.find('"', q1 + 1);
    ds.split = meta_text.substr(q1 + 1, q2 - q1 - 1);
  }
  std::vector<int> shape(3);
  {
    auto pos = meta_text.find("\"image_shape\"");
    pos = meta_text.find('[', pos);
    std::sscanf(meta_text.c_str() + pos, "[%d, %d, %d]", &shape[0], &shape[1], &shape[2]);
  }

  std::ifstream man(fs::path(dir) / "manifest.jsonl");
  if (!man) throw IoError("cannot read manifest.jsonl in " + dir);
  std::ifstream img(fs::path(dir) / "images.f64", std::ios::binary);
  if (!img) throw IoError("cannot read images.f64 in " + dir);

  std::string line;
  while (std::getline(man, line)) {
    if (line.empty()) continue;
    Item it;
    auto find_int = [&](const char* key) -> int {
      auto pos = line.find(key);
      if (pos == std::string::npos) throw IoError("manifest line missing " + std::string(key));
      pos = line.find(':', pos);
      return std::stoi(line.substr(pos + 1));
    };
    it.label = find_int("\"label\"");
    it.source_index = find_int("\"source_index\"");
    auto pos = line.find("\"provenance\"");
    auto q1 = line.find('"', line.find(':', pos));
    auto q2 = line.find('"', q1 + 1);
    it.prov = provenance_from_string(line.substr(q1 + 1, q2 - q1 - 1));
    it.image = Tensor(shape);
    img.read(reinterpret_cast<char*>(it.image.v.data()),
             static_cast<std::streamsize>(it.image.v.size() * sizeof(Scalar)));
    if (!img) throw IoError("images.f64 truncated in " + dir);
    ds.items.push_back(std::move(it));
  }
  if (ds.size() != n) throw IoError("manifest item count mismatch in " + dir);
  return ds;
}

}  // namespace invlba
