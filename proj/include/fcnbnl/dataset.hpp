#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fcnbnl/image.hpp"

namespace fcnbnl {

struct LabelSet {
  std::vector<std::string> names;

  int k() const { return static_cast<int>(names.size()); }

  void validate() const {
    check(k() >= 2, "label set: need at least 2 classes");
    auto sorted = names;
    std::sort(sorted.begin(), sorted.end());
    check(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(), "label set: names must be unique");
  }
};

/// Labeled images held in memory. rel_paths are empty for synthetic data.
struct Dataset {
  std::vector<Image> images;
  std::vector<int> labels;
  std::vector<std::string> rel_paths;
  LabelSet label_set;
  std::string provenance;

  std::size_t size() const { return images.size(); }

  void validate() const {
    check(!images.empty(), "dataset: empty");
    check(images.size() == labels.size(), "dataset: image/label count mismatch");
    label_set.validate();
    for (int y : labels) check(y >= 0 && y < label_set.k(), "dataset: label index out of range");
  }
};

/// Deterministic synthetic scene generator: class identity lives in small
/// oriented motifs stamped over a shared cluttered background, so local parts
/// rather than global statistics carry the signal.
struct SynthConfig {
  int k = 4;
  int images_per_class = 50;
  int image_size = 64;
  int motif_size = 16;
  double noise_level = 0.02;
  std::uint64_t seed = 0;

  void validate() const {
    check(k >= 2, "synth: k must be >= 2");
    check(k <= 999, "synth: k must be <= 999");
    check(images_per_class >= 1, "synth: images_per_class must be >= 1");
    check(motif_size >= 4, "synth: motif_size must be >= 4");
    check(motif_size < image_size, "synth: motif_size must be smaller than image_size");
    check(noise_level >= 0.0, "synth: noise_level must be >= 0");
  }
};

inline std::string synth_class_name(int y) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "class_%03d", y);
  return buf;
}

/// The ground-truth motif for class y: an oriented grating whose orientation,
/// frequency and per-channel phase depend on the class. Patch mean stays near
/// 0.5 for every class, so image-level color statistics are uninformative.
inline Image synth_motif(const SynthConfig& cfg, int y) {
  cfg.validate();
  check(y >= 0 && y < cfg.k, "synth_motif: class index out of range");
  const int m = cfg.motif_size;
  Image motif = Image::filled(m, m, 3, 0.5f);
  const double theta = std::numbers::pi * static_cast<double>(y) / cfg.k;
  const double freq = 2.0 + static_cast<double>(y % 3);
  const double chan_shift = 2.0 * std::numbers::pi * static_cast<double>(y % 5) / 5.0;
  const double ct = std::cos(theta), st = std::sin(theta);
  for (int v = 0; v < m; ++v) {
    for (int u = 0; u < m; ++u) {
      const double t = (u * ct + v * st) / m;
      for (int c = 0; c < 3; ++c) {
        const double phase = chan_shift * c;
        motif.at(v, u, c) = static_cast<float>(0.5 + 0.45 * std::sin(2.0 * std::numbers::pi * freq * t + phase));
      }
    }
  }
  return motif;
}

namespace detail {

// Shared clutter: smooth random blobs on mid gray, identical in distribution
// across classes.
inline Image synth_background(int size, std::mt19937_64& rng) {
  Image bg = Image::filled(size, size, 3, 0.5f);
  std::uniform_int_distribution<int> nblobs(3, 6);
  std::uniform_real_distribution<double> upos(0.0, static_cast<double>(size));
  std::uniform_real_distribution<double> urad(size / 6.0, size / 3.0);
  std::uniform_real_distribution<double> uamp(-0.18, 0.18);
  std::uniform_real_distribution<double> utint(0.6, 1.0);
  const int b = nblobs(rng);
  for (int i = 0; i < b; ++i) {
    const double cy = upos(rng), cx = upos(rng), r = urad(rng), a = uamp(rng);
    const double tint[3] = {utint(rng), utint(rng), utint(rng)};
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
        const double g = a * std::exp(-d2 / (2.0 * r * r));
        for (int c = 0; c < 3; ++c) bg.at(y, x, c) += static_cast<float>(g * tint[c]);
      }
    }
  }
  return bg;
}

}  // namespace detail

/// Deterministic in the seed: two calls with the same config produce
/// byte-identical datasets. Pixels land on the 8-bit lattice so PPM
/// round-trips reproduce them exactly.
inline Dataset generate_synthetic_dataset(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::vector<Image> motifs;
  motifs.reserve(cfg.k);
  for (int y = 0; y < cfg.k; ++y) motifs.push_back(synth_motif(cfg, y));

  Dataset ds;
  for (int y = 0; y < cfg.k; ++y) ds.label_set.names.push_back(synth_class_name(y));
  ds.provenance = "synth(seed=" + std::to_string(cfg.seed) + ")";

  const int s = cfg.image_size, m = cfg.motif_size;
  std::uniform_int_distribution<int> nstamps(2, 4);
  std::uniform_int_distribution<int> upos(0, s - m);
  std::normal_distribution<double> noise(0.0, cfg.noise_level);

  for (int y = 0; y < cfg.k; ++y) {
    for (int i = 0; i < cfg.images_per_class; ++i) {
      Image im = detail::synth_background(s, rng);
      const int n = nstamps(rng);
      std::vector<std::pair<int, int>> placed;
      for (int stamp = 0; stamp < n; ++stamp) {
        int sy = 0, sx = 0;
        for (int attempt = 0; attempt < 200; ++attempt) {
          sy = upos(rng);
          sx = upos(rng);
          const bool overlaps = std::any_of(placed.begin(), placed.end(), [&](const auto& p) {
            return std::abs(p.first - sy) < m && std::abs(p.second - sx) < m;
          });
          if (!overlaps) break;
        }
        placed.emplace_back(sy, sx);
        for (int v = 0; v < m; ++v)
          for (int u = 0; u < m; ++u)
            for (int c = 0; c < 3; ++c) im.at(sy + v, sx + u, c) = motifs[y].at(v, u, c);
      }
      if (cfg.noise_level > 0.0) {
        for (float& p : im.pixels) p += static_cast<float>(noise(rng));
      }
      quantize_to_byte_lattice(im);
      ds.images.push_back(std::move(im));
      ds.labels.push_back(y);
    }
  }
  ds.validate();
  return ds;
}

/// Stratified split, deterministic per seed. Both halves keep the label set.
inline std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double train_fraction, std::uint64_t seed) {
  ds.validate();
  check(train_fraction > 0.0 && train_fraction < 1.0, "split: fraction must be in (0,1)");
  std::mt19937_64 rng(seed);

  Dataset train, test;
  train.label_set = test.label_set = ds.label_set;
  train.provenance = ds.provenance + "/train";
  test.provenance = ds.provenance + "/test";

  const bool has_paths = ds.rel_paths.size() == ds.images.size();
  auto push = [&](Dataset& dst, std::size_t i) {
    dst.images.push_back(ds.images[i]);
    dst.labels.push_back(ds.labels[i]);
    if (has_paths) dst.rel_paths.push_back(ds.rel_paths[i]);
  };

  for (int y = 0; y < ds.label_set.k(); ++y) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (ds.labels[i] == y) idx.push_back(i);
    check(idx.size() >= 2, "split: class '" + ds.label_set.names[y] + "' has fewer than 2 items");
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n = static_cast<std::size_t>(idx.size());
    auto train_n = static_cast<std::size_t>(std::lround(train_fraction * static_cast<double>(n)));
    train_n = std::clamp<std::size_t>(train_n, 1, n - 1);
    for (std::size_t j = 0; j < n; ++j) push(j < train_n ? train : test, idx[j]);
  }
  return {std::move(train), std::move(test)};
}

/// Directory layout: root/<class_name>/*.ppm, class names ordered
/// lexicographically to form the label set.
inline void save_dataset_dir(const Dataset& ds, const std::string& root) {
  ds.validate();
  namespace fs = std::filesystem;
  fs::create_directories(root);
  std::vector<int> counter(ds.label_set.k(), 0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::string& cls = ds.label_set.names[ds.labels[i]];
    fs::create_directories(fs::path(root) / cls);
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05d.ppm", counter[ds.labels[i]]++);
    save_image(ds.images[i], (fs::path(root) / cls / name).string());
  }
}

inline Dataset load_dataset_dir(const std::string& root) {
  namespace fs = std::filesystem;
  check(fs::is_directory(root), "dataset: '" + root + "' is not a directory");
  std::vector<std::string> classes;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) classes.push_back(e.path().filename().string());
  }
  std::sort(classes.begin(), classes.end());
  check(classes.size() >= 2, "dataset: '" + root + "' needs at least 2 class directories");

  Dataset ds;
  ds.label_set.names = classes;
  ds.provenance = root;
  for (int y = 0; y < static_cast<int>(classes.size()); ++y) {
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(fs::path(root) / classes[y])) {
      if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path().filename().string());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      ds.images.push_back(load_image((fs::path(root) / classes[y] / f).string()));
      ds.labels.push_back(y);
      ds.rel_paths.push_back(classes[y] + "/" + f);
    }
  }
  ds.validate();
  return ds;
}

/// Optional root/splits.txt with lines "<relative-path> train|test".
inline std::optional<std::map<std::string, bool>> load_splits_file(const std::string& root) {
  namespace fs = std::filesystem;
  const auto path = fs::path(root) / "splits.txt";
  if (!fs::exists(path)) return std::nullopt;
  std::ifstream in(path);
  check(static_cast<bool>(in), "splits: cannot open '" + path.string() + "'");
  std::map<std::string, bool> m;
  std::string rel, part;
  while (in >> rel >> part) {
    check(part == "train" || part == "test", "splits: expected 'train' or 'test', got '" + part + "'");
    m[rel] = (part == "train");
  }
  return m;
}

inline std::pair<Dataset, Dataset> apply_splits(const Dataset& ds, const std::map<std::string, bool>& splits) {
  check(ds.rel_paths.size() == ds.size(), "splits: dataset has no relative paths");
  Dataset train, test;
  train.label_set = test.label_set = ds.label_set;
  train.provenance = ds.provenance + "/train";
  test.provenance = ds.provenance + "/test";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto it = splits.find(ds.rel_paths[i]);
    check(it != splits.end(), "splits: no entry for '" + ds.rel_paths[i] + "'");
    Dataset& dst = it->second ? train : test;
    dst.images.push_back(ds.images[i]);
    dst.labels.push_back(ds.labels[i]);
    dst.rel_paths.push_back(ds.rel_paths[i]);
  }
  return {std::move(train), std::move(test)};
}

}  // namespace fcnbnl
