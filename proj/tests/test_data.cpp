#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <random>

#include "fcnbnl/dataset.hpp"
#include "fcnbnl/image.hpp"
#include "fcnbnl/perturb.hpp"

using namespace fcnbnl;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("fcnbnl_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Image random_quantized_image(int w, int h, int c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image im = Image::filled(w, h, c, 0.0f);
  for (auto& v : im.pixels) v = u(rng);
  quantize_to_byte_lattice(im);
  return im;
}

}  // namespace

TEST_CASE("ppm load maps bytes to [0,1]", "[data]") {
  auto dir = temp_dir("ppm_basic");
  {
    std::ofstream out(dir / "red.ppm", std::ios::binary);
    out << "P6\n1 1\n255\n";
    const unsigned char px[3] = {255, 0, 0};
    out.write(reinterpret_cast<const char*>(px), 3);
  }
  Image im = load_image((dir / "red.ppm").string());
  REQUIRE(im.width == 1);
  REQUIRE(im.height == 1);
  REQUIRE(im.channels == 3);
  REQUIRE(im.at(0, 0, 0) == 1.0f);
  REQUIRE(im.at(0, 0, 1) == 0.0f);
  REQUIRE(im.at(0, 0, 2) == 0.0f);
}

TEST_CASE("ppm save/load round trip", "[data]") {
  auto dir = temp_dir("ppm_rt");
  SECTION("pixel arrays survive a save-load cycle") {
    Image im = random_quantized_image(9, 5, 3, 77);
    save_image(im, (dir / "a.ppm").string());
    Image back = load_image((dir / "a.ppm").string());
    REQUIRE(back.pixels == im.pixels);
  }
  SECTION("file bytes survive a load-save cycle") {
    Image im = random_quantized_image(4, 7, 3, 78);
    save_image(im, (dir / "b.ppm").string());
    Image loaded = load_image((dir / "b.ppm").string());
    save_image(loaded, (dir / "c.ppm").string());
    REQUIRE(read_bytes(dir / "b.ppm") == read_bytes(dir / "c.ppm"));
  }
  SECTION("grayscale P5 round trip") {
    Image im = random_quantized_image(6, 3, 1, 79);
    save_image(im, (dir / "g.pgm.ppm").string());
    Image back = load_image((dir / "g.pgm.ppm").string());
    REQUIRE(back.channels == 1);
    REQUIRE(back.pixels == im.pixels);
  }
}

TEST_CASE("ppm parse errors name the byte offset", "[data]") {
  auto dir = temp_dir("ppm_err");

  SECTION("16-bit maxval is unsupported") {
    std::ofstream out(dir / "deep.ppm", std::ios::binary);
    out << "P6\n1 1\n65535\n";
    out.write("\0\0\0\0\0\0", 6);
    out.close();
    REQUIRE_THROWS_WITH(load_image((dir / "deep.ppm").string()),
                        Catch::Matchers::ContainsSubstring("unsupported maxval 65535"));
  }
  SECTION("bad magic") {
    std::ofstream out(dir / "bad.ppm", std::ios::binary);
    out << "Q6\n1 1\n255\nxxx";
    out.close();
    REQUIRE_THROWS_WITH(load_image((dir / "bad.ppm").string()), Catch::Matchers::ContainsSubstring("bad magic"));
  }
  SECTION("truncated payload reports the offset") {
    std::ofstream out(dir / "trunc.ppm", std::ios::binary);
    out << "P6\n2 2\n255\n";
    out.write("\1\2\3", 3);  // needs 12 bytes
    out.close();
    try {
      load_image((dir / "trunc.ppm").string());
      FAIL("expected parse error");
    } catch (const std::invalid_argument& e) {
      REQUIRE_THAT(e.what(), Catch::Matchers::ContainsSubstring("truncated"));
      REQUIRE_THAT(e.what(), Catch::Matchers::ContainsSubstring("at byte"));
    }
  }
  SECTION("comments in the header are fine") {
    std::ofstream out(dir / "com.ppm", std::ios::binary);
    out << "P6 # a pixmap\n# more commentary\n1 1\n255\n";
    out.write("\10\20\30", 3);
    out.close();
    Image im = load_image((dir / "com.ppm").string());
    REQUIRE(im.width == 1);
  }
}

TEST_CASE("rescale_image", "[data]") {
  SECTION("longest-side mode preserves aspect ratio") {
    Image im = random_quantized_image(200, 100, 3, 5);
    Image out = rescale_longest_side(im, 100);
    REQUIRE(out.width == 100);
    REQUIRE(out.height == 50);
  }
  SECTION("upscaling a 1x1 image gives a constant image") {
    Image im = Image::filled(1, 1, 3, 0.0f);
    im.at(0, 0, 0) = 0.25f;
    im.at(0, 0, 1) = 0.5f;
    im.at(0, 0, 2) = 0.75f;
    Image out = rescale_image(im, 4, 4);
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) {
        REQUIRE(out.at(y, x, 0) == 0.25f);
        REQUIRE(out.at(y, x, 1) == 0.5f);
        REQUIRE(out.at(y, x, 2) == 0.75f);
      }
  }
  SECTION("downscaling a constant image keeps the constant") {
    Image im = Image::filled(17, 11, 1, 0.625f);
    Image out = rescale_image(im, 5, 7);
    for (float v : out.pixels) REQUIRE(v == Catch::Approx(0.625f).margin(1e-6));
  }
}

TEST_CASE("perturbations", "[data]") {
  Image im = random_quantized_image(100, 100, 3, 11);

  SECTION("upside_down is an involution") {
    Image twice = apply_perturbation(apply_perturbation(im, PerturbationKind::kUpsideDown),
                                     PerturbationKind::kUpsideDown);
    REQUIRE(twice.pixels == im.pixels);
  }
  SECTION("central occluder zeroes rows/cols 25..74 of a 100x100 image") {
    Image out = apply_perturbation(im, PerturbationKind::kOccluderCentral);
    for (int y = 0; y < 100; ++y)
      for (int x = 0; x < 100; ++x) {
        const bool inside = y >= 25 && y <= 74 && x >= 25 && x <= 74;
        if (inside) {
          REQUIRE(out.at(y, x, 0) == 0.0f);
        } else {
          REQUIRE(out.at(y, x, 0) == im.at(y, x, 0));
        }
      }
  }
  SECTION("right occluder covers the rightmost quarter") {
    Image out = apply_perturbation(im, PerturbationKind::kOccluderRight);
    REQUIRE(out.at(0, 74, 0) == im.at(0, 74, 0));
    for (int x = 75; x < 100; ++x) REQUIRE(out.at(50, x, 1) == 0.0f);
  }
  SECTION("cuts change dimensions exactly") {
    Image wide = random_quantized_image(200, 60, 3, 12);
    Image cut = apply_perturbation(wide, PerturbationKind::kCutRightHalf);
    REQUIRE(cut.width == 100);
    REQUIRE(cut.height == 60);
    REQUIRE(cut.at(3, 7, 2) == wide.at(3, 7, 2));

    Image top = apply_perturbation(wide, PerturbationKind::kCutTopHalf);
    REQUIRE(top.width == 200);
    REQUIRE(top.height == 30);
    REQUIRE(top.at(0, 0, 0) == wide.at(30, 0, 0));
  }
  SECTION("outside border shrinks content onto black canvas") {
    Image out = apply_perturbation(im, PerturbationKind::kOutsideBorder);
    REQUIRE(out.width == 100);
    REQUIRE(out.height == 100);
    REQUIRE(out.at(0, 0, 0) == 0.0f);
    REQUIRE(out.at(99, 99, 2) == 0.0f);
  }
  SECTION("textured occluder fills the central square with a checker") {
    Image out = apply_perturbation(im, PerturbationKind::kTexturedOccluderCentral);
    REQUIRE(((out.at(50, 50, 0) == 0.85f) || (out.at(50, 50, 0) == 0.15f)));
    REQUIRE(out.at(50, 50, 0) != out.at(50, 51, 0));
  }
  SECTION("all kinds preserve the [0,1] range") {
    for (auto kind : kAllPerturbations) {
      Image out = apply_perturbation(im, kind);
      for (float v : out.pixels) {
        REQUIRE(v >= 0.0f);
        REQUIRE(v <= 1.0f);
      }
    }
  }
}

TEST_CASE("synthetic dataset generation", "[data]") {
  SynthConfig cfg;
  cfg.k = 4;
  cfg.images_per_class = 5;
  cfg.image_size = 48;
  cfg.motif_size = 12;
  cfg.noise_level = 0.02;
  cfg.seed = 99;

  SECTION("same seed gives byte-identical datasets") {
    Dataset a = generate_synthetic_dataset(cfg);
    Dataset b = generate_synthetic_dataset(cfg);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a.images[i].pixels == b.images[i].pixels);
  }
  SECTION("counts and labels") {
    SynthConfig big = cfg;
    big.images_per_class = 50;
    Dataset ds = generate_synthetic_dataset(big);
    REQUIRE(ds.size() == 200);
    REQUIRE(ds.label_set.k() == 4);
    for (int y : ds.labels) REQUIRE((y >= 0 && y <= 3));
  }
  SECTION("config validation") {
    SynthConfig bad = cfg;
    bad.motif_size = 48;
    REQUIRE_THROWS_AS(generate_synthetic_dataset(bad), std::invalid_argument);
  }
}

// Brute-force patch matching: with zero noise the stamped motif survives
// verbatim, so the smallest patch distance to the true class template is 0.
TEST_CASE("noise-free synthetic images are separable by raw motif patches", "[data]") {
  SynthConfig cfg;
  cfg.k = 2;
  cfg.images_per_class = 10;
  cfg.image_size = 48;
  cfg.motif_size = 12;
  cfg.noise_level = 0.0;
  cfg.seed = 7;
  Dataset ds = generate_synthetic_dataset(cfg);
  REQUIRE(ds.size() == 20);

  std::vector<Image> templates;
  for (int y = 0; y < cfg.k; ++y) {
    Image t = synth_motif(cfg, y);
    quantize_to_byte_lattice(t);
    templates.push_back(t);
  }

  const int m = cfg.motif_size;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    double best_dist = 1e300;
    int best_class = -1;
    for (int y = 0; y < cfg.k; ++y) {
      for (int py = 0; py + m <= cfg.image_size; ++py) {
        for (int px = 0; px + m <= cfg.image_size; ++px) {
          double d = 0.0;
          for (int v = 0; v < m; ++v)
            for (int u = 0; u < m; ++u)
              for (int c = 0; c < 3; ++c) {
                const double diff = ds.images[i].at(py + v, px + u, c) - templates[y].at(v, u, c);
                d += diff * diff;
              }
          if (d < best_dist) {
            best_dist = d;
            best_class = y;
          }
        }
      }
    }
    REQUIRE(best_class == ds.labels[i]);
  }
}

TEST_CASE("split_dataset", "[data]") {
  SynthConfig cfg;
  cfg.k = 3;
  cfg.images_per_class = 10;
  cfg.image_size = 32;
  cfg.motif_size = 8;
  cfg.seed = 5;
  Dataset ds = generate_synthetic_dataset(cfg);

  SECTION("0.5 fraction splits 10 per class into 5/5") {
    auto [train, test] = split_dataset(ds, 0.5, 42);
    REQUIRE(train.size() == 15);
    REQUIRE(test.size() == 15);
    for (int y = 0; y < 3; ++y) {
      auto count = [&](const Dataset& d) { return std::count(d.labels.begin(), d.labels.end(), y); };
      REQUIRE(count(train) == 5);
      REQUIRE(count(test) == 5);
    }
  }
  SECTION("same seed gives the same split") {
    auto [a_train, a_test] = split_dataset(ds, 0.7, 42);
    auto [b_train, b_test] = split_dataset(ds, 0.7, 42);
    REQUIRE(a_train.labels == b_train.labels);
    for (std::size_t i = 0; i < a_train.size(); ++i)
      REQUIRE(a_train.images[i].pixels == b_train.images[i].pixels);
  }
  SECTION("train and test are disjoint and exhaustive") {
    auto [train, test] = split_dataset(ds, 0.6, 1);
    REQUIRE(train.size() + test.size() == ds.size());
    // images are unique in this dataset, so pixel identity detects overlap
    for (const auto& ti : train.images)
      for (const auto& si : test.images) REQUIRE(ti.pixels != si.pixels);
  }
  SECTION("a class with fewer than 2 items is an error") {
    Dataset tiny;
    tiny.label_set.names = {"a", "b"};
    tiny.images.push_back(Image::filled(4, 4, 3, 0.5f));
    tiny.labels.push_back(0);
    tiny.images.push_back(Image::filled(4, 4, 3, 0.5f));
    tiny.labels.push_back(1);
    tiny.images.push_back(Image::filled(4, 4, 3, 0.4f));
    tiny.labels.push_back(1);
    REQUIRE_THROWS_AS(split_dataset(tiny, 0.5, 0), std::invalid_argument);
  }
}

TEST_CASE("dataset directory round trip and splits file", "[data]") {
  SynthConfig cfg;
  cfg.k = 2;
  cfg.images_per_class = 3;
  cfg.image_size = 24;
  cfg.motif_size = 8;
  cfg.seed = 3;
  Dataset ds = generate_synthetic_dataset(cfg);

  auto dir = temp_dir("dsdir");
  save_dataset_dir(ds, dir.string());
  Dataset back = load_dataset_dir(dir.string());
  REQUIRE(back.size() == ds.size());
  REQUIRE(back.label_set.names == ds.label_set.names);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    REQUIRE(back.labels[i] == ds.labels[i]);
    REQUIRE(back.images[i].pixels == ds.images[i].pixels);
  }

  {
    std::ofstream out(dir / "splits.txt");
    for (std::size_t i = 0; i < back.size(); ++i)
      out << back.rel_paths[i] << (i % 3 == 0 ? " test" : " train") << "\n";
  }
  auto splits = load_splits_file(dir.string());
  REQUIRE(splits.has_value());
  auto [train, test] = apply_splits(back, *splits);
  REQUIRE(train.size() == 4);
  REQUIRE(test.size() == 2);
}
