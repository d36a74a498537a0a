#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "fcnbnl/fcn.hpp"

namespace fcnbnl {

/// Patch-by-patch extraction protocol: random patches at a few sizes, each
/// resized to the receptive-field resolution and forwarded independently.
struct PatchExtractor {
  std::vector<int> patch_sizes{32, 64, 128};
  std::vector<int> counts;       // per patch size, >= 1 each
  bool include_full_image = false;  // one extra descriptor for the whole image
  std::uint64_t seed = 0;

  void validate() const {
    check(!patch_sizes.empty(), "patch extractor: need at least one patch size");
    check(counts.size() == patch_sizes.size(), "patch extractor: one count per patch size");
    for (int c : counts) check(c >= 1, "patch extractor: counts must be >= 1");
    for (int s : patch_sizes) check(s >= 1, "patch extractor: patch sizes must be >= 1");
  }

  /// Spread a total count evenly over the scales, remainder to the front.
  static std::vector<int> distribute(int total, int scales) {
    check(total >= scales, "patch extractor: need at least one patch per scale");
    std::vector<int> out(scales, total / scales);
    for (int i = 0; i < total % scales; ++i) out[i] += 1;
    return out;
  }
};

/// Extract one descriptor per sampled patch; one grid per patch size (plus an
/// optional whole-image grid), mirroring the multi-scale layout.
template <typename T>
MultiScaleDescriptors<T> extract_patch_mode(FcnModel<T>& model, const Image& im, const PatchExtractor& extractor) {
  extractor.validate();
  const int rf = receptive_field(model.topology).rf;
  std::mt19937_64 rng(extractor.seed);

  MultiScaleDescriptors<T> out;
  for (std::size_t s = 0; s < extractor.patch_sizes.size(); ++s) {
    const int ps = extractor.patch_sizes[s];
    check(ps <= im.width && ps <= im.height,
          "patch extractor: patch size " + std::to_string(ps) + " exceeds image " + std::to_string(im.width) +
              "x" + std::to_string(im.height));
    std::uniform_int_distribution<int> ux(0, im.width - ps), uy(0, im.height - ps);
    DescriptorGrid<T> grid(extractor.counts[s], 1, model.topology.descriptor_dim());
    for (int i = 0; i < extractor.counts[s]; ++i) {
      const int x0 = ux(rng), y0 = uy(rng);
      Image patch = Image::filled(ps, ps, im.channels, 0.0f);
      for (int y = 0; y < ps; ++y)
        for (int x = 0; x < ps; ++x)
          for (int c = 0; c < im.channels; ++c) patch.at(y, x, c) = im.at(y0 + y, x0 + x, c);
      if (ps != rf) patch = rescale_image(patch, rf, rf);
      auto one = fcn_forward(model, image_to_tensor<T>(patch), BnMode::kInfer);
      check(one.eta() == 1, "patch extractor: patch forward produced more than one descriptor");
      std::copy(one.data.begin(), one.data.end(), grid.descriptor(i).begin());
    }
    out.scales.push_back(std::move(grid));
  }
  if (extractor.include_full_image) {
    Image whole = rescale_image(im, rf, rf);
    auto one = fcn_forward(model, image_to_tensor<T>(whole), BnMode::kInfer);
    DescriptorGrid<T> grid(1, 1, model.topology.descriptor_dim());
    std::copy(one.data.begin(), one.data.end(), grid.descriptor(0).begin());
    out.scales.push_back(std::move(grid));
  }
  return out;
}

/// Square-grid resolutions reachable by the topology: entry g holds the
/// smallest input side whose output grid is g x g.
inline std::vector<std::pair<int, int>> square_grid_resolutions(const FcnTopology& topo, int max_grid) {
  std::vector<std::pair<int, int>> out;  // (eta = g*g, resolution)
  int res = receptive_field(topo).rf;
  for (int g = 1; g <= max_grid; ++g) {
    while (output_extent(topo, res) < g) ++res;
    out.emplace_back(g * g, res);
  }
  return out;
}

/// Choose pyramid resolutions whose total descriptor count is closest to the
/// target (coin-change over square grids, fewest scales on ties).
inline std::vector<int> pick_fc_resolutions(const FcnTopology& topo, int target, int max_grid = 12) {
  check(target >= 1, "bench: target descriptor count must be >= 1");
  const auto coins = square_grid_resolutions(topo, max_grid);
  const int cap = target + coins.back().first;
  const int kInf = 1 << 28;
  std::vector<int> cost(cap + 1, kInf);  // fewest scales to reach an exact sum
  std::vector<int> take(cap + 1, -1);
  cost[0] = 0;
  for (int v = 1; v <= cap; ++v) {
    for (std::size_t c = 0; c < coins.size(); ++c) {
      const int count = coins[c].first;
      if (count <= v && cost[v - count] + 1 < cost[v]) {
        cost[v] = cost[v - count] + 1;
        take[v] = static_cast<int>(c);
      }
    }
  }
  int best = -1;
  for (int v = 0; v <= cap; ++v) {
    if (cost[v] == kInf) continue;
    if (best < 0 || std::abs(v - target) < std::abs(best - target) ||
        (std::abs(v - target) == std::abs(best - target) && cost[v] < cost[best])) {
      best = v;
    }
  }
  std::vector<int> resolutions;
  for (int v = best; v > 0; v -= coins[take[v]].first) resolutions.push_back(coins[take[v]].second);
  std::sort(resolutions.begin(), resolutions.end());
  return resolutions;
}

struct TimingRow {
  int requested_count = 0;
  int patch_count = 0;       // descriptors actually produced per image, patch mode
  int fc_count = 0;          // descriptors actually produced per image, fc mode
  double patch_median_s = 0.0;
  double patch_std_s = 0.0;
  double fc_median_s = 0.0;
  double fc_std_s = 0.0;
  int repetitions = 0;
};

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double stddev(const std::vector<double>& v) {
  double mean = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double acc = 0;
  for (double x : v) acc += (x - mean) * (x - mean);
  return std::sqrt(acc / static_cast<double>(v.size()));
}

template <typename F>
std::vector<double> time_repetitions(int reps, const F& body) {
  body();  // warm-up, excluded
  std::vector<double> times;
  times.reserve(reps);
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    body();
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  return times;
}

}  // namespace detail

/// Wall-clock comparison of the two extraction routes over an image set.
/// Strictly single-threaded; medians over `reps` repetitions.
template <typename T>
std::vector<TimingRow> run_timing_sweep(FcnModel<T>& model, const std::vector<Image>& images,
                                        const std::vector<int>& counts, int reps,
                                        const std::vector<int>& patch_sizes, std::uint64_t seed = 0) {
  check(!images.empty(), "bench: need at least one image");
  check(reps >= 5, "bench: repetitions must be >= 5");
  check(!counts.empty(), "bench: need at least one descriptor count");

  std::vector<TimingRow> rows;
  for (int target : counts) {
    TimingRow row;
    row.requested_count = target;
    row.repetitions = reps;

    PatchExtractor extractor;
    extractor.patch_sizes = patch_sizes;
    extractor.counts = PatchExtractor::distribute(target, static_cast<int>(patch_sizes.size()));
    extractor.seed = seed;
    row.patch_count = target;

    const auto resolutions = pick_fc_resolutions(model.topology, target);

    MultiScaleDescriptors<T> probe;
    for (int res : resolutions) {
      Image scaled = rescale_longest_side(images.front(), res);
      probe.scales.push_back(fcn_forward(model, image_to_tensor<T>(scaled), BnMode::kInfer));
    }
    row.fc_count = probe.total();

    auto patch_times = detail::time_repetitions(reps, [&] {
      for (const auto& im : images) {
        auto msd = extract_patch_mode(model, im, extractor);
        volatile T sink = msd.scales.front().data.front();
        (void)sink;
      }
    });
    auto fc_times = detail::time_repetitions(reps, [&] {
      for (const auto& im : images) {
        for (int res : resolutions) {
          Image scaled = rescale_longest_side(im, res);
          auto grid = fcn_forward(model, image_to_tensor<T>(scaled), BnMode::kInfer);
          volatile T sink = grid.data.front();
          (void)sink;
        }
      }
    });

    row.patch_median_s = detail::median(patch_times);
    row.patch_std_s = detail::stddev(patch_times);
    row.fc_median_s = detail::median(fc_times);
    row.fc_std_s = detail::stddev(fc_times);
    rows.push_back(row);
  }
  return rows;
}

inline void write_timing_csv(const std::vector<TimingRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("timing csv: cannot open '" + path + "'");
  out << "count,mode,median_seconds,std_seconds,reps\n";
  for (const auto& r : rows) {
    out << r.patch_count << ",patch," << r.patch_median_s << "," << r.patch_std_s << "," << r.repetitions << "\n";
    out << r.fc_count << ",fc," << r.fc_median_s << "," << r.fc_std_s << "," << r.repetitions << "\n";
  }
}

}  // namespace fcnbnl
