#pragma once

#include <array>
#include <cmath>
#include <string>

#include "fcnbnl/image.hpp"

namespace fcnbnl {

/// Test-time corruption conditions. The person occluder of the original
/// protocol is not reproducible and is stood in for by a fixed checker texture.
enum class PerturbationKind {
  kOriginal,
  kOutsideBorder,
  kOccluderRight,
  kOccluderCentral,
  kTexturedOccluderCentral,
  kCutRightHalf,
  kCutTopHalf,
  kUpsideDown,
};

inline constexpr std::array<PerturbationKind, 8> kAllPerturbations = {
    PerturbationKind::kOriginal,        PerturbationKind::kOutsideBorder,
    PerturbationKind::kOccluderRight,   PerturbationKind::kOccluderCentral,
    PerturbationKind::kTexturedOccluderCentral, PerturbationKind::kCutRightHalf,
    PerturbationKind::kCutTopHalf,      PerturbationKind::kUpsideDown,
};

inline const char* to_string(PerturbationKind k) {
  switch (k) {
    case PerturbationKind::kOriginal: return "original";
    case PerturbationKind::kOutsideBorder: return "outside_border";
    case PerturbationKind::kOccluderRight: return "occluder_right";
    case PerturbationKind::kOccluderCentral: return "occluder_central";
    case PerturbationKind::kTexturedOccluderCentral: return "textured_occluder_central";
    case PerturbationKind::kCutRightHalf: return "cut_right_half";
    case PerturbationKind::kCutTopHalf: return "cut_top_half";
    case PerturbationKind::kUpsideDown: return "upside_down";
  }
  fail("unknown perturbation kind");
}

inline PerturbationKind perturbation_from_string(const std::string& s) {
  for (auto k : kAllPerturbations) {
    if (s == to_string(k)) return k;
  }
  fail("unknown perturbation '" + s + "'");
}

namespace detail {

// Centered square covering 25% of the image area.
inline void central_square(const Image& im, int& y0, int& x0, int& side) {
  side = static_cast<int>(std::lround(0.5 * std::sqrt(static_cast<double>(im.width) * im.height)));
  side = std::min({side, im.width, im.height});
  y0 = (im.height - side) / 2;
  x0 = (im.width - side) / 2;
}

inline Image crop(const Image& im, int y0, int x0, int h, int w) {
  Image out = Image::filled(w, h, im.channels, 0.0f);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < im.channels; ++c) out.at(y, x, c) = im.at(y0 + y, x0 + x, c);
  return out;
}

}  // namespace detail

/// Apply one corruption condition; `original` is the identity.
inline Image apply_perturbation(const Image& im, PerturbationKind kind) {
  switch (kind) {
    case PerturbationKind::kOriginal:
      return im;

    case PerturbationKind::kOutsideBorder: {
      // Content shrunk to 50% linear size, centered on a black canvas.
      const int sh = std::max(1, im.height / 2), sw = std::max(1, im.width / 2);
      Image small = rescale_image(im, sh, sw);
      Image out = Image::filled(im.width, im.height, im.channels, 0.0f);
      const int y0 = (im.height - sh) / 2, x0 = (im.width - sw) / 2;
      for (int y = 0; y < sh; ++y)
        for (int x = 0; x < sw; ++x)
          for (int c = 0; c < im.channels; ++c) out.at(y0 + y, x0 + x, c) = small.at(y, x, c);
      return out;
    }

    case PerturbationKind::kOccluderRight: {
      Image out = im;
      const int wid = static_cast<int>(std::lround(0.25 * im.width));
      for (int y = 0; y < im.height; ++y)
        for (int x = im.width - wid; x < im.width; ++x)
          for (int c = 0; c < im.channels; ++c) out.at(y, x, c) = 0.0f;
      return out;
    }

    case PerturbationKind::kOccluderCentral: {
      Image out = im;
      int y0, x0, side;
      detail::central_square(im, y0, x0, side);
      for (int y = y0; y < y0 + side; ++y)
        for (int x = x0; x < x0 + side; ++x)
          for (int c = 0; c < im.channels; ++c) out.at(y, x, c) = 0.0f;
      return out;
    }

    case PerturbationKind::kTexturedOccluderCentral: {
      // Same geometry as the central occluder, filled with a fixed
      // high-frequency checker (person-occluder stand-in).
      Image out = im;
      int y0, x0, side;
      detail::central_square(im, y0, x0, side);
      for (int y = y0; y < y0 + side; ++y)
        for (int x = x0; x < x0 + side; ++x) {
          const float v = ((y + x) % 2 == 0) ? 0.85f : 0.15f;
          for (int c = 0; c < im.channels; ++c) out.at(y, x, c) = v;
        }
      return out;
    }

    case PerturbationKind::kCutRightHalf: {
      const int keep = (im.width + 1) / 2;
      return detail::crop(im, 0, 0, im.height, keep);
    }

    case PerturbationKind::kCutTopHalf: {
      const int keep = (im.height + 1) / 2;
      return detail::crop(im, im.height - keep, 0, keep, im.width);
    }

    case PerturbationKind::kUpsideDown: {
      Image out = im;
      for (int y = 0; y < im.height; ++y)
        for (int x = 0; x < im.width; ++x)
          for (int c = 0; c < im.channels; ++c)
            out.at(y, x, c) = im.at(im.height - 1 - y, im.width - 1 - x, c);
      return out;
    }
  }
  fail("unknown perturbation kind");
}

}  // namespace fcnbnl
