#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "fcnbnl/tensor.hpp"

namespace fcnbnl {

/// Interleaved row-major raster, pixel values in [0,1], 1 (gray) or 3 (RGB) channels.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> pixels;

  static Image filled(int w, int h, int c, float value) {
    check(w >= 1 && h >= 1, "image: width and height must be >= 1");
    check(c == 1 || c == 3, "image: channels must be 1 or 3");
    Image im;
    im.width = w;
    im.height = h;
    im.channels = c;
    im.pixels.assign(static_cast<std::size_t>(w) * h * c, value);
    return im;
  }

  float& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  float at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
};

/// Snap every value to the 8-bit lattice v/255 so PPM round-trips are exact.
inline void quantize_to_byte_lattice(Image& im) {
  for (float& v : im.pixels) {
    v = std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f;
  }
}

namespace detail {

struct PpmReader {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;
  const std::string& path;

  [[noreturn]] void parse_error(const std::string& what) const {
    throw std::invalid_argument("ppm parse error in '" + path + "' at byte " + std::to_string(pos) + ": " + what);
  }
  bool eof() const { return pos >= bytes.size(); }
  std::uint8_t peek() const { return bytes[pos]; }

  void skip_space_and_comments() {
    while (!eof()) {
      const std::uint8_t c = peek();
      if (c == '#') {
        while (!eof() && peek() != '\n') ++pos;
      } else if (std::isspace(c)) {
        ++pos;
      } else {
        break;
      }
    }
  }

  int read_int(const char* field) {
    skip_space_and_comments();
    if (eof() || !std::isdigit(peek())) parse_error(std::string("expected integer for ") + field);
    long v = 0;
    while (!eof() && std::isdigit(peek())) {
      v = v * 10 + (peek() - '0');
      if (v > 1 << 30) parse_error(std::string(field) + " out of range");
      ++pos;
    }
    return static_cast<int>(v);
  }
};

}  // namespace detail

/// Load a binary portable pixmap (P6) or graymap (P5) with maxval 255.
inline Image load_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("load_image: cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  detail::PpmReader r{bytes, 0, path};
  if (bytes.size() < 2) r.parse_error("file too short for magic");
  const char m0 = static_cast<char>(bytes[0]), m1 = static_cast<char>(bytes[1]);
  if (m0 != 'P' || (m1 != '5' && m1 != '6')) r.parse_error("bad magic, expected P5 or P6");
  const int channels = (m1 == '6') ? 3 : 1;
  r.pos = 2;

  const int width = r.read_int("width");
  const int height = r.read_int("height");
  const int maxval = r.read_int("maxval");
  if (width < 1 || height < 1) r.parse_error("non-positive dimensions");
  if (maxval != 255) r.parse_error("unsupported maxval " + std::to_string(maxval) + " (only 8-bit maxval 255)");
  if (r.eof() || !std::isspace(r.peek())) r.parse_error("expected single whitespace before payload");
  ++r.pos;

  const std::size_t need = static_cast<std::size_t>(width) * height * channels;
  if (bytes.size() - r.pos < need) {
    r.pos = bytes.size();
    r.parse_error("truncated payload, need " + std::to_string(need) + " bytes");
  }

  Image im;
  im.width = width;
  im.height = height;
  im.channels = channels;
  im.pixels.resize(need);
  for (std::size_t i = 0; i < need; ++i) im.pixels[i] = static_cast<float>(bytes[r.pos + i]) / 255.0f;
  return im;
}

/// Write P6 (RGB) or P5 (gray), maxval 255. Values are clamped and rounded.
inline void save_image(const Image& im, const std::string& path) {
  check(im.channels == 1 || im.channels == 3, "save_image: channels must be 1 or 3");
  check(im.width >= 1 && im.height >= 1, "save_image: empty image");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::invalid_argument("save_image: cannot open '" + path + "' for writing");
  out << (im.channels == 3 ? "P6" : "P5") << "\n" << im.width << " " << im.height << "\n255\n";
  std::vector<std::uint8_t> payload(im.pixels.size());
  for (std::size_t i = 0; i < im.pixels.size(); ++i) {
    payload[i] = static_cast<std::uint8_t>(std::lround(std::clamp(im.pixels[i], 0.0f, 1.0f) * 255.0f));
  }
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!out) throw std::runtime_error("save_image: write failed for '" + path + "'");
}

namespace detail {

inline float bilinear_sample(const Image& im, float y, float x, int c) {
  const int y0 = std::clamp(static_cast<int>(std::floor(y)), 0, im.height - 1);
  const int x0 = std::clamp(static_cast<int>(std::floor(x)), 0, im.width - 1);
  const int y1 = std::min(y0 + 1, im.height - 1);
  const int x1 = std::min(x0 + 1, im.width - 1);
  const float fy = std::clamp(y - static_cast<float>(y0), 0.0f, 1.0f);
  const float fx = std::clamp(x - static_cast<float>(x0), 0.0f, 1.0f);
  const float top = im.at(y0, x0, c) * (1.0f - fx) + im.at(y0, x1, c) * fx;
  const float bot = im.at(y1, x0, c) * (1.0f - fx) + im.at(y1, x1, c) * fx;
  return top * (1.0f - fy) + bot * fy;
}

}  // namespace detail

/// Bilinear resize to an explicit height x width.
inline Image rescale_image(const Image& im, int target_h, int target_w) {
  check(target_h >= 1 && target_w >= 1, "rescale_image: target must be >= 1");
  Image out = Image::filled(target_w, target_h, im.channels, 0.0f);
  const float sy = static_cast<float>(im.height) / static_cast<float>(target_h);
  const float sx = static_cast<float>(im.width) / static_cast<float>(target_w);
  for (int y = 0; y < target_h; ++y) {
    const float src_y = (static_cast<float>(y) + 0.5f) * sy - 0.5f;
    for (int x = 0; x < target_w; ++x) {
      const float src_x = (static_cast<float>(x) + 0.5f) * sx - 0.5f;
      for (int c = 0; c < im.channels; ++c) {
        out.at(y, x, c) = std::clamp(detail::bilinear_sample(im, src_y, src_x, c), 0.0f, 1.0f);
      }
    }
  }
  return out;
}

/// Bilinear resize so the longest side becomes `longest`, preserving aspect ratio.
inline Image rescale_longest_side(const Image& im, int longest) {
  check(longest >= 1, "rescale_longest_side: target must be >= 1");
  int th, tw;
  if (im.width >= im.height) {
    tw = longest;
    th = std::max(1, static_cast<int>(std::lround(static_cast<double>(im.height) * longest / im.width)));
  } else {
    th = longest;
    tw = std::max(1, static_cast<int>(std::lround(static_cast<double>(im.width) * longest / im.height)));
  }
  return rescale_image(im, th, tw);
}

/// Feature-map view of an image: channels-major C x H x W tensor.
template <typename T>
Tensor<T> image_to_tensor(const Image& im) {
  Tensor<T> t({im.channels, im.height, im.width});
  for (int c = 0; c < im.channels; ++c)
    for (int y = 0; y < im.height; ++y)
      for (int x = 0; x < im.width; ++x) t(c, y, x) = static_cast<T>(im.at(y, x, c));
  return t;
}

}  // namespace fcnbnl
