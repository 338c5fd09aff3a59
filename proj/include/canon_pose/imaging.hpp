#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "canon_pose/errors.hpp"

namespace canon_pose {

// Grayscale image, row-major, unitless intensities.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, float fill = 0.0f) : height(h), width(w), pixels(h * w, fill) {}
  Image(std::size_t h, std::size_t w, std::vector<float> px) : height(h), width(w), pixels(std::move(px)) {
    if (pixels.size() != h * w) throw DimensionError("image pixel count does not match " + std::to_string(h) + "x" + std::to_string(w));
  }

  float& at(std::size_t row, std::size_t col) { return pixels[row * width + col]; }
  float at(std::size_t row, std::size_t col) const { return pixels[row * width + col]; }
  std::size_t size() const { return pixels.size(); }
  bool empty() const { return pixels.empty(); }

  friend bool operator==(const Image&, const Image&) = default;
};

enum class Interpolation { nearest, bilinear };

/// Wraps an angle difference onto [-pi, pi] (signed geodesic distance on the circle).
inline double wrap_angle(double radians) { return std::atan2(std::sin(radians), std::cos(radians)); }

/// Rotates `img` counterclockwise by `theta` radians about the pixel-grid
/// center ((W-1)/2, (H-1)/2). Samples falling outside the source grid read 0.
inline Image rotate_image(const Image& img, double theta, Interpolation mode = Interpolation::bilinear) {
  if (img.empty() || img.height != img.width)
    throw DimensionError("rotate_image requires a non-empty square image, got " + std::to_string(img.height) + "x" +
                         std::to_string(img.width));
  if (!std::isfinite(theta)) throw ArgumentError("rotate_image: non-finite angle");
  const std::size_t n = img.width;
  Image out(n, n, 0.0f);
  if (theta == 0.0) {
    out.pixels = img.pixels;
    return out;
  }
  const double center = (static_cast<double>(n) - 1.0) / 2.0;
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  const auto ni = static_cast<long>(n);
  auto fetch = [&](long r, long col) -> double {
    if (r < 0 || col < 0 || r >= ni || col >= ni) return 0.0;
    return img.pixels[static_cast<std::size_t>(r) * n + static_cast<std::size_t>(col)];
  };
  for (std::size_t r = 0; r < n; ++r) {
    const double y = center - static_cast<double>(r);
    for (std::size_t col = 0; col < n; ++col) {
      const double x = static_cast<double>(col) - center;
      // inverse map: rotate the output coordinate by -theta into the source frame
      const double xs = c * x + s * y;
      const double ys = -s * x + c * y;
      const double src_col = xs + center;
      const double src_row = center - ys;
      double v = 0.0;
      if (mode == Interpolation::nearest) {
        v = fetch(std::lround(src_row), std::lround(src_col));
      } else {
        const double r0 = std::floor(src_row);
        const double c0 = std::floor(src_col);
        const double fr = src_row - r0;
        const double fc = src_col - c0;
        const long ri = static_cast<long>(r0);
        const long ci = static_cast<long>(c0);
        v = (1.0 - fr) * ((1.0 - fc) * fetch(ri, ci) + fc * fetch(ri, ci + 1)) +
            fr * ((1.0 - fc) * fetch(ri + 1, ci) + fc * fetch(ri + 1, ci + 1));
      }
      out.pixels[r * n + col] = static_cast<float>(v);
    }
  }
  return out;
}

/// Per-image min-max map onto [0,1]. Constant images map to all zeros.
inline Image normalize(const Image& img) {
  if (img.empty()) return img;
  float lo = std::numeric_limits<float>::infinity();
  float hi = -std::numeric_limits<float>::infinity();
  for (float v : img.pixels) {
    if (!std::isfinite(v)) throw DataError("normalize: non-finite pixel value");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  Image out(img.height, img.width, 0.0f);
  if (hi == lo) return out;
  const float span = hi - lo;
  for (std::size_t i = 0; i < img.size(); ++i) {
    out.pixels[i] = std::clamp((img.pixels[i] - lo) / span, 0.0f, 1.0f);
  }
  return out;
}

struct AngleDistribution {
  enum class Kind { normal, uniform };
  Kind kind = Kind::normal;
  // normal: (mean, stddev); uniform: [lo, hi)
  double a = 0.0;
  double b = std::numbers::pi / 4.0;

  static AngleDistribution rotated_mnist() { return {Kind::normal, 0.0, std::numbers::pi / 4.0}; }
  static AngleDistribution full_circle() { return {Kind::uniform, 0.0, 2.0 * std::numbers::pi}; }

  static AngleDistribution from_tag(std::string_view tag) {
    if (tag == "normal") return rotated_mnist();
    if (tag == "uniform") return full_circle();
    throw ConfigError("unknown angle distribution '" + std::string(tag) + "' (expected normal|uniform)");
  }

  bool circular() const { return kind == Kind::uniform; }
};

inline double sample_angle(const AngleDistribution& dist, std::mt19937_64& rng) {
  switch (dist.kind) {
    case AngleDistribution::Kind::normal:
      return std::normal_distribution<double>(dist.a, dist.b)(rng);
    case AngleDistribution::Kind::uniform:
      return std::uniform_real_distribution<double>(dist.a, dist.b)(rng);
  }
  throw ConfigError("unknown angle distribution kind");
}

/// Mixes (seed, stream, index) into an independent generator seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ stream) ^ index);
}

inline double mse(const Image& a, const Image& b) {
  if (a.height != b.height || a.width != b.width) throw DimensionError("mse: image size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.pixels[i]) - b.pixels[i];
    acc += d * d;
  }
  return a.empty() ? 0.0 : acc / static_cast<double>(a.size());
}

/// Mean absolute difference restricted to the centered disk of the given radius.
inline double disk_mean_abs_error(const Image& a, const Image& b, double radius) {
  if (a.height != b.height || a.width != b.width) throw DimensionError("disk_mean_abs_error: image size mismatch");
  const double center = (static_cast<double>(a.width) - 1.0) / 2.0;
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < a.height; ++r) {
    for (std::size_t c = 0; c < a.width; ++c) {
      const double dy = static_cast<double>(r) - center;
      const double dx = static_cast<double>(c) - center;
      if (dx * dx + dy * dy > radius * radius) continue;
      acc += std::abs(static_cast<double>(a.at(r, c)) - b.at(r, c));
      ++count;
    }
  }
  return count == 0 ? 0.0 : acc / static_cast<double>(count);
}

}  // namespace canon_pose
