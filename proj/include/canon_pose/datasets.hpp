#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "canon_pose/binary_io.hpp"
#include "canon_pose/errors.hpp"
#include "canon_pose/imaging.hpp"

namespace canon_pose {

enum class SourceTag : std::uint8_t { rotated_mnist = 0, synth_5hdb = 1 };
enum class SplitTag : std::uint8_t { train = 0, test = 1 };

inline std::string to_string(SourceTag s) { return s == SourceTag::rotated_mnist ? "rotated-mnist" : "synth-5hdb"; }
inline std::string to_string(SplitTag s) { return s == SplitTag::train ? "train" : "test"; }

/// Angle law of a corpus; evaluation wraps differences for circular data.
inline AngleDistribution angle_distribution(SourceTag s) {
  return s == SourceTag::rotated_mnist ? AngleDistribution::rotated_mnist() : AngleDistribution::full_circle();
}

struct LabeledSample {
  Image input;   // rotated (and possibly noisy)
  Image target;  // canonical clean image
  double theta = 0.0;

  friend bool operator==(const LabeledSample&, const LabeledSample&) = default;
};

struct DatasetSplit {
  std::vector<LabeledSample> samples;
  SplitTag split = SplitTag::train;
  SourceTag source = SourceTag::rotated_mnist;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  std::size_t image_size() const { return samples.empty() ? 0 : samples.front().target.height; }

  friend bool operator==(const DatasetSplit&, const DatasetSplit&) = default;
};

// ---------------------------------------------------------------------------
// IDX (MNIST) files: big-endian magic 0x000008<ndim>, big-endian u32 dims,
// then raw unsigned bytes.

struct IdxFile {
  std::uint8_t ndim = 0;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> payload;
};

inline IdxFile parse_idx(std::span<const unsigned char> bytes, const std::string& what) {
  if (bytes.size() < 4) throw FormatError(what + ": too short for an IDX header");
  if (bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08)
    throw FormatError(what + ": bad IDX magic (expected unsigned-byte type 0x08)");
  IdxFile idx;
  idx.ndim = bytes[3];
  if (idx.ndim != 1 && idx.ndim != 3) throw FormatError(what + ": unsupported IDX rank " + std::to_string(idx.ndim));
  const std::size_t header = 4 + 4 * static_cast<std::size_t>(idx.ndim);
  if (bytes.size() < header) throw FormatError(what + ": truncated IDX dimension header");
  std::size_t expected = 1;
  for (std::size_t i = 0; i < idx.ndim; ++i) {
    const auto* p = bytes.data() + 4 + 4 * i;
    const std::uint32_t d = (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
    idx.dims.push_back(d);
    expected *= d;
  }
  const std::size_t actual = bytes.size() - header;
  if (actual < expected)
    throw FormatError(what + ": truncated IDX payload, expected " + std::to_string(expected) + " bytes, got " +
                      std::to_string(actual));
  idx.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header),
                     bytes.begin() + static_cast<std::ptrdiff_t>(header + expected));
  return idx;
}

/// Loads an IDX image file (magic 0x00000803); pixels are scaled by 1/255.
inline std::vector<Image> load_idx_images(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  const auto idx = parse_idx(bytes, path.string());
  if (idx.ndim != 3) throw FormatError(path.string() + ": expected an image file (magic 0x00000803)");
  const std::size_t n = idx.dims[0], h = idx.dims[1], w = idx.dims[2];
  std::vector<Image> images;
  images.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Image img(h, w);
    const auto* src = idx.payload.data() + i * h * w;
    for (std::size_t k = 0; k < h * w; ++k) img.pixels[k] = static_cast<float>(src[k]) / 255.0f;
    images.push_back(std::move(img));
  }
  return images;
}

/// Loads an IDX label file (magic 0x00000801).
inline std::vector<std::uint8_t> load_idx_labels(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  auto idx = parse_idx(bytes, path.string());
  if (idx.ndim != 1) throw FormatError(path.string() + ": expected a label file (magic 0x00000801)");
  return std::move(idx.payload);
}

// ---------------------------------------------------------------------------

namespace detail {
constexpr std::uint64_t kRotationStream = 0x524f54;  // "ROT"
constexpr std::uint64_t kNoiseStream = 0x4e4f49;     // "NOI"
constexpr std::uint64_t kEpochStream = 0x45504f;     // "EPO"

inline void check_sample(const LabeledSample& s, std::size_t index) {
  if (s.input.height != s.target.height || s.input.width != s.target.width)
    throw ValidationError("sample " + std::to_string(index) + ": input and target sizes differ");
  for (const auto* img : {&s.input, &s.target})
    for (float v : img->pixels)
      if (!(v >= 0.0f && v <= 1.0f)) throw ValidationError("sample " + std::to_string(index) + ": pixel outside [0,1]");
  if (!std::isfinite(s.theta)) throw ValidationError("sample " + std::to_string(index) + ": non-finite angle");
}
}  // namespace detail

/// Checks LabeledSample invariants on a random ~1% subset (at least one sample).
inline void validate_split(const DatasetSplit& split, std::uint64_t seed) {
  if (split.empty()) return;
  std::mt19937_64 rng(derive_seed(seed, 0x56414c, split.size()));
  const std::size_t checks = std::max<std::size_t>(1, split.size() / 100);
  std::uniform_int_distribution<std::size_t> pick(0, split.size() - 1);
  for (std::size_t k = 0; k < checks; ++k) {
    const std::size_t i = pick(rng);
    detail::check_sample(split.samples[i], i);
  }
}

/// Rotates each raw digit by theta ~ Normal(0, pi^2/16); deterministic per (seed, split, index).
inline DatasetSplit build_rotated_mnist(const std::vector<Image>& raw, SplitTag split, std::uint64_t seed) {
  DatasetSplit out;
  out.split = split;
  out.source = SourceTag::rotated_mnist;
  out.samples.reserve(raw.size());
  const auto dist = AngleDistribution::rotated_mnist();
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const Image& img = raw[i];
    if (img.height != img.width) throw DimensionError("rotated MNIST: raw image " + std::to_string(i) + " is not square");
    std::mt19937_64 rng(derive_seed(seed, detail::kRotationStream + static_cast<std::uint64_t>(split), i));
    const double theta = sample_angle(dist, rng);
    out.samples.push_back({rotate_image(img, theta, Interpolation::bilinear), img, theta});
  }
  validate_split(out, seed);
  return out;
}

// ---------------------------------------------------------------------------
// Procedural stand-in for simulated cryo-EM projections: a normalized sum of
// isotropic Gaussian blobs that must lack rotational symmetry.

struct Blob {
  double cx = 0.0;  // pixels
  double cy = 0.0;
  double amplitude = 1.0;
  double sigma = 2.0;  // pixels
};

struct PhantomSpec {
  std::size_t blob_count = 7;
  std::vector<Blob> blobs;
  std::size_t image_size = 40;
  double noise_std = 0.1;
  std::uint64_t seed = 17;

  /// Draws blob parameters from `seed`. Blobs stay inside the inscribed
  /// disk so that rotations never move mass out of the frame.
  static PhantomSpec generate(std::size_t blob_count = 7, std::uint64_t seed = 17, std::size_t image_size = 40,
                              double noise_std = 0.1) {
    if (blob_count == 0 || image_size < 8) throw ConfigError("phantom: need at least one blob and an 8 px image");
    PhantomSpec spec;
    spec.blob_count = blob_count;
    spec.image_size = image_size;
    spec.noise_std = noise_std;
    spec.seed = seed;
    std::mt19937_64 rng(seed);
    const double half = static_cast<double>(image_size) / 2.0;
    const double center = (static_cast<double>(image_size) - 1.0) / 2.0;
    std::uniform_real_distribution<double> radius(0.1 * half, 0.55 * half);
    std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
    std::uniform_real_distribution<double> amp(0.4, 1.0);
    std::uniform_real_distribution<double> sigma(0.05 * half, 0.15 * half);
    for (std::size_t i = 0; i < blob_count; ++i) {
      const double r = radius(rng), a = angle(rng);
      spec.blobs.push_back({center + r * std::cos(a), center - r * std::sin(a), amp(rng), sigma(rng)});
    }
    return spec;
  }
};

inline Image render_phantom(const PhantomSpec& spec) {
  if (spec.blobs.size() != spec.blob_count) throw ConfigError("phantom: blob_count does not match blob list");
  Image img(spec.image_size, spec.image_size, 0.0f);
  for (std::size_t r = 0; r < spec.image_size; ++r)
    for (std::size_t c = 0; c < spec.image_size; ++c) {
      double v = 0.0;
      for (const auto& b : spec.blobs) {
        const double dx = static_cast<double>(c) - b.cx, dy = static_cast<double>(r) - b.cy;
        v += b.amplitude * std::exp(-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma));
      }
      img.at(r, c) = static_cast<float>(v);
    }
  return normalize(img);
}

struct SymmetryReport {
  double min_rotation_mse = 0.0;   // min over probe angles of MSE(phantom, rotate(phantom, a))
  double max_roundtrip_mse = 0.0;  // max over probe angles of MSE(phantom, rotate(rotate(phantom, a), -a))
  double worst_angle = 0.0;
  bool asymmetric() const { return min_rotation_mse > 10.0 * max_roundtrip_mse; }
};

/// Probes the 63 nonzero angles of a 64-step circle grid (which includes
/// pi/2, pi and 3pi/2).
inline SymmetryReport symmetry_sweep(const Image& phantom) {
  SymmetryReport rep;
  rep.min_rotation_mse = std::numeric_limits<double>::infinity();
  for (int k = 1; k < 64; ++k) {
    const double a = 2.0 * std::numbers::pi * k / 64.0;
    const Image rotated = rotate_image(phantom, a);
    const double m = mse(phantom, rotated);
    if (m < rep.min_rotation_mse) {
      rep.min_rotation_mse = m;
      rep.worst_angle = a;
    }
    rep.max_roundtrip_mse = std::max(rep.max_roundtrip_mse, mse(phantom, rotate_image(rotated, -a)));
  }
  return rep;
}

/// Renders a projection stack. Sample `first_index + i` gets
/// theta ~ Uniform[0, 2pi) and input = normalize(rotate(phantom) + noise).
/// Train and test splits use disjoint index ranges of the same stream.
inline DatasetSplit synth_projection_stack(const PhantomSpec& spec, std::size_t count, SplitTag split, std::uint64_t seed,
                                           std::size_t first_index = 0) {
  const Image phantom = render_phantom(spec);
  const auto sym = symmetry_sweep(phantom);
  if (!sym.asymmetric())
    throw ValidationError("phantom is rotationally symmetric near " + std::to_string(sym.worst_angle) +
                          " rad (rotation MSE " + std::to_string(sym.min_rotation_mse) + " vs round-trip " +
                          std::to_string(sym.max_roundtrip_mse) + "); angle is unidentifiable");
  DatasetSplit out;
  out.split = split;
  out.source = SourceTag::synth_5hdb;
  out.samples.reserve(count);
  const auto dist = AngleDistribution::full_circle();
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t index = first_index + i;
    std::mt19937_64 rot_rng(derive_seed(seed, detail::kRotationStream, index));
    std::mt19937_64 noise_rng(derive_seed(seed, detail::kNoiseStream, index));
    const double theta = sample_angle(dist, rot_rng);
    Image input = rotate_image(phantom, theta);
    if (spec.noise_std > 0.0) {
      std::normal_distribution<double> noise(0.0, spec.noise_std);
      for (auto& v : input.pixels) v = static_cast<float>(v + noise(noise_rng));
    }
    out.samples.push_back({normalize(input), phantom, theta});
  }
  validate_split(out, seed);
  return out;
}

/// Fresh rotations for one epoch (augmentation variant); targets are kept.
inline DatasetSplit rerotate(const DatasetSplit& split, std::uint64_t seed, std::uint64_t epoch, double noise_std) {
  DatasetSplit out;
  out.split = split.split;
  out.source = split.source;
  out.samples.reserve(split.size());
  const auto dist = angle_distribution(split.source);
  for (std::size_t i = 0; i < split.size(); ++i) {
    std::mt19937_64 rng(derive_seed(seed, detail::kEpochStream + epoch, i));
    const auto& target = split.samples[i].target;
    const double theta = sample_angle(dist, rng);
    Image input = rotate_image(target, theta);
    if (split.source == SourceTag::synth_5hdb) {
      if (noise_std > 0.0) {
        std::normal_distribution<double> noise(0.0, noise_std);
        for (auto& v : input.pixels) v = static_cast<float>(v + noise(rng));
      }
      input = normalize(input);
    }
    out.samples.push_back({std::move(input), target, theta});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cache files (little-endian):
//   "RIAE" | u32 version | u8 source | u8 split | u64 count | u32 H | u32 W
//   per sample: f32[H*W] target | f32[H*W] input | f64 theta
//   u32 CRC32 of every preceding byte, header included

inline constexpr std::uint32_t kCacheVersion = 1;
inline constexpr char kCacheMagic[4] = {'R', 'I', 'A', 'E'};

inline std::vector<unsigned char> encode_cache(const DatasetSplit& split) {
  const std::uint32_t h = split.empty() ? 0 : static_cast<std::uint32_t>(split.samples.front().target.height);
  const std::uint32_t w = split.empty() ? 0 : static_cast<std::uint32_t>(split.samples.front().target.width);
  io::Writer out;
  out.put_raw({reinterpret_cast<const unsigned char*>(kCacheMagic), 4});
  out.put<std::uint32_t>(kCacheVersion);
  out.put(static_cast<std::uint8_t>(split.source));
  out.put(static_cast<std::uint8_t>(split.split));
  out.put<std::uint64_t>(split.size());
  out.put(h);
  out.put(w);
  for (const auto& s : split.samples) {
    if (s.target.height != h || s.target.width != w || s.input.height != h || s.input.width != w)
      throw DimensionError("cache: all samples must share one image size");
    out.put_array<float>(s.target.pixels);
    out.put_array<float>(s.input.pixels);
    out.put(s.theta);
  }
  const auto crc = io::crc32_of(out.bytes());
  out.put(crc);
  return std::move(out.bytes());
}

inline DatasetSplit decode_cache(std::span<const unsigned char> bytes, const std::string& what = "cache") {
  io::Reader in(bytes, what);
  const auto magic = in.take(4);
  if (!std::equal(magic.begin(), magic.end(), kCacheMagic)) throw FormatError(what + ": bad magic (expected RIAE)");
  const auto version = in.get<std::uint32_t>();
  if (version != kCacheVersion)
    throw VersionError(what + ": cache format version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kCacheVersion) + ")");
  const auto source = in.get<std::uint8_t>();
  const auto split_tag = in.get<std::uint8_t>();
  if (source > 1 || split_tag > 1) throw FormatError(what + ": unknown source or split tag");
  const auto count = in.get<std::uint64_t>();
  const auto h = in.get<std::uint32_t>();
  const auto w = in.get<std::uint32_t>();
  const std::size_t record = 2 * std::size_t{h} * w * sizeof(float) + sizeof(double);
  if (in.remaining() < sizeof(std::uint32_t) || (in.remaining() - sizeof(std::uint32_t)) / std::max<std::size_t>(record, 1) < count)
    throw TruncationError(what + ": truncated, header declares " + std::to_string(count) + " samples of " +
                          std::to_string(record) + " bytes but only " + std::to_string(in.remaining()) + " bytes follow");
  const auto covered = bytes.first(in.position() + count * record);
  DatasetSplit split;
  split.source = static_cast<SourceTag>(source);
  split.split = static_cast<SplitTag>(split_tag);
  split.samples.resize(count);
  for (auto& s : split.samples) {
    s.target = Image(h, w);
    s.input = Image(h, w);
    in.get_array<float>(s.target.pixels);
    in.get_array<float>(s.input.pixels);
    s.theta = in.get<double>();
  }
  const auto stored = in.get<std::uint32_t>();
  if (stored != io::crc32_of(covered)) throw ChecksumError(what + ": CRC32 mismatch, file is corrupt");
  if (in.remaining() != 0) throw FormatError(what + ": trailing bytes after footer");
  return split;
}

inline void cache_dataset(const DatasetSplit& split, const std::filesystem::path& path) {
  io::write_file(path, encode_cache(split));
}

inline DatasetSplit load_cache(const std::filesystem::path& path) {
  return decode_cache(io::read_file(path), path.string());
}

}  // namespace canon_pose
