#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "canon_pose/checkpoint.hpp"
#include "canon_pose/datasets.hpp"
#include "canon_pose/imaging.hpp"
#include "canon_pose/model.hpp"
#include "canon_pose/png.hpp"
#include "canon_pose/training.hpp"

namespace canon_pose {

struct MetricsReport {
  double avg_mse_per_pixel = 0.0;
  double avg_mse_pixel_sum = 0.0;
  double worst_mse_per_pixel = 0.0;
  std::size_t worst_index = 0;
  double angle_mae = 0.0;
  double angle_mse = 0.0;
  std::size_t n_samples = 0;
  double echo_baseline_mse = 0.0;  // MSE(input, target): the do-nothing reference
  bool wrapped_angles = false;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(MetricsReport, avg_mse_per_pixel, avg_mse_pixel_sum, worst_mse_per_pixel, worst_index,
                                   angle_mae, angle_mse, n_samples, echo_baseline_mse, wrapped_angles)

/// Pairwise summation; the result does not depend on accumulation order
/// beyond rounding of the halves.
inline double pairwise_sum(std::span<const double> v) {
  if (v.size() <= 8) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  const std::size_t half = v.size() / 2;
  return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

inline double pairwise_mean(std::span<const double> v) {
  return v.empty() ? 0.0 : pairwise_sum(v) / static_cast<double>(v.size());
}

/// Per-sample outputs of a forward pass.
struct Predictions {
  std::vector<Image> reconstructions;
  std::vector<double> theta_hat;
};

inline Predictions predict(Networks<float>& nets, std::span<const Image> inputs, std::size_t batch_size = 256) {
  Predictions out;
  out.reconstructions.reserve(inputs.size());
  out.theta_hat.reserve(inputs.size());
  for (std::size_t start = 0; start < inputs.size(); start += batch_size) {
    std::vector<const Image*> batch;
    for (std::size_t i = start; i < std::min(inputs.size(), start + batch_size); ++i) batch.push_back(&inputs[i]);
    const auto x = stack_images<float>(batch);
    auto latent = nets.encode(x);
    const auto x_hat = nets.decode(latent.content);
    const std::size_t h = x.dim(2), w = x.dim(3);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      Image img(h, w);
      std::copy_n(x_hat.ptr() + b * h * w, h * w, img.pixels.begin());
      out.reconstructions.push_back(std::move(img));
      out.theta_hat.push_back(latent.theta_hat[b]);
    }
  }
  return out;
}

inline Predictions predict(Networks<float>& nets, const DatasetSplit& split, std::size_t batch_size = 256) {
  std::vector<Image> inputs;
  inputs.reserve(split.size());
  for (const auto& s : split.samples) inputs.push_back(s.input);
  return predict(nets, inputs, batch_size);
}

inline void check_compatible(const Networks<float>& nets, const DatasetSplit& split) {
  if (split.empty()) throw ArgumentError("evaluation: empty split");
  if (split.image_size() != nets.spec().input_size)
    throw DimensionError("evaluation: model input size " + std::to_string(nets.spec().input_size) + " != split image size " +
                         std::to_string(split.image_size()));
}

/// Lowest index attaining the maximum.
inline std::size_t argmax_first(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

inline std::pair<double, double> angle_error(std::span<const double> theta, std::span<const double> theta_hat, bool wrap) {
  if (theta.size() != theta_hat.size()) throw DimensionError("angle_error: size mismatch");
  std::vector<double> abs_err(theta.size()), sq_err(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double d = wrap ? wrap_angle(theta[i] - theta_hat[i]) : theta[i] - theta_hat[i];
    abs_err[i] = std::abs(d);
    sq_err[i] = d * d;
  }
  return {pairwise_mean(abs_err), pairwise_mean(sq_err)};
}

/// Metrics from precomputed predictions (shared by every evaluation entry point).
inline MetricsReport metrics_from(const DatasetSplit& split, const Predictions& pred, std::vector<double>* per_image = nullptr) {
  if (split.empty()) throw ArgumentError("evaluation: empty split");
  if (pred.reconstructions.size() != split.size()) throw DimensionError("evaluation: prediction count mismatch");
  MetricsReport rep;
  rep.n_samples = split.size();
  rep.wrapped_angles = angle_distribution(split.source).circular();
  std::vector<double> mses(split.size()), echo(split.size()), theta(split.size());
  for (std::size_t i = 0; i < split.size(); ++i) {
    mses[i] = mse(split.samples[i].target, pred.reconstructions[i]);
    echo[i] = mse(split.samples[i].input, split.samples[i].target);
    theta[i] = split.samples[i].theta;
  }
  rep.avg_mse_per_pixel = pairwise_mean(mses);
  rep.avg_mse_pixel_sum = rep.avg_mse_per_pixel * static_cast<double>(split.samples.front().target.size());
  rep.worst_index = argmax_first(mses);
  rep.worst_mse_per_pixel = mses[rep.worst_index];
  rep.echo_baseline_mse = pairwise_mean(echo);
  std::tie(rep.angle_mae, rep.angle_mse) = angle_error(theta, pred.theta_hat, rep.wrapped_angles);
  if (per_image) *per_image = std::move(mses);
  return rep;
}

inline MetricsReport evaluate(Networks<float>& nets, const DatasetSplit& split) {
  check_compatible(nets, split);
  return metrics_from(split, predict(nets, split));
}

inline MetricsReport evaluate(const Checkpoint& ck, const DatasetSplit& split) {
  auto nets = networks_from(ck);
  return evaluate(nets, split);
}

struct WorstCase {
  std::size_t index = 0;
  double mse = 0.0;
  Image input, target, reconstruction;
};

inline WorstCase worst_case(Networks<float>& nets, const DatasetSplit& split) {
  check_compatible(nets, split);
  const auto pred = predict(nets, split);
  std::vector<double> mses;
  const auto rep = metrics_from(split, pred, &mses);
  const auto& s = split.samples[rep.worst_index];
  return {rep.worst_index, rep.worst_mse_per_pixel, s.input, s.target, pred.reconstructions[rep.worst_index]};
}

inline std::pair<double, double> angle_error(Networks<float>& nets, const DatasetSplit& split) {
  check_compatible(nets, split);
  const auto rep = metrics_from(split, predict(nets, split));
  return {rep.angle_mae, rep.angle_mse};
}

inline std::string metrics_csv(const MetricsReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "avg_mse_per_pixel,avg_mse_pixel_sum,worst_mse_per_pixel,worst_index,angle_mae,angle_mse,n_samples,"
                "echo_baseline_mse\n%.9g,%.9g,%.9g,%zu,%.9g,%.9g,%zu,%.9g\n",
                r.avg_mse_per_pixel, r.avg_mse_pixel_sum, r.worst_mse_per_pixel, r.worst_index, r.angle_mae, r.angle_mse,
                r.n_samples, r.echo_baseline_mse);
  return buf;
}

// ---------------------------------------------------------------------------
// Image grids: rows of equally sized images separated by white gutters.

inline constexpr std::size_t kGutter = 2;

struct GridRow {
  std::string label;
  std::vector<Image> images;
};

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(static_cast<double>(v), 0.0, 1.0) * 255.0));
}

inline png::Gray8 compose_grid(const std::vector<GridRow>& rows) {
  if (rows.empty() || rows.front().images.empty()) throw ArgumentError("render_grid: need at least one non-empty row");
  const std::size_t h = rows.front().images.front().height, w = rows.front().images.front().width;
  std::size_t cols = 0;
  for (const auto& row : rows) {
    cols = std::max(cols, row.images.size());
    for (const auto& img : row.images)
      if (img.height != h || img.width != w) throw DimensionError("render_grid: all images must share one size");
  }
  png::Gray8 grid;
  grid.height = rows.size() * h + (rows.size() - 1) * kGutter;
  grid.width = cols * w + (cols - 1) * kGutter;
  grid.pixels.assign(grid.height * grid.width, 255);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].images.size(); ++c) {
      const auto& img = rows[r].images[c];
      const std::size_t oy = r * (h + kGutter), ox = c * (w + kGutter);
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) grid.pixels[(oy + y) * grid.width + ox + x] = to_byte(img.at(y, x));
    }
  return grid;
}

inline void render_grid(const std::vector<GridRow>& rows, const std::filesystem::path& path) {
  png::write_gray8(path, compose_grid(rows));
}

/// Ground truth / input / reconstruction rows for the selected samples.
inline std::vector<GridRow> comparison_rows(Networks<float>& nets, const DatasetSplit& split, std::span<const std::size_t> indices) {
  check_compatible(nets, split);
  std::vector<Image> inputs;
  GridRow truth{"ground truth", {}}, input{"input", {}}, recon{"reconstruction", {}};
  for (auto i : indices) {
    if (i >= split.size()) throw ArgumentError("render: sample index " + std::to_string(i) + " out of range");
    truth.images.push_back(split.samples[i].target);
    input.images.push_back(split.samples[i].input);
    inputs.push_back(split.samples[i].input);
  }
  recon.images = predict(nets, inputs).reconstructions;
  return {truth, input, recon};
}

}  // namespace canon_pose
