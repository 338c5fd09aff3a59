#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "canon_pose/errors.hpp"
#include "canon_pose/imaging.hpp"

namespace canon_pose {

struct LossWeights {
  double angle = 1.0;
  double rec = 1.0;
  double adv = 1.0;
};

struct LossBreakdown {
  double angle = 0.0;
  double rec = 0.0;
  double adv_decoder = 0.0;
  double adv_critic = 0.0;
  double total = 0.0;
};

// Adversarial sign convention. `wasserstein`: critic minimizes
// mean(fake) - mean(real), decoder minimizes -mean(fake). `paper_literal`:
// critic minimizes mean(real) - mean(fake), decoder minimizes mean(fake).
enum class AdvConvention { wasserstein, paper_literal };

/// exp(|theta - theta_hat|) - 1, on the wrapped difference when `wrap` is set.
inline double angle_loss(double theta, double theta_hat, bool wrap) {
  const double d = wrap ? wrap_angle(theta - theta_hat) : theta - theta_hat;
  return std::expm1(std::abs(d));
}

/// d angle_loss / d theta_hat, zero at the kink.
inline double angle_loss_grad(double theta, double theta_hat, bool wrap) {
  const double d = wrap ? wrap_angle(theta - theta_hat) : theta - theta_hat;
  if (d == 0.0) return 0.0;
  return -std::exp(std::abs(d)) * (d > 0.0 ? 1.0 : -1.0);
}

template <typename T>
struct BatchLoss {
  double value = 0.0;
  std::vector<T> grad;  // d value / d prediction, same length as the prediction
};

template <typename T>
BatchLoss<T> angle_loss_batch(std::span<const double> theta, std::span<const T> theta_hat, bool wrap) {
  if (theta.size() != theta_hat.size()) throw DimensionError("angle loss: batch size mismatch");
  if (theta.empty()) throw ArgumentError("angle loss: empty batch");
  const double inv = 1.0 / static_cast<double>(theta.size());
  BatchLoss<T> out{0.0, std::vector<T>(theta.size())};
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double pred = static_cast<double>(theta_hat[i]);
    out.value += angle_loss(theta[i], pred, wrap) * inv;
    out.grad[i] = static_cast<T>(angle_loss_grad(theta[i], pred, wrap) * inv);
  }
  return out;
}

/// Per image ||x - x_hat||_2 + ||x - x_hat||_1 (or squared L2 when
/// `squared_l2`), averaged over the batch. `pixels` is the per-image count.
template <typename T>
BatchLoss<T> recon_loss(std::span<const T> x, std::span<const T> x_hat, std::size_t pixels, bool squared_l2 = false) {
  if (x.size() != x_hat.size()) throw DimensionError("recon loss: shape mismatch");
  if (pixels == 0 || x.size() % pixels != 0) throw DimensionError("recon loss: size is not a multiple of the image size");
  const std::size_t batch = x.size() / pixels;
  if (batch == 0) throw ArgumentError("recon loss: empty batch");
  const double inv = 1.0 / static_cast<double>(batch);
  BatchLoss<T> out{0.0, std::vector<T>(x.size())};
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t off = b * pixels;
    double sq = 0.0, l1 = 0.0;
    for (std::size_t i = 0; i < pixels; ++i) {
      const double d = static_cast<double>(x[off + i]) - static_cast<double>(x_hat[off + i]);
      sq += d * d;
      l1 += std::abs(d);
    }
    const double l2 = std::sqrt(sq);
    out.value += ((squared_l2 ? sq : l2) + l1) * inv;
    for (std::size_t i = 0; i < pixels; ++i) {
      const double d = static_cast<double>(x[off + i]) - static_cast<double>(x_hat[off + i]);
      double g = 0.0;
      if (squared_l2) {
        g = -2.0 * d;
      } else if (l2 > 0.0) {
        g = -d / l2;
      }
      if (d > 0.0) g -= 1.0;
      if (d < 0.0) g += 1.0;
      out.grad[off + i] = static_cast<T>(g * inv);
    }
  }
  return out;
}

template <typename T>
double mean(std::span<const T> v) {
  double acc = 0.0;
  for (const T x : v) acc += static_cast<double>(x);
  return acc / static_cast<double>(v.size());
}

/// Critic objective. Gradients are with respect to the real and the fake scores.
template <typename T>
struct CriticLoss {
  double value = 0.0;
  std::vector<T> grad_real;
  std::vector<T> grad_fake;
};

template <typename T>
CriticLoss<T> critic_loss(std::span<const T> scores_real, std::span<const T> scores_fake,
                          AdvConvention convention = AdvConvention::wasserstein) {
  if (scores_real.empty() || scores_fake.empty()) throw ArgumentError("critic loss: empty batch");
  if (scores_real.size() != scores_fake.size()) throw DimensionError("critic loss: real/fake batch size mismatch");
  const double sign = convention == AdvConvention::wasserstein ? 1.0 : -1.0;
  const double n = static_cast<double>(scores_real.size());
  CriticLoss<T> out;
  out.value = sign * (mean(scores_fake) - mean(scores_real));
  out.grad_fake.assign(scores_fake.size(), static_cast<T>(sign / n));
  out.grad_real.assign(scores_real.size(), static_cast<T>(-sign / n));
  return out;
}

template <typename T>
BatchLoss<T> decoder_adv_loss(std::span<const T> scores_fake, AdvConvention convention = AdvConvention::wasserstein) {
  if (scores_fake.empty()) throw ArgumentError("decoder adversarial loss: empty batch");
  const double sign = convention == AdvConvention::wasserstein ? -1.0 : 1.0;
  const double n = static_cast<double>(scores_fake.size());
  return {sign * mean(scores_fake), std::vector<T>(scores_fake.size(), static_cast<T>(sign / n))};
}

/// Weighted sum of the encoder/decoder objectives. The critic loss is
/// carried along for reporting only.
inline LossBreakdown total_loss(double angle, double rec, double adv_decoder, const LossWeights& w) {
  LossBreakdown out;
  out.angle = angle;
  out.rec = rec;
  out.adv_decoder = adv_decoder;
  out.total = w.angle * angle + w.rec * rec + w.adv * adv_decoder;
  return out;
}

}  // namespace canon_pose
