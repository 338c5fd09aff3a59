// Central finite-difference checks for every layer type and every loss at
// 64-bit precision.
#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numbers>
#include <random>

#include "canon_pose/layers.hpp"
#include "canon_pose/losses.hpp"
#include "canon_pose/model.hpp"
#include "gradcheck.hpp"

using namespace canon_pose;
using namespace canon_pose::nn;
using canon_pose::testing::check_network;
using canon_pose::testing::max_relative_error;

namespace {

constexpr double kTol = 1e-4;

TEST(GradientCheck, Conv2dStrided) {
  Sequential<double> net;
  net.add<Conv2d<double>>(2, 3, 4, 2, 1, "c");
  EXPECT_LE(check_network(net, {2, 2, 8, 8}, 11), kTol);
}

TEST(GradientCheck, Conv2dUnitStrideNoPadding) {
  Sequential<double> net;
  net.add<Conv2d<double>>(3, 2, 3, 1, 0, "c");
  EXPECT_LE(check_network(net, {2, 3, 6, 6}, 12), kTol);
}

TEST(GradientCheck, ConvTranspose2d) {
  Sequential<double> net;
  net.add<ConvTranspose2d<double>>(3, 2, 4, 2, 1, 0, "t");
  EXPECT_LE(check_network(net, {2, 3, 3, 3}, 13), kTol);
}

TEST(GradientCheck, ConvTranspose2dOutputPadding) {
  Sequential<double> net;
  net.add<ConvTranspose2d<double>>(2, 4, 4, 2, 1, 1, "t");
  EXPECT_LE(check_network(net, {2, 2, 3, 3}, 14), kTol);
}

TEST(GradientCheck, Linear) {
  Sequential<double> net;
  net.add<Linear<double>>(7, 5, "l");
  EXPECT_LE(check_network(net, {3, 7}, 15), kTol);
}

TEST(GradientCheck, LeakyReLU) {
  Sequential<double> net;
  net.add<Linear<double>>(6, 6, "l");
  net.add<LeakyReLU<double>>(0.2);
  EXPECT_LE(check_network(net, {4, 6}, 16), kTol);
}

TEST(GradientCheck, Sigmoid) {
  Sequential<double> net;
  net.add<Sigmoid<double>>();
  EXPECT_LE(check_network(net, {3, 5}, 17), kTol);
}

TEST(GradientCheck, LayerNormSpatial) {
  Sequential<double> net;
  net.add<Conv2d<double>>(1, 3, 3, 1, 1, "c");
  net.add<LayerNorm<double>>(3, "n");
  EXPECT_LE(check_network(net, {2, 1, 4, 4}, 25), kTol);
}

TEST(GradientCheck, LayerNormFlat) {
  Sequential<double> net;
  net.add<Linear<double>>(3, 4, "l");
  net.add<LayerNorm<double>>(4, "n");
  EXPECT_LE(check_network(net, {3, 3}, 26), kTol);
}

TEST(GradientCheck, MeanReduction) {
  // critic-style score averaged over the batch
  Sequential<double> net;
  net.add<Linear<double>>(4, 1, "l");
  auto f = [&](const Tensor<double>& x) {
    auto y = net.forward(x);
    double m = 0.0;
    for (double v : y.data) m += v;
    return m / static_cast<double>(y.size());
  };
  std::mt19937_64 rng(18);
  for (auto* p : net.params())
    for (auto& v : p->value.data) v = std::normal_distribution<double>(0.0, 0.5)(rng);
  Tensor<double> x({5, 4});
  for (auto& v : x.data) v = std::normal_distribution<double>(0.0, 1.0)(rng);
  net.zero_grad();
  net.forward(x);
  Tensor<double> g({5, 1}, 1.0 / 5.0);
  const auto dx = net.backward(g);
  EXPECT_LE(max_relative_error(f, x, dx), kTol);
}

void check_toy_networks(const std::string& normalization) {
  NetworkSpec spec;
  spec.input_size = 8;
  spec.content_dim = 3;
  spec.encoder_channels = {2, 4};
  spec.critic_channels = {2, 3};
  spec.normalization = normalization;
  Networks<double> nets(spec);
  std::mt19937_64 rng(19);
  auto scramble = [&](Sequential<double>& net) {
    for (auto* p : net.params())
      for (auto& v : p->value.data) v = std::normal_distribution<double>(0.0, 0.3)(rng);
  };
  scramble(nets.encoder);
  scramble(nets.decoder);
  scramble(nets.critic);
  nets.encoder.set_propagate_input_grad(true);
  EXPECT_LE(check_network(nets.encoder, {2, 1, 8, 8}, 20), kTol);
  EXPECT_LE(check_network(nets.decoder, {2, 3}, 21), kTol);
  EXPECT_LE(check_network(nets.critic, {2, 1, 8, 8}, 22), kTol);
}

TEST(GradientCheck, ToyEncoderDecoderCritic) { check_toy_networks("layer"); }

TEST(GradientCheck, ToyEncoderDecoderCriticWithoutNormalization) { check_toy_networks("none"); }

TEST(GradientCheck, DecoderOutputGradientMatchesFiniteDifferences) {
  // 2-layer toy decoder, gradient of the mean output with respect to z
  Sequential<double> dec;
  dec.add<Linear<double>>(3, 2 * 2 * 2, "d.head");
  dec.add<LeakyReLU<double>>(0.2);
  dec.add<Reshape<double>>(Shape{2, 2, 2});
  dec.add<ConvTranspose2d<double>>(2, 1, 4, 2, 1, 0, "d.deconv");
  dec.add<Sigmoid<double>>();
  EXPECT_LE(check_network(dec, {2, 3}, 23), kTol);
}

TEST(GradientCheck, AngleLoss) {
  for (bool wrap : {false, true}) {
    for (double theta : {-2.0, -0.3, 0.4, 1.7, 3.0}) {
      for (double pred : {-1.1, 0.05, 0.9, 5.5}) {
        const double h = 1e-5;
        const double num = (angle_loss(theta, pred + h, wrap) - angle_loss(theta, pred - h, wrap)) / (2.0 * h);
        const double ana = angle_loss_grad(theta, pred, wrap);
        EXPECT_LE(std::abs(num - ana) / std::max(1.0, std::abs(num)), kTol) << "theta=" << theta << " pred=" << pred;
      }
    }
  }
  EXPECT_EQ(angle_loss_grad(0.7, 0.7, false), 0.0);
}

TEST(GradientCheck, ReconLossBothVariants) {
  std::mt19937_64 rng(24);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> x(2 * 9), xh(2 * 9);
  for (auto& v : x) v = u(rng);
  for (auto& v : xh) v = u(rng);
  for (bool squared : {false, true}) {
    const auto loss = recon_loss<double>(x, xh, 9, squared);
    for (std::size_t i = 0; i < xh.size(); ++i) {
      const double h = 1e-5;
      auto plus = xh, minus = xh;
      plus[i] += h;
      minus[i] -= h;
      const double num =
          (recon_loss<double>(x, plus, 9, squared).value - recon_loss<double>(x, minus, 9, squared).value) / (2.0 * h);
      EXPECT_LE(std::abs(num - loss.grad[i]) / std::max(1.0, std::abs(num)), kTol);
    }
  }
}

TEST(GradientCheck, ReconLossZeroSubgradientAtEquality) {
  std::vector<double> x{0.1, 0.5, 0.9};
  const auto loss = recon_loss<double>(x, x, 3);
  EXPECT_EQ(loss.value, 0.0);
  for (double g : loss.grad) EXPECT_EQ(g, 0.0);
}

TEST(GradientCheck, AdversarialLosses) {
  std::vector<double> real{0.3, -0.2, 1.1}, fake{0.7, 0.1, -0.5};
  for (auto conv : {AdvConvention::wasserstein, AdvConvention::paper_literal}) {
    const auto c = critic_loss<double>(real, fake, conv);
    const auto d = decoder_adv_loss<double>(fake, conv);
    for (std::size_t i = 0; i < 3; ++i) {
      const double h = 1e-5;
      auto rp = real, rm = real, fp = fake, fm = fake;
      rp[i] += h;
      rm[i] -= h;
      fp[i] += h;
      fm[i] -= h;
      EXPECT_NEAR((critic_loss<double>(rp, fake, conv).value - critic_loss<double>(rm, fake, conv).value) / (2 * h),
                  c.grad_real[i], kTol);
      EXPECT_NEAR((critic_loss<double>(real, fp, conv).value - critic_loss<double>(real, fm, conv).value) / (2 * h),
                  c.grad_fake[i], kTol);
      EXPECT_NEAR((decoder_adv_loss<double>(fp, conv).value - decoder_adv_loss<double>(fm, conv).value) / (2 * h),
                  d.grad[i], kTol);
    }
  }
}

}  // namespace
