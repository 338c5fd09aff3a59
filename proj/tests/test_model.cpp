#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "canon_pose/model.hpp"

using namespace canon_pose;
using namespace canon_pose::nn;

namespace {

Tensor<float> random_images(std::size_t b, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor<float> x({b, 1, n, n});
  for (auto& v : x.data) v = u(rng);
  return x;
}

}  // namespace

TEST(NetworkSpec, Pyramids) {
  NetworkSpec spec;
  EXPECT_EQ(spec.pyramid(4), (std::vector<std::size_t>{40, 20, 10, 5, 2}));
  spec.input_size = 28;
  EXPECT_EQ(spec.pyramid(4), (std::vector<std::size_t>{28, 14, 7, 3, 1}));
  spec.input_size = 8;
  EXPECT_THROW(spec.validate(), DimensionError);
}

TEST(Encode, ShapeContract) {
  Networks<float> nets(NetworkSpec{});
  nets.initialize(1);
  const auto latent = nets.encode(random_images(4, 40, 2));
  ASSERT_EQ(latent.size(), 4u);
  EXPECT_EQ(latent.content.shape, (Shape{4, 32}));
  EXPECT_THROW(nets.encode(random_images(4, 28, 2)), DimensionError);
}

TEST(Encode, ZeroInputGivesZeroAngle) {
  Networks<float> nets(NetworkSpec{});
  nets.initialize(3);
  const auto latent = nets.encode(Tensor<float>({3, 1, 40, 40}, 0.0f));
  for (float t : latent.theta_hat) EXPECT_EQ(t, 0.0f);
}

TEST(Encode, SinglePixelPerturbationChangesOutput) {
  Networks<double> nets(NetworkSpec{});
  nets.initialize(4);
  Tensor<double> x({1, 1, 40, 40}, 0.3);
  const auto before = nets.encoder.forward(x);
  x[20 * 40 + 20] += 1e-3;
  const auto after = nets.encoder.forward(x);
  double diff = 0.0;
  for (std::size_t i = 0; i < before.size(); ++i) diff = std::max(diff, std::abs(after[i] - before[i]));
  EXPECT_GT(diff, 0.0);
}

TEST(Decode, RangeAndPurity) {
  Networks<float> nets(NetworkSpec{});
  nets.initialize(5);
  std::mt19937_64 rng(6);
  Tensor<float> z({4, 32});
  for (auto& v : z.data) v = std::normal_distribution<float>(0.0f, 3.0f)(rng);
  for (std::size_t j = 0; j < 32; ++j) z[32 + j] = z[j];
  const auto out = nets.decode(z);
  EXPECT_EQ(out.shape, (Shape{4, 1, 40, 40}));
  for (float v : out.data) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
  for (std::size_t k = 0; k < 1600; ++k) EXPECT_EQ(out[k], out[1600 + k]);
  EXPECT_EQ(nets.decode(z), out);
  EXPECT_THROW(nets.decode(Tensor<float>({4, 33})), DimensionError);
}

TEST(Decode, SaturatedOutputStaysInsideUnitInterval) {
  Sequential<float> net;
  net.add<Sigmoid<float>>();
  Tensor<float> extreme({1, 2});
  extreme[0] = -200.0f;
  extreme[1] = 200.0f;
  const auto s = net.forward(extreme);
  EXPECT_GT(s[0], 0.0f);
  EXPECT_LT(s[1], 1.0f);
  EXPECT_EQ(net.forward(Tensor<float>({1, 1}, 0.0f))[0], 0.5f);
}

TEST(Criticize, FiniteScoresAndClippedBound) {
  NetworkSpec spec;
  spec.input_size = 28;
  Networks<float> nets(spec);
  nets.initialize(7);
  const auto scores = nets.criticize(random_images(8, 28, 8));
  ASSERT_EQ(scores.size(), 8u);
  for (float s : scores) EXPECT_TRUE(std::isfinite(s));

  // every weight at +c maximizes the score on an all-ones image
  const float c = 0.01f;
  for (auto* p : nets.critic.params()) p->value.fill(c);
  const auto top = nets.criticize(Tensor<float>({1, 1, 28, 28}, 1.0f));
  double bound = 1.0;  // input magnitude
  std::size_t channels = 1;
  for (std::size_t ch : spec.critic_channels) {
    bound = bound * c * static_cast<double>(channels * 16) + c;
    channels = ch;
  }
  const auto sizes = spec.pyramid(spec.critic_channels.size());
  bound = bound * c * static_cast<double>(channels * sizes.back() * sizes.back()) + c;
  EXPECT_LE(std::abs(top[0]), bound * (1.0 + 1e-5));
  EXPECT_GT(top[0], 0.0f);
}

TEST(SplitLatent, RoundTripAndGuard) {
  Tensor<float> raw({2, 33});
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<float>(i) * 0.5f;
  const auto latent = split_latent(raw, 32);
  EXPECT_EQ(latent.theta_hat[0], 0.0f);
  EXPECT_EQ(latent.theta_hat[1], 16.5f);
  EXPECT_EQ(latent.content[0], 0.5f);
  EXPECT_EQ(join_latent(latent.theta_hat, latent.content), raw);
  EXPECT_THROW(split_latent(Tensor<float>({2, 32}), 32), DimensionError);
  const auto codes = to_codes(latent);
  EXPECT_EQ(codes[1].z.size(), 32u);
}

TEST(Init, TruncatedNormalStatistics) {
  Networks<float> nets(NetworkSpec{});
  nets.initialize(9);
  for (auto* net : {&nets.encoder, &nets.decoder, &nets.critic}) {
    for (auto* p : net->params()) {
      if (p->value.rank() == 1) {
        const float expected = p->name.ends_with(".scale") ? 1.0f : 0.0f;
        for (float v : p->value.data) EXPECT_EQ(v, expected) << p->name;
        continue;
      }
      double sq = 0.0, mx = 0.0;
      for (float v : p->value.data) {
        sq += double(v) * v;
        mx = std::max(mx, double(std::abs(v)));
      }
      EXPECT_LE(mx, 0.04 + 1e-7) << p->name;
      if (p->value.size() > 1000) EXPECT_NEAR(std::sqrt(sq / p->value.size()), 0.02 * 0.88, 0.002) << p->name;
    }
  }
}

TEST(ParameterSet, ExportImportRoundTrip) {
  Networks<float> a(NetworkSpec{}), b(NetworkSpec{});
  a.initialize(10);
  b.initialize(11);
  EXPECT_NE(a.decoder_parameters().fingerprint(), b.decoder_parameters().fingerprint());
  import_parameters(b.decoder, a.decoder_parameters());
  EXPECT_EQ(a.decoder_parameters(), b.decoder_parameters());
  EXPECT_THROW(import_parameters(b.encoder, a.decoder_parameters()), DimensionError);
  auto bad = a.critic_parameters();
  bad.arrays[0].values[0] = std::nanf("");
  EXPECT_THROW(import_parameters(b.critic, bad), NumericError);
}
