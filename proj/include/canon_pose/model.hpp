#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "canon_pose/layers.hpp"

namespace canon_pose {

struct NetworkSpec {
  std::size_t input_size = 40;
  std::size_t content_dim = 32;
  std::vector<std::size_t> encoder_channels{32, 64, 128, 256};
  std::vector<std::size_t> critic_channels{32, 64, 128};
  double negative_slope = 0.2;
  // "layer": per-sample normalization after the inner encoder/decoder
  // layers; "none": plain convolution stacks. The critic is never normalized.
  std::string normalization = "layer";

  bool normalized() const { return normalization == "layer"; }

  static constexpr std::size_t kernel = 4;
  static constexpr std::size_t stride = 2;
  static constexpr std::size_t padding = 1;

  static std::size_t downsampled(std::size_t n) {
    return n + 2 * padding < kernel ? 0 : (n + 2 * padding - kernel) / stride + 1;
  }

  /// Spatial sizes after each strided convolution, starting with input_size.
  std::vector<std::size_t> pyramid(std::size_t levels) const {
    std::vector<std::size_t> sizes{input_size};
    for (std::size_t i = 0; i < levels; ++i) sizes.push_back(downsampled(sizes.back()));
    return sizes;
  }

  void validate() const {
    if (input_size == 0 || content_dim == 0) throw DimensionError("network spec: input_size and content_dim must be positive");
    if (encoder_channels.empty() || critic_channels.empty()) throw DimensionError("network spec: channel lists must be non-empty");
    for (auto c : encoder_channels)
      if (c == 0) throw DimensionError("network spec: zero encoder channel count");
    for (auto c : critic_channels)
      if (c == 0) throw DimensionError("network spec: zero critic channel count");
    if (pyramid(encoder_channels.size()).back() < 1)
      throw DimensionError("network spec: encoder downsamples " + std::to_string(input_size) + " px below 1 px");
    if (pyramid(critic_channels.size()).back() < 1)
      throw DimensionError("network spec: critic downsamples " + std::to_string(input_size) + " px below 1 px");
    if (!(negative_slope >= 0.0 && negative_slope < 1.0)) throw DimensionError("network spec: negative_slope must lie in [0,1)");
    if (normalization != "layer" && normalization != "none")
      throw ConfigError("network spec: normalization must be 'layer' or 'none', got '" + normalization + "'");
  }

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

/// Predicted rotation plus content code for one image. The angle is raw
/// encoder output column 0; the content code is columns 1..D.
struct LatentCode {
  double theta_hat = 0.0;
  std::vector<float> z;
};

template <typename T>
struct LatentBatch {
  std::vector<T> theta_hat;    // B
  nn::Tensor<T> content;       // [B, D]

  std::size_t size() const { return theta_hat.size(); }
};

template <typename T>
LatentBatch<T> split_latent(const nn::Tensor<T>& raw, std::size_t content_dim) {
  if (raw.rank() != 2 || raw.dim(1) != content_dim + 1)
    throw DimensionError("split_latent: expected width " + std::to_string(content_dim + 1) + ", got " + nn::shape_string(raw.shape));
  const std::size_t batch = raw.dim(0);
  LatentBatch<T> out{std::vector<T>(batch), nn::Tensor<T>({batch, content_dim})};
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = raw.ptr() + b * (content_dim + 1);
    out.theta_hat[b] = row[0];
    std::copy_n(row + 1, content_dim, out.content.ptr() + b * content_dim);
  }
  return out;
}

template <typename T>
nn::Tensor<T> join_latent(const std::vector<T>& theta_hat, const nn::Tensor<T>& content) {
  const std::size_t batch = theta_hat.size();
  if (content.rank() != 2 || content.dim(0) != batch) throw DimensionError("join_latent: batch size mismatch");
  const std::size_t d = content.dim(1);
  nn::Tensor<T> raw({batch, d + 1});
  for (std::size_t b = 0; b < batch; ++b) {
    raw[b * (d + 1)] = theta_hat[b];
    std::copy_n(content.ptr() + b * d, d, raw.ptr() + b * (d + 1) + 1);
  }
  return raw;
}

template <typename T>
std::vector<LatentCode> to_codes(const LatentBatch<T>& batch) {
  std::vector<LatentCode> codes(batch.size());
  const std::size_t d = batch.content.dim(1);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    codes[b].theta_hat = static_cast<double>(batch.theta_hat[b]);
    codes[b].z.resize(d);
    for (std::size_t j = 0; j < d; ++j) codes[b].z[j] = static_cast<float>(batch.content[b * d + j]);
  }
  return codes;
}

/// Named trainable arrays of one network, in layer order.
struct ParameterSet {
  static constexpr std::uint32_t version = 1;
  struct Array {
    std::string name;
    nn::Shape shape;
    std::vector<float> values;
    friend bool operator==(const Array&, const Array&) = default;
  };
  std::vector<Array> arrays;

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& a : arrays) n += a.values.size();
    return n;
  }

  std::uint64_t fingerprint() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& a : arrays) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(a.values.data());
      for (std::size_t i = 0; i < a.values.size() * sizeof(float); ++i) h = (h ^ bytes[i]) * 1099511628211ULL;
    }
    return h;
  }

  friend bool operator==(const ParameterSet&, const ParameterSet&) = default;
};

template <typename T>
ParameterSet export_parameters(nn::Sequential<T>& net) {
  ParameterSet set;
  for (auto* p : net.params()) {
    ParameterSet::Array arr{p->name, p->value.shape, std::vector<float>(p->value.size())};
    for (std::size_t i = 0; i < p->value.size(); ++i) arr.values[i] = static_cast<float>(p->value[i]);
    set.arrays.push_back(std::move(arr));
  }
  return set;
}

template <typename T>
void import_parameters(nn::Sequential<T>& net, const ParameterSet& set) {
  auto params = net.params();
  if (params.size() != set.arrays.size())
    throw DimensionError("parameter set has " + std::to_string(set.arrays.size()) + " arrays, network expects " +
                         std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& arr = set.arrays[i];
    if (arr.name != params[i]->name || arr.shape != params[i]->value.shape)
      throw DimensionError("parameter '" + arr.name + "' " + nn::shape_string(arr.shape) + " does not match '" +
                           params[i]->name + "' " + nn::shape_string(params[i]->value.shape));
    for (std::size_t j = 0; j < arr.values.size(); ++j) {
      if (!std::isfinite(arr.values[j])) throw NumericError("parameter '" + arr.name + "' holds a non-finite value");
      params[i]->value[j] = static_cast<T>(arr.values[j]);
    }
  }
}

template <typename T>
void init_truncated_normal(nn::Sequential<T>& net, std::mt19937_64& rng, double stddev = 0.02) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto* p : net.params()) {
    if (nn::is_normalization_param(p->name)) continue;
    const bool is_bias = p->value.rank() == 1;
    for (auto& v : p->value.data) {
      if (is_bias) {
        v = T(0);
        continue;
      }
      double draw = 0.0;
      do {
        draw = normal(rng);
      } while (std::abs(draw) > 2.0);
      v = static_cast<T>(draw * stddev);
    }
  }
}

template <typename T>
nn::Sequential<T> build_encoder(const NetworkSpec& spec) {
  spec.validate();
  nn::Sequential<T> net;
  const auto sizes = spec.pyramid(spec.encoder_channels.size());
  std::size_t in = 1;
  for (std::size_t i = 0; i < spec.encoder_channels.size(); ++i) {
    net.template add<nn::Conv2d<T>>(in, spec.encoder_channels[i], NetworkSpec::kernel, NetworkSpec::stride,
                                    NetworkSpec::padding, "encoder.conv" + std::to_string(i));
    if (spec.normalized() && i > 0) net.template add<nn::LayerNorm<T>>(spec.encoder_channels[i], "encoder.norm" + std::to_string(i));
    net.template add<nn::LeakyReLU<T>>(static_cast<T>(spec.negative_slope));
    in = spec.encoder_channels[i];
  }
  const std::size_t side = sizes.back();
  net.template add<nn::Reshape<T>>(nn::Shape{in * side * side});
  net.template add<nn::Linear<T>>(in * side * side, spec.content_dim + 1, "encoder.head");
  net.set_propagate_input_grad(false);
  return net;
}

template <typename T>
nn::Sequential<T> build_decoder(const NetworkSpec& spec) {
  spec.validate();
  nn::Sequential<T> net;
  const std::size_t levels = spec.encoder_channels.size();
  const auto sizes = spec.pyramid(levels);
  const std::size_t top = spec.encoder_channels.back();
  const std::size_t side = sizes.back();
  net.template add<nn::Linear<T>>(spec.content_dim, top * side * side, "decoder.head");
  net.template add<nn::Reshape<T>>(nn::Shape{top, side, side});
  if (spec.normalized()) net.template add<nn::LayerNorm<T>>(top, "decoder.norm_head");
  net.template add<nn::LeakyReLU<T>>(static_cast<T>(spec.negative_slope));
  for (std::size_t i = levels; i-- > 0;) {
    const std::size_t in = spec.encoder_channels[i];
    const std::size_t out = i == 0 ? 1 : spec.encoder_channels[i - 1];
    const std::size_t natural = (sizes[i + 1] - 1) * NetworkSpec::stride + NetworkSpec::kernel - 2 * NetworkSpec::padding;
    const std::size_t output_padding = sizes[i] - natural;
    net.template add<nn::ConvTranspose2d<T>>(in, out, NetworkSpec::kernel, NetworkSpec::stride, NetworkSpec::padding,
                                             output_padding, "decoder.deconv" + std::to_string(levels - 1 - i));
    if (i == 0) {
      net.template add<nn::Sigmoid<T>>();
    } else {
      if (spec.normalized()) net.template add<nn::LayerNorm<T>>(out, "decoder.norm" + std::to_string(levels - 1 - i));
      net.template add<nn::LeakyReLU<T>>(static_cast<T>(spec.negative_slope));
    }
  }
  return net;
}

template <typename T>
nn::Sequential<T> build_critic(const NetworkSpec& spec) {
  spec.validate();
  nn::Sequential<T> net;
  const auto sizes = spec.pyramid(spec.critic_channels.size());
  std::size_t in = 1;
  for (std::size_t i = 0; i < spec.critic_channels.size(); ++i) {
    net.template add<nn::Conv2d<T>>(in, spec.critic_channels[i], NetworkSpec::kernel, NetworkSpec::stride,
                                    NetworkSpec::padding, "critic.conv" + std::to_string(i));
    net.template add<nn::LeakyReLU<T>>(static_cast<T>(spec.negative_slope));
    in = spec.critic_channels[i];
  }
  const std::size_t side = sizes.back();
  net.template add<nn::Reshape<T>>(nn::Shape{in * side * side});
  net.template add<nn::Linear<T>>(in * side * side, 1, "critic.head");
  return net;
}

/// Encoder, decoder, and critic of one autoencoder. The decoder and critic
/// only ever see content codes and images; the angle scalar is split off
/// before decoding.
template <typename T>
class Networks {
 public:
  explicit Networks(NetworkSpec spec)
      : spec_(std::move(spec)),
        encoder(build_encoder<T>(spec_)),
        decoder(build_decoder<T>(spec_)),
        critic(build_critic<T>(spec_)) {}

  const NetworkSpec& spec() const { return spec_; }

  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    init_truncated_normal(encoder, rng);
    init_truncated_normal(decoder, rng);
    init_truncated_normal(critic, rng);
  }

  void check_images(const nn::Tensor<T>& images) const {
    if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != spec_.input_size || images.dim(3) != spec_.input_size)
      throw DimensionError("expected [B,1," + std::to_string(spec_.input_size) + "," + std::to_string(spec_.input_size) +
                           "] images, got " + nn::shape_string(images.shape));
  }

  LatentBatch<T> encode(const nn::Tensor<T>& images) {
    check_images(images);
    auto raw = encoder.forward(images);
    check_finite(raw, "encoder");
    return split_latent(raw, spec_.content_dim);
  }

  nn::Tensor<T> decode(const nn::Tensor<T>& content) {
    if (content.rank() != 2 || content.dim(1) != spec_.content_dim)
      throw DimensionError("decode expects [B," + std::to_string(spec_.content_dim) + "], got " + nn::shape_string(content.shape));
    auto images = decoder.forward(content);
    check_finite(images, "decoder");
    return images;
  }

  /// One unbounded score per image.
  std::vector<T> criticize(const nn::Tensor<T>& images) {
    check_images(images);
    auto scores = critic.forward(images);
    check_finite(scores, "critic");
    return scores.data;
  }

  ParameterSet encoder_parameters() { return export_parameters(encoder); }
  ParameterSet decoder_parameters() { return export_parameters(decoder); }
  ParameterSet critic_parameters() { return export_parameters(critic); }

 private:
  static void check_finite(const nn::Tensor<T>& t, const char* where) {
    for (const T v : t.data)
      if (!std::isfinite(v)) throw NumericError(std::string("non-finite activation in ") + where);
  }

  NetworkSpec spec_;

 public:
  nn::Sequential<T> encoder;
  nn::Sequential<T> decoder;
  nn::Sequential<T> critic;
};

}  // namespace canon_pose
