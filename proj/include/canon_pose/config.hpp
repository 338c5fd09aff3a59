#pragma once

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "canon_pose/errors.hpp"
#include "canon_pose/losses.hpp"
#include "canon_pose/model.hpp"

namespace canon_pose {

using json = nlohmann::json;

struct TrainConfig {
  // schedule
  int epochs = 300;
  double lr = 1e-4;
  int lr_decay_epoch = 200;
  double lr_decay_factor = 0.1;
  double weight_decay = 1e-5;
  int decoder_steps_per_critic_step = 4;
  int batch_size = 128;
  double clip_c = 0.01;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.9;

  // objective
  double w_angle = 1.0;
  double w_rec = 1.0;
  double w_adv = 1.0;
  std::string wrap = "auto";  // auto | on | off; auto wraps for circular angle data
  bool paper_literal_adv = false;
  bool squared_l2 = false;

  // data
  std::string train_path;
  std::string test_path;
  bool rerotate_per_epoch = false;
  double noise_std = 0.1;  // used only when re-rotating synthetic projections

  // architecture
  std::size_t content_dim = 32;
  std::vector<std::size_t> encoder_channels{32, 64, 128, 256};
  std::vector<std::size_t> critic_channels{32, 64, 128};
  double negative_slope = 0.2;
  std::string normalization = "layer";  // layer | none

  // output
  std::string out_dir = "run";
  int checkpoint_every = 10;  // epochs; 0 writes only the final checkpoint
  std::string resume;         // checkpoint to continue from
  int threads = 0;            // 0: all available cores

  LossWeights weights() const { return {w_angle, w_rec, w_adv}; }
  AdvConvention adv_convention() const { return paper_literal_adv ? AdvConvention::paper_literal : AdvConvention::wasserstein; }

  bool wrap_for(bool circular_data) const {
    if (wrap == "on") return true;
    if (wrap == "off") return false;
    return circular_data;
  }

  NetworkSpec network_spec(std::size_t input_size) const {
    NetworkSpec spec;
    spec.input_size = input_size;
    spec.content_dim = content_dim;
    spec.encoder_channels = encoder_channels;
    spec.critic_channels = critic_channels;
    spec.negative_slope = negative_slope;
    spec.normalization = normalization;
    return spec;
  }

  void validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("train config: " + what); };
    if (epochs < 1) fail("epochs must be >= 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) fail("lr must be > 0");
    if (lr_decay_epoch < 0) fail("lr_decay_epoch must be >= 0");
    if (!(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0)) fail("lr_decay_factor must lie in (0, 1]");
    if (weight_decay < 0.0) fail("weight_decay must be >= 0");
    if (decoder_steps_per_critic_step < 1) fail("decoder_steps_per_critic_step must be >= 1");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (!(clip_c > 0.0)) fail("clip_c must be > 0");
    if (w_angle < 0.0 || w_rec < 0.0 || w_adv < 0.0) fail("loss weights must be non-negative");
    if (wrap != "auto" && wrap != "on" && wrap != "off") fail("wrap must be auto, on or off");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) fail("adam betas must lie in [0,1)");
    if (noise_std < 0.0) fail("noise_std must be >= 0");
    if (checkpoint_every < 0) fail("checkpoint_every must be >= 0");
    if (threads < 0) fail("threads must be >= 0");
    if (normalization != "layer" && normalization != "none") fail("normalization must be layer or none");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, epochs, lr, lr_decay_epoch, lr_decay_factor, weight_decay,
                                                decoder_steps_per_critic_step, batch_size, clip_c, seed, adam_beta1,
                                                adam_beta2, w_angle, w_rec, w_adv, wrap, paper_literal_adv, squared_l2,
                                                train_path, test_path, rerotate_per_epoch, noise_std, content_dim,
                                                encoder_channels, critic_channels, negative_slope, normalization, out_dir,
                                                checkpoint_every, resume, threads)

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(NetworkSpec, input_size, content_dim, encoder_channels, critic_channels, negative_slope,
                                   normalization)

/// Strict conversion: unknown keys and mistyped values are configuration errors.
inline TrainConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  const json defaults = TrainConfig{};
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw ConfigError("unknown config key '" + key + "'");
    const auto& ref = defaults.at(key);
    const bool numeric_ok = ref.is_number() && value.is_number();
    if (!numeric_ok && ref.type() != value.type())
      throw ConfigError("config key '" + key + "' expects " + std::string(ref.type_name()) + ", got " + value.type_name());
  }
  try {
    auto cfg = j.get<TrainConfig>();
    cfg.validate();
    return cfg;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
}

inline TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

/// Applies `key=value` over an existing config; the value is parsed as JSON
/// when possible, otherwise taken as a string.
inline TrainConfig apply_override(const TrainConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json j = cfg;
  if (!j.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  j[key] = value;
  return config_from_json(j);
}

/// Step decay: lr before `lr_decay_epoch`, lr * lr_decay_factor from then on.
inline double lr_at(int epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch >= cfg.epochs)
    throw ArgumentError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.epochs) + ")");
  return epoch < cfg.lr_decay_epoch ? cfg.lr : cfg.lr * cfg.lr_decay_factor;
}

}  // namespace canon_pose
