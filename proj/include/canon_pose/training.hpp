#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "canon_pose/checkpoint.hpp"
#include "canon_pose/config.hpp"
#include "canon_pose/datasets.hpp"
#include "canon_pose/losses.hpp"
#include "canon_pose/model.hpp"
#include "canon_pose/optim.hpp"

namespace canon_pose {

struct TrainLogRecord {
  int epoch = 0;
  std::uint64_t step = 0;  // 1-based global step
  LossBreakdown losses;
  bool critic_updated = false;  // losses.adv_critic is meaningful only when set
  bool aborted = false;
  double lr = 0.0;
  double seconds = 0.0;
};

inline std::string csv_header() { return "epoch,step,angle,rec,adv_decoder,adv_critic,total,lr,seconds"; }

inline std::string csv_row(const TrainLogRecord& r) {
  char buf[320];
  char critic[40] = "";
  if (r.critic_updated) std::snprintf(critic, sizeof critic, "%.9g", r.losses.adv_critic);
  std::snprintf(buf, sizeof buf, "%d,%llu,%.9g,%.9g,%.9g,%s,%.9g,%.9g,%.3f", r.epoch,
                static_cast<unsigned long long>(r.step), r.losses.angle, r.losses.rec, r.losses.adv_decoder, critic,
                r.aborted ? std::nan("") : r.losses.total, r.lr, r.seconds);
  return buf;
}

template <typename T>
nn::Tensor<T> stack_images(const std::vector<const Image*>& images) {
  if (images.empty()) throw ArgumentError("stack_images: empty batch");
  const std::size_t h = images.front()->height, w = images.front()->width;
  nn::Tensor<T> out({images.size(), 1, h, w});
  for (std::size_t b = 0; b < images.size(); ++b) {
    if (images[b]->height != h || images[b]->width != w) throw DimensionError("stack_images: mixed image sizes");
    std::transform(images[b]->pixels.begin(), images[b]->pixels.end(), out.ptr() + b * h * w,
                   [](float v) { return static_cast<T>(v); });
  }
  return out;
}

/// Owns the three networks and their optimizers for one run.
class Trainer {
 public:
  Trainer(TrainConfig cfg, NetworkSpec spec, bool circular_angles)
      : cfg_(std::move(cfg)), nets_(std::move(spec)), wrap_(cfg_.wrap_for(circular_angles)), rng_(cfg_.seed) {
    cfg_.validate();
    nn::flush_denormals();
    nets_.initialize(derive_seed(cfg_.seed, 0x494e4954, 0));
    const AdamConfig adam{cfg_.adam_beta1, cfg_.adam_beta2, 1e-8, cfg_.weight_decay};
    encoder_opt_ = Adam<float>(nets_.encoder.params(), adam);
    decoder_opt_ = Adam<float>(nets_.decoder.params(), adam);
    critic_opt_ = Adam<float>(nets_.critic.params(), adam);
  }

  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  const TrainConfig& config() const { return cfg_; }
  Networks<float>& networks() { return nets_; }
  std::uint64_t global_step() const { return step_; }
  std::uint64_t critic_updates() const { return critic_updates_; }
  int epochs_completed() const { return epochs_done_; }
  bool wraps_angles() const { return wrap_; }

  /// One optimization step on a batch; the critic also updates on every
  /// `decoder_steps_per_critic_step`-th step.
  TrainLogRecord train_step(const std::vector<const LabeledSample*>& batch, double lr) {
    if (batch.empty()) throw ArgumentError("train_step: empty batch");
    ++step_;
    TrainLogRecord rec;
    rec.epoch = epochs_done_;
    rec.step = step_;
    rec.lr = lr;
    try {
      run_step(batch, lr, rec);
      consecutive_aborts_ = 0;
    } catch (const NumericError&) {
      rec.aborted = true;
      if (++consecutive_aborts_ >= 3)
        throw NumericError("training halted after 3 consecutive non-finite steps (last at step " + std::to_string(step_) + ")");
    }
    return rec;
  }

  /// Runs one epoch over `split` in a seeded shuffled order.
  std::vector<TrainLogRecord> train_epoch(const DatasetSplit& split, const std::function<void(const TrainLogRecord&)>& on_step = {}) {
    if (split.empty()) throw ArgumentError("train_epoch: empty dataset");
    const double lr = lr_at(epochs_done_, cfg_);
    std::optional<DatasetSplit> fresh;
    if (cfg_.rerotate_per_epoch) fresh = rerotate(split, cfg_.seed, static_cast<std::uint64_t>(epochs_done_), cfg_.noise_std);
    const DatasetSplit& data = fresh ? *fresh : split;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng_);
    std::vector<TrainLogRecord> records;
    const auto bs = static_cast<std::size_t>(cfg_.batch_size);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      std::vector<const LabeledSample*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) batch.push_back(&data.samples[order[i]]);
      auto r = train_step(batch, lr);
      r.seconds = elapsed();
      if (on_step) on_step(r);
      records.push_back(r);
    }
    ++epochs_done_;
    return records;
  }

  Checkpoint checkpoint(const std::string& source_tag = {}) {
    Checkpoint ck;
    ck.spec = nets_.spec();
    ck.config = cfg_;
    ck.epochs_completed = static_cast<std::uint64_t>(epochs_done_);
    ck.global_step = step_;
    ck.critic_updates = critic_updates_;
    std::ostringstream rng;
    rng << rng_;
    ck.rng_state = rng.str();
    ck.encoder = nets_.encoder_parameters();
    ck.decoder = nets_.decoder_parameters();
    ck.critic = nets_.critic_parameters();
    ck.encoder_opt = state_of(encoder_opt_);
    ck.decoder_opt = state_of(decoder_opt_);
    ck.critic_opt = state_of(critic_opt_);
    ck.source_tag = source_tag;
    return ck;
  }

  void restore(const Checkpoint& ck) {
    if (!(ck.spec == nets_.spec())) throw VersionError("resume: checkpoint network spec differs from the configured one");
    import_parameters(nets_.encoder, ck.encoder);
    import_parameters(nets_.decoder, ck.decoder);
    import_parameters(nets_.critic, ck.critic);
    encoder_opt_.restore(ck.encoder_opt.steps, ck.encoder_opt.m, ck.encoder_opt.v);
    decoder_opt_.restore(ck.decoder_opt.steps, ck.decoder_opt.m, ck.decoder_opt.v);
    critic_opt_.restore(ck.critic_opt.steps, ck.critic_opt.m, ck.critic_opt.v);
    epochs_done_ = static_cast<int>(ck.epochs_completed);
    step_ = ck.global_step;
    critic_updates_ = ck.critic_updates;
    std::istringstream rng(ck.rng_state);
    rng >> rng_;
    if (!rng) throw FormatError("resume: unreadable rng state in checkpoint");
  }

 private:
  static OptimizerState state_of(const Adam<float>& opt) {
    return {opt.steps(), opt.first_moments(), opt.second_moments()};
  }

  double elapsed() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
  }

  void run_step(const std::vector<const LabeledSample*>& batch, double lr, TrainLogRecord& rec) {
    std::vector<const Image*> inputs, targets;
    std::vector<double> theta;
    for (const auto* s : batch) {
      inputs.push_back(&s->input);
      targets.push_back(&s->target);
      theta.push_back(s->theta);
    }
    const auto x = stack_images<float>(inputs);
    const auto y = stack_images<float>(targets);
    const std::size_t pixels = y.dim(2) * y.dim(3);
    const auto w = cfg_.weights();
    const auto convention = cfg_.adv_convention();

    auto latent = nets_.encode(x);
    auto x_hat = nets_.decode(latent.content);
    const auto angle = angle_loss_batch<float>(theta, latent.theta_hat, wrap_);
    const auto recon = recon_loss<float>(y.data, x_hat.data, pixels, cfg_.squared_l2);

    nets_.critic.set_accumulate_param_grads(false);
    nets_.critic.set_propagate_input_grad(true);
    const auto fake_scores = nets_.criticize(x_hat);
    const auto adv = decoder_adv_loss<float>(fake_scores, convention);
    rec.losses = total_loss(angle.value, recon.value, adv.value, w);
    if (!std::isfinite(rec.losses.total)) throw NumericError("non-finite loss");

    nn::Tensor<float> d_xhat(x_hat.shape);
    for (std::size_t i = 0; i < d_xhat.size(); ++i) d_xhat[i] = static_cast<float>(w.rec) * recon.grad[i];
    if (w.adv != 0.0) {
      nn::Tensor<float> d_scores({batch.size(), 1});
      for (std::size_t b = 0; b < batch.size(); ++b) d_scores[b] = static_cast<float>(w.adv) * adv.grad[b];
      const auto d_adv = nets_.critic.backward(d_scores);
      for (std::size_t i = 0; i < d_xhat.size(); ++i) d_xhat[i] += d_adv[i];
    }
    nets_.critic.set_accumulate_param_grads(true);

    nets_.encoder.zero_grad();
    nets_.decoder.zero_grad();
    const auto d_content = nets_.decoder.backward(d_xhat);
    std::vector<float> d_theta(angle.grad.size());
    for (std::size_t b = 0; b < d_theta.size(); ++b) d_theta[b] = static_cast<float>(w.angle) * angle.grad[b];
    nets_.encoder.backward(join_latent(d_theta, d_content));
    check_gradients(nets_.encoder);
    check_gradients(nets_.decoder);
    encoder_opt_.step(lr);
    decoder_opt_.step(lr);

    if (step_ % static_cast<std::uint64_t>(cfg_.decoder_steps_per_critic_step) == 0) {
      rec.losses.adv_critic = update_critic(y, x_hat, lr, convention);
      rec.critic_updated = true;
    }
  }

  // Real = canonical targets, fake = this step's reconstructions (no
  // gradient path back into the decoder).
 public:
  double update_critic(const nn::Tensor<float>& real, const nn::Tensor<float>& fake, double lr, AdvConvention convention) {
    const std::size_t batch = real.dim(0);
    nn::Tensor<float> both({2 * batch, real.dim(1), real.dim(2), real.dim(3)});
    std::copy(real.data.begin(), real.data.end(), both.data.begin());
    std::copy(fake.data.begin(), fake.data.end(), both.data.begin() + static_cast<std::ptrdiff_t>(real.size()));
    nets_.critic.set_propagate_input_grad(false);
    nets_.critic.zero_grad();
    const auto scores = nets_.criticize(both);
    const std::span<const float> all(scores);
    const auto loss = critic_loss<float>(all.first(batch), all.subspan(batch), convention);
    if (!std::isfinite(loss.value)) throw NumericError("non-finite critic loss");
    nn::Tensor<float> d_scores({2 * batch, 1});
    std::copy(loss.grad_real.begin(), loss.grad_real.end(), d_scores.data.begin());
    std::copy(loss.grad_fake.begin(), loss.grad_fake.end(), d_scores.data.begin() + static_cast<std::ptrdiff_t>(batch));
    nets_.critic.backward(d_scores);
    nets_.critic.set_propagate_input_grad(true);
    check_gradients(nets_.critic);
    critic_opt_.step(lr);
    clip_parameters(nets_.critic.params(), static_cast<float>(cfg_.clip_c));
    ++critic_updates_;
    return loss.value;
  }

 private:

  static void check_gradients(nn::Sequential<float>& net) {
    for (auto* p : net.params())
      for (float g : p->grad.data)
        if (!std::isfinite(g)) throw NumericError("non-finite gradient in '" + p->name + "'");
  }

  TrainConfig cfg_;
  Networks<float> nets_;
  bool wrap_;
  std::mt19937_64 rng_;
  Adam<float> encoder_opt_, decoder_opt_, critic_opt_;
  int epochs_done_ = 0;
  std::uint64_t step_ = 0;
  std::uint64_t critic_updates_ = 0;
  int consecutive_aborts_ = 0;
  std::chrono::steady_clock::time_point started_ = std::chrono::steady_clock::now();
};

struct TrainResult {
  std::filesystem::path final_checkpoint;
  std::filesystem::path log_path;
  std::vector<std::filesystem::path> checkpoints;
  std::uint64_t steps = 0;
  std::uint64_t critic_updates = 0;
};

inline std::filesystem::path checkpoint_name(const std::filesystem::path& dir, int epochs_completed) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "epoch_%04d.ckpt", epochs_completed);
  return dir / buf;
}

/// Full training run: loads the training split from `cfg.train_path`,
/// resumes from `cfg.resume` when set, writes `train_log.csv`, periodic
/// checkpoints and `final.ckpt` under `cfg.out_dir`.
inline TrainResult train(const TrainConfig& cfg, const std::function<void(const TrainLogRecord&)>& on_step = {}) {
  cfg.validate();
  if (cfg.train_path.empty()) throw DataError("train: no training dataset configured (train_path)");
  if (!std::filesystem::exists(cfg.train_path)) throw DataError("train: dataset '" + cfg.train_path + "' does not exist");
  if (cfg.threads > 0) nn::set_blas_threads(cfg.threads);
  const auto data = load_cache(cfg.train_path);
  if (data.empty()) throw DataError("train: dataset '" + cfg.train_path + "' is empty");
  Trainer trainer(cfg, cfg.network_spec(data.image_size()), angle_distribution(data.source).circular());
  if (!cfg.resume.empty()) {
    const auto ck = load_checkpoint(cfg.resume);
    trainer.restore(ck);
  }
  const std::filesystem::path out_dir(cfg.out_dir);
  std::filesystem::create_directories(out_dir);
  TrainResult result;
  result.log_path = out_dir / "train_log.csv";
  const bool append = !cfg.resume.empty() && std::filesystem::exists(result.log_path);
  std::ofstream log(result.log_path, append ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot write log '" + result.log_path.string() + "'");
  if (!append) log << csv_header() << '\n';
  const std::string source = to_string(data.source);
  while (trainer.epochs_completed() < cfg.epochs) {
    trainer.train_epoch(data, [&](const TrainLogRecord& r) {
      log << csv_row(r) << '\n';
      if (on_step) on_step(r);
    });
    log.flush();
    const int done = trainer.epochs_completed();
    if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.epochs) {
      result.checkpoints.push_back(checkpoint_name(out_dir, done));
      save_checkpoint(trainer.checkpoint(source), result.checkpoints.back());
    }
  }
  result.final_checkpoint = out_dir / "final.ckpt";
  save_checkpoint(trainer.checkpoint(source), result.final_checkpoint);
  result.checkpoints.push_back(result.final_checkpoint);
  result.steps = trainer.global_step();
  result.critic_updates = trainer.critic_updates();
  return result;
}

}  // namespace canon_pose
