#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <zlib.h>

#include "canon_pose/training.hpp"

using namespace canon_pose;

namespace {

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.seed = 5;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.content_dim = 6;
  cfg.encoder_channels = {4, 8};
  cfg.critic_channels = {4, 8};
  cfg.checkpoint_every = 1;
  return cfg;
}

const DatasetSplit& tiny_split() {
  static const DatasetSplit split = synth_projection_stack(PhantomSpec::generate(), 24, SplitTag::train, 3);
  return split;
}

std::vector<const LabeledSample*> batch_of(const DatasetSplit& s, std::size_t n) {
  std::vector<const LabeledSample*> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(&s.samples[i]);
  return out;
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("canon_pose_training_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(LrSchedule, StepDecay) {
  TrainConfig cfg;
  EXPECT_EQ(lr_at(0, cfg), 1e-4);
  EXPECT_EQ(lr_at(199, cfg), 1e-4);
  EXPECT_NEAR(lr_at(200, cfg), 1e-5, 1e-18);
  EXPECT_NEAR(lr_at(299, cfg), 1e-5, 1e-18);
  EXPECT_THROW(lr_at(300, cfg), ArgumentError);
  EXPECT_THROW(lr_at(-1, cfg), ArgumentError);
  int jumps = 0;
  for (int e = 1; e < cfg.epochs; ++e) jumps += lr_at(e, cfg) != lr_at(e - 1, cfg);
  EXPECT_EQ(jumps, 1);
}

TEST(TrainConfigTest, Defaults) {
  const TrainConfig cfg;
  EXPECT_EQ(cfg.epochs, 300);
  EXPECT_EQ(cfg.lr, 1e-4);
  EXPECT_EQ(cfg.lr_decay_epoch, 200);
  EXPECT_EQ(cfg.lr_decay_factor, 0.1);
  EXPECT_EQ(cfg.weight_decay, 1e-5);
  EXPECT_EQ(cfg.decoder_steps_per_critic_step, 4);
  EXPECT_EQ(cfg.batch_size, 128);
  EXPECT_EQ(cfg.clip_c, 0.01);
  EXPECT_EQ(cfg.content_dim, 32u);
  EXPECT_EQ(cfg.w_angle, 1.0);
  EXPECT_EQ(cfg.w_rec, 1.0);
  EXPECT_EQ(cfg.w_adv, 1.0);
  EXPECT_NO_THROW(cfg.validate());
}

TEST(TrainConfigTest, InvariantsRejected) {
  auto bad = [](auto mutate) {
    TrainConfig cfg;
    mutate(cfg);
    EXPECT_THROW(cfg.validate(), ConfigError);
  };
  bad([](TrainConfig& c) { c.epochs = 0; });
  bad([](TrainConfig& c) { c.lr = 0.0; });
  bad([](TrainConfig& c) { c.lr_decay_factor = 0.0; });
  bad([](TrainConfig& c) { c.lr_decay_factor = 1.5; });
  bad([](TrainConfig& c) { c.decoder_steps_per_critic_step = 0; });
  bad([](TrainConfig& c) { c.clip_c = 0.0; });
  bad([](TrainConfig& c) { c.wrap = "sometimes"; });
  bad([](TrainConfig& c) { c.normalization = "batch"; });
}

TEST(TrainConfigTest, StrictJsonAndOverrides) {
  EXPECT_THROW(config_from_json(json{{"epochz", 3}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"epochs", "three"}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"epochs", 0}}), ConfigError);
  EXPECT_THROW(config_from_json(json::array()), ConfigError);
  const auto cfg = config_from_json(json{{"epochs", 12}, {"lr", 3e-4}, {"wrap", "on"}});
  EXPECT_EQ(cfg.epochs, 12);
  EXPECT_EQ(cfg.lr, 3e-4);
  EXPECT_EQ(cfg.batch_size, 128);
  const auto o = apply_override(apply_override(cfg, "epochs=1"), "out_dir=somewhere");
  EXPECT_EQ(o.epochs, 1);
  EXPECT_EQ(o.out_dir, "somewhere");
  EXPECT_EQ(apply_override(cfg, "encoder_channels=[8,16]").encoder_channels, (std::vector<std::size_t>{8, 16}));
  EXPECT_THROW(apply_override(cfg, "nosuchkey=1"), ConfigError);
  EXPECT_THROW(apply_override(cfg, "epochs"), ConfigError);
  EXPECT_THROW(apply_override(cfg, "epochs=-4"), ConfigError);
  const json round = o;
  EXPECT_EQ(config_from_json(round).out_dir, "somewhere");
}

TEST(Adam, FirstStepMatchesHandComputation) {
  nn::Param<double> p("p", {2});
  p.value[0] = 1.0;
  p.value[1] = -2.0;
  p.grad[0] = 0.5;
  p.grad[1] = -4.0;
  Adam<double> opt({&p}, AdamConfig{0.5, 0.9, 1e-8, 0.1});
  opt.step(0.01);
  // bias-corrected first step moves each coordinate by lr * g/(|g| + eps) after decay
  EXPECT_NEAR(p.value[0], 1.0 * (1 - 0.001) - 0.01 * 0.5 / (0.5 + 1e-8), 1e-12);
  EXPECT_NEAR(p.value[1], -2.0 * (1 - 0.001) + 0.01 * 4.0 / (4.0 + 1e-8), 1e-12);
  p.grad[0] = 0.0;
  p.grad[1] = 0.0;
  const double before = p.value[0];
  opt.step(0.01);
  const double m = 0.5 * 0.5 * 0.5, v = 0.9 * 0.1 * 0.25;
  const double mhat = m / (1 - 0.25), vhat = v / (1 - 0.81);
  EXPECT_NEAR(p.value[0], before * (1 - 0.001) - 0.01 * mhat / (std::sqrt(vhat) + 1e-8), 1e-12);
  EXPECT_EQ(opt.steps(), 2u);
}

TEST(TrainStep, CriticCadence) {
  auto cfg = tiny_config();
  Trainer t(cfg, cfg.network_spec(40), true);
  const auto batch = batch_of(tiny_split(), 4);
  std::vector<int> updated;
  for (int s = 1; s <= 16; ++s) {
    const auto before = t.networks().critic_parameters().fingerprint();
    const auto rec = t.train_step(batch, 1e-4);
    const bool changed = t.networks().critic_parameters().fingerprint() != before;
    EXPECT_EQ(changed, rec.critic_updated) << "step " << s;
    EXPECT_EQ(rec.critic_updated, s % 4 == 0) << "step " << s;
    if (rec.critic_updated) updated.push_back(s);
  }
  EXPECT_EQ(updated, (std::vector<int>{4, 8, 12, 16}));
  EXPECT_EQ(t.critic_updates(), 4u);
}

TEST(TrainStep, CadenceFollowsRatio) {
  auto cfg = tiny_config();
  cfg.decoder_steps_per_critic_step = 3;
  Trainer t(cfg, cfg.network_spec(40), true);
  const auto batch = batch_of(tiny_split(), 2);
  for (int s = 0; s < 12; ++s) t.train_step(batch, 1e-4);
  EXPECT_EQ(t.critic_updates(), 4u);
}

TEST(TrainStep, ClippingPostcondition) {
  auto cfg = tiny_config();
  cfg.decoder_steps_per_critic_step = 1;
  Trainer t(cfg, cfg.network_spec(40), true);
  const auto batch = batch_of(tiny_split(), 4);
  for (int s = 0; s < 6; ++s) {
    // a large lr forces clipping to bind
    t.train_step(batch, 0.05);
    EXPECT_LE(max_abs_parameter(t.networks().critic.params()), 0.01f);
  }
}

TEST(TrainStep, CriticSubstepLeavesAutoencoderUntouched) {
  auto cfg = tiny_config();
  Trainer t(cfg, cfg.network_spec(40), true);
  auto& nets = t.networks();
  std::vector<const Image*> targets;
  for (const auto* s : batch_of(tiny_split(), 4)) targets.push_back(&s->target);
  const auto real = stack_images<float>(targets);
  const auto fake = nets.decode(nets.encode(real).content);
  const auto enc = nets.encoder_parameters().fingerprint(), dec = nets.decoder_parameters().fingerprint();
  const auto crit = nets.critic_parameters().fingerprint();
  t.update_critic(real, fake, 1e-3, AdvConvention::wasserstein);
  EXPECT_EQ(nets.encoder_parameters().fingerprint(), enc);
  EXPECT_EQ(nets.decoder_parameters().fingerprint(), dec);
  EXPECT_NE(nets.critic_parameters().fingerprint(), crit);
}

TEST(TrainStep, ThreeConsecutiveAbortsHalt) {
  auto cfg = tiny_config();
  Trainer t(cfg, cfg.network_spec(40), true);
  t.networks().decoder.params().front()->value[0] = std::nanf("");
  const auto batch = batch_of(tiny_split(), 2);
  EXPECT_TRUE(t.train_step(batch, 1e-4).aborted);
  EXPECT_TRUE(t.train_step(batch, 1e-4).aborted);
  EXPECT_THROW(t.train_step(batch, 1e-4), NumericError);
}

TEST(TrainLog, CsvLayout) {
  EXPECT_EQ(csv_header(), "epoch,step,angle,rec,adv_decoder,adv_critic,total,lr,seconds");
  TrainLogRecord r;
  r.epoch = 2;
  r.step = 17;
  r.losses = {0.5, 1.25, -0.125, 0.0, 1.625};
  r.lr = 1e-4;
  EXPECT_EQ(csv_row(r), "2,17,0.5,1.25,-0.125,,1.625,0.0001,0.000");
  r.critic_updated = true;
  r.losses.adv_critic = -0.25;
  EXPECT_EQ(csv_row(r), "2,17,0.5,1.25,-0.125,-0.25,1.625,0.0001,0.000");
  r.aborted = true;
  EXPECT_EQ(csv_row(r), "2,17,0.5,1.25,-0.125,-0.25,nan,0.0001,0.000");
}

TEST(TrainStep, ReconstructionSmokeRun) {
  PhantomSpec spec = PhantomSpec::generate();
  spec.noise_std = 0.0;
  const auto data = synth_projection_stack(spec, 64, SplitTag::train, 11);
  auto cfg = tiny_config();
  cfg.w_adv = 0.0;
  cfg.w_angle = 0.0;
  cfg.lr = 1e-3;
  auto run = [&] {
    Trainer t(cfg, cfg.network_spec(40), true);
    std::vector<double> rec;
    std::mt19937_64 pick(1);
    for (int s = 0; s < 50; ++s) {
      std::vector<const LabeledSample*> batch;
      for (int b = 0; b < 8; ++b) batch.push_back(&data.samples[pick() % data.size()]);
      rec.push_back(t.train_step(batch, cfg.lr).losses.rec);
    }
    return rec;
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a, b);
  const double first = std::accumulate(a.begin(), a.begin() + 10, 0.0) / 10.0;
  const double last = std::accumulate(a.end() - 10, a.end(), 0.0) / 10.0;
  EXPECT_LT(last, first);
}

TEST(Train, LoopAccountingAndCheckpoint) {
  const auto dir = scratch("loop");
  cache_dataset(tiny_split(), dir / "train.bin");
  auto cfg = tiny_config();
  cfg.epochs = 1;
  cfg.batch_size = static_cast<int>(tiny_split().size());
  cfg.train_path = (dir / "train.bin").string();
  cfg.out_dir = (dir / "run").string();
  const auto result = train(cfg);
  EXPECT_EQ(result.steps, 1u);
  ASSERT_EQ(result.checkpoints.size(), 1u);
  EXPECT_TRUE(std::filesystem::exists(result.final_checkpoint));
  const auto ck = load_checkpoint(result.final_checkpoint);
  EXPECT_EQ(ck.epochs_completed, 1u);
  EXPECT_EQ(ck.source_tag, "synth-5hdb");
  std::ifstream log(result.log_path);
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) ++lines;
  EXPECT_EQ(lines, 2);
}

TEST(Train, MissingDatasetIsStartupError) {
  auto cfg = tiny_config();
  cfg.train_path = "/nonexistent/train.bin";
  EXPECT_THROW(train(cfg), DataError);
  cfg.train_path.clear();
  EXPECT_THROW(train(cfg), DataError);
}

TEST(Train, ResumeMatchesStraightRun) {
  const auto dir = scratch("resume");
  cache_dataset(tiny_split(), dir / "train.bin");
  auto cfg = tiny_config();
  cfg.train_path = (dir / "train.bin").string();
  cfg.threads = 1;

  cfg.out_dir = (dir / "straight").string();
  train(cfg);

  auto resumed = cfg;
  resumed.out_dir = (dir / "resumed").string();
  resumed.resume = checkpoint_name(cfg.out_dir, 2).string();
  train(resumed);

  auto losses = [](const std::filesystem::path& p) {
    std::ifstream in(p);
    std::string line;
    std::vector<std::string> rows;
    std::getline(in, line);
    while (std::getline(in, line)) rows.push_back(line.substr(0, line.rfind(',')));  // drop wall-clock
    return rows;
  };
  const auto a = losses(dir / "straight" / "train_log.csv");
  const auto b = losses(dir / "resumed" / "train_log.csv");
  ASSERT_EQ(a.size(), 9u);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(std::vector<std::string>(a.end() - 3, a.end()), b);
  EXPECT_EQ(load_checkpoint(dir / "straight" / "final.ckpt").decoder,
            load_checkpoint(dir / "resumed" / "final.ckpt").decoder);
}

TEST(Train, ResumeRejectsMismatchedSpec) {
  auto cfg = tiny_config();
  Trainer a(cfg, cfg.network_spec(40), true);
  auto other = cfg;
  other.content_dim = 7;
  Trainer b(other, other.network_spec(40), true);
  EXPECT_THROW(b.restore(a.checkpoint()), VersionError);
}

TEST(Checkpoint, RoundTripAndCorruption) {
  const auto dir = scratch("ckpt");
  auto cfg = tiny_config();
  Trainer t(cfg, cfg.network_spec(40), true);
  const auto batch = batch_of(tiny_split(), 4);
  for (int s = 0; s < 5; ++s) t.train_step(batch, 1e-4);
  const auto ck = t.checkpoint("synth-5hdb");
  save_checkpoint(ck, dir / "a.ckpt");
  const auto back = load_checkpoint(dir / "a.ckpt");
  EXPECT_EQ(back.spec, ck.spec);
  EXPECT_EQ(back.global_step, 5u);
  EXPECT_EQ(back.critic_updates, 1u);
  EXPECT_EQ(back.encoder, ck.encoder);
  EXPECT_EQ(back.critic_opt, ck.critic_opt);
  EXPECT_EQ(back.rng_state, ck.rng_state);
  EXPECT_EQ(back.config.batch_size, cfg.batch_size);

  auto bytes = encode_checkpoint(ck);
  // bytes 0..7 are magic and version, checked ahead of the CRC
  for (std::size_t pos = 8; pos < bytes.size(); pos += 1009) {
    auto bad = bytes;
    bad[pos] ^= 0x10;
    EXPECT_THROW(decode_checkpoint(bad, "x"), ChecksumError) << "byte " << pos;
  }
  auto last = bytes;
  last.back() ^= 0x01;
  EXPECT_THROW(decode_checkpoint(last, "x"), ChecksumError);
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(magic, "x"), FormatError);
  EXPECT_THROW(decode_checkpoint(std::span(bytes).first(bytes.size() - 7), "x"), FormatError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), IoError);
}

TEST(Checkpoint, VersionGuard) {
  auto cfg = tiny_config();
  Trainer t(cfg, cfg.network_spec(40), true);
  const auto bytes = encode_checkpoint(t.checkpoint());
  auto bumped = bytes;
  bumped[4] = 2;  // version u32 after the magic
  // re-seal so only the version is wrong
  const auto body = std::span(bumped).first(bumped.size() - 4);
  const auto crc = static_cast<std::uint32_t>(::crc32(0L, body.data(), static_cast<uInt>(body.size())));
  for (int k = 0; k < 4; ++k) bumped[bumped.size() - 4 + k] = static_cast<unsigned char>(crc >> (8 * k));
  EXPECT_THROW(decode_checkpoint(bumped, "x"), VersionError);
}

TEST(Networks, FromCheckpointReproducesOutputs) {
  auto cfg = tiny_config();
  Trainer t(cfg, cfg.network_spec(40), true);
  t.train_step(batch_of(tiny_split(), 4), 1e-3);
  auto copy = networks_from(t.checkpoint());
  std::vector<const Image*> in{&tiny_split().samples[5].input};
  const auto x = stack_images<float>(in);
  EXPECT_EQ(copy.decode(copy.encode(x).content), t.networks().decode(t.networks().encode(x).content));
}
