// canon_pose command-line tool.
//
// Exit codes: 0 ok, 1 usage/config, 2 data or format, 3 numeric failure.
// Every error is printed to stderr as a single line "ERROR <code>: <message>".

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "canon_pose/canon_pose.hpp"

using namespace canon_pose;
namespace fs = std::filesystem;

namespace {

std::string env_data_dir(const std::string& fallback) {
  const char* v = std::getenv("CANON_POSE_DATA");
  return v && *v ? std::string(v) : fallback;
}

void apply_threads(int threads) {
  if (threads < 0) throw ConfigError("--threads must be >= 0");
  if (threads > 0) nn::set_blas_threads(threads);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out || !(out << text)) throw IoError("cannot write '" + path.string() + "'");
}

fs::path find_idx(const fs::path& dir, const std::string& name) {
  for (const auto& candidate : {dir / name, dir / "mnist" / name})
    if (fs::exists(candidate)) return candidate;
  throw IoError("MNIST file '" + name + "' not found under '" + dir.string() + "'");
}

// ---------------------------------------------------------------------------

struct PrepareArgs {
  std::string mnist_dir = env_data_dir("data/mnist");
  std::string out = "data";
  std::uint64_t seed = 7;
  std::size_t train_count = 60000;
  std::size_t test_count = 10000;
};

void run_prepare(const PrepareArgs& a) {
  auto train_raw = load_idx_images(find_idx(a.mnist_dir, "train-images-idx3-ubyte"));
  auto test_raw = load_idx_images(find_idx(a.mnist_dir, "t10k-images-idx3-ubyte"));
  if (a.train_count > train_raw.size() || a.test_count > test_raw.size())
    throw ArgumentError("requested more images than the MNIST files hold (" + std::to_string(train_raw.size()) + " / " +
                        std::to_string(test_raw.size()) + ")");
  train_raw.resize(a.train_count);
  test_raw.resize(a.test_count);
  fs::create_directories(a.out);
  const auto train_path = fs::path(a.out) / "mnist_train.bin", test_path = fs::path(a.out) / "mnist_test.bin";
  cache_dataset(build_rotated_mnist(train_raw, SplitTag::train, a.seed), train_path);
  cache_dataset(build_rotated_mnist(test_raw, SplitTag::test, a.seed), test_path);
  std::printf("wrote %s (%zu) and %s (%zu)\n", train_path.c_str(), a.train_count, test_path.c_str(), a.test_count);
}

struct SynthArgs {
  std::size_t count = 20000;
  std::size_t size = 40;
  std::size_t train = 16000;
  std::size_t test = 4000;
  std::uint64_t seed = 7;
  double noise = 0.1;
  std::size_t blobs = 7;
  std::uint64_t phantom_seed = 17;
  std::string out = env_data_dir("data");
};

void run_synth(const SynthArgs& a) {
  if (a.train + a.test != a.count)
    throw ArgumentError("--train + --test must equal --count (" + std::to_string(a.train) + " + " + std::to_string(a.test) +
                        " != " + std::to_string(a.count) + ")");
  const auto spec = PhantomSpec::generate(a.blobs, a.phantom_seed, a.size, a.noise);
  fs::create_directories(a.out);
  const auto train_path = fs::path(a.out) / "synth_train.bin", test_path = fs::path(a.out) / "synth_test.bin";
  cache_dataset(synth_projection_stack(spec, a.train, SplitTag::train, a.seed, 0), train_path);
  cache_dataset(synth_projection_stack(spec, a.test, SplitTag::test, a.seed, a.train), test_path);
  std::printf("wrote %s (%zu) and %s (%zu)\n", train_path.c_str(), a.train, test_path.c_str(), a.test);
}

// Train flags mirror TrainConfig fields; a flag wins over the config file and
// --override only when it is given on the command line.
class TrainFlags {
 public:
  explicit TrainFlags(CLI::App* sub) : sub_(sub) {}

  template <typename V>
  void add(const std::string& flag, V TrainConfig::*member, const std::string& help) {
    auto holder = std::make_shared<V>(TrainConfig{}.*member);
    CLI::Option* opt = nullptr;
    if constexpr (std::is_same_v<V, bool>)
      opt = sub_->add_flag(flag, *holder, help)->capture_default_str();
    else
      opt = sub_->add_option(flag, *holder, help)->capture_default_str();
    appliers_.push_back([opt, holder, member](TrainConfig& c) {
      if (opt->count() > 0) c.*member = *holder;
    });
  }

  void apply(TrainConfig& cfg) const {
    for (const auto& f : appliers_) f(cfg);
  }

 private:
  CLI::App* sub_;
  std::vector<std::function<void(TrainConfig&)>> appliers_;
};

void run_train(const std::string& config_path, const std::vector<std::string>& overrides, const TrainFlags& flags) {
  TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_config(config_path);
  for (const auto& o : overrides) cfg = apply_override(cfg, o);
  flags.apply(cfg);
  cfg = config_from_json(json(cfg));
  apply_threads(cfg.threads);

  double rec_sum = 0.0, angle_sum = 0.0;
  std::size_t n = 0;
  int current = -1;
  auto flush = [&] {
    if (n > 0)
      std::fprintf(stderr, "epoch %d  rec %.4f  angle %.4f  (%zu steps)\n", current, rec_sum / n, angle_sum / n, n);
    rec_sum = angle_sum = 0.0;
    n = 0;
  };
  const auto result = train(cfg, [&](const TrainLogRecord& r) {
    if (r.epoch != current) {
      flush();
      current = r.epoch;
    }
    if (!r.aborted) {
      rec_sum += r.losses.rec;
      angle_sum += r.losses.angle;
      ++n;
    }
  });
  flush();
  std::printf("final checkpoint %s (%llu steps, %llu critic updates)\n", result.final_checkpoint.c_str(),
              static_cast<unsigned long long>(result.steps), static_cast<unsigned long long>(result.critic_updates));
  if (!cfg.test_path.empty()) {
    const auto report = evaluate(load_checkpoint(result.final_checkpoint), load_cache(cfg.test_path));
    const auto out = fs::path(cfg.out_dir) / "eval.json";
    write_text(out, json(report).dump(2) + "\n");
    std::printf("test avg MSE/pixel %.6f, worst %.6f, angle MAE %.4f rad (%s)\n", report.avg_mse_per_pixel,
                report.worst_mse_per_pixel, report.angle_mae, out.c_str());
  }
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string json_out;
  std::string csv_out;
  int threads = 0;
};

void run_eval(const EvalArgs& a) {
  apply_threads(a.threads);
  const auto ck = load_checkpoint(a.checkpoint);
  const auto report = evaluate(ck, load_cache(a.data));
  const std::string text = json(report).dump(2) + "\n";
  std::fputs(text.c_str(), stdout);
  if (!a.json_out.empty()) write_text(a.json_out, text);
  if (!a.csv_out.empty()) write_text(a.csv_out, metrics_csv(report));
}

struct RenderArgs {
  std::string checkpoint;
  std::string data;
  std::string out = "grid.png";
  std::size_t first = 0;
  std::size_t count = 8;
  std::string worst_out;
  int threads = 0;
};

void run_render(const RenderArgs& a) {
  apply_threads(a.threads);
  auto nets = networks_from(load_checkpoint(a.checkpoint));
  const auto split = load_cache(a.data);
  if (a.count == 0) throw ArgumentError("--count must be positive");
  std::vector<std::size_t> idx(a.count);
  std::iota(idx.begin(), idx.end(), a.first);
  render_grid(comparison_rows(nets, split, idx), a.out);
  std::printf("wrote %s\n", a.out.c_str());
  if (!a.worst_out.empty()) {
    const auto w = worst_case(nets, split);
    render_grid({{"ground truth", {w.target}}, {"input", {w.input}}, {"reconstruction", {w.reconstruction}}}, a.worst_out);
    std::printf("worst case: sample %zu, MSE/pixel %.6f (%s)\n", w.index, w.mse, a.worst_out.c_str());
  }
}

struct InferArgs {
  std::string checkpoint;
  std::string image;
  std::string out;
  bool normalize_input = false;
  int threads = 0;
};

void run_infer(const InferArgs& a) {
  apply_threads(a.threads);
  auto nets = networks_from(load_checkpoint(a.checkpoint));
  const auto png = png::read_gray8(a.image);
  Image img(png.height, png.width);
  for (std::size_t i = 0; i < img.size(); ++i) img.pixels[i] = static_cast<float>(png.pixels[i]) / 255.0f;
  if (a.normalize_input) img = normalize(img);
  if (img.height != img.width || img.height != nets.spec().input_size)
    throw DimensionError("infer: image is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                         ", model expects " + std::to_string(nets.spec().input_size) + " px square");
  const std::vector<Image> one{img};
  const auto pred = predict(nets, one);
  json j{{"theta_hat", pred.theta_hat.front()}, {"theta_hat_wrapped", wrap_angle(pred.theta_hat.front())}};
  if (!a.out.empty()) {
    render_grid({{"reconstruction", {pred.reconstructions.front()}}}, a.out);
    j["reconstruction"] = a.out;
  }
  std::puts(j.dump().c_str());
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e)) return 3;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ArgumentError*>(&e)) return 1;
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rotation-invariant adversarial autoencoder"};
  app.require_subcommand(1, 1);
  app.set_version_flag("--version", "canon_pose 1.0");

  PrepareArgs prep;
  auto* p = app.add_subcommand("prepare-mnist", "Build rotated-MNIST train/test caches from the IDX files");
  p->add_option("--mnist-dir", prep.mnist_dir, "Directory with the MNIST IDX files (env CANON_POSE_DATA)")->capture_default_str();
  p->add_option("--out", prep.out, "Output directory")->capture_default_str();
  p->add_option("--seed", prep.seed, "Rotation seed")->capture_default_str();
  p->add_option("--train-count", prep.train_count, "Training images to keep")->capture_default_str();
  p->add_option("--test-count", prep.test_count, "Test images to keep")->capture_default_str();

  SynthArgs syn;
  auto* s = app.add_subcommand("synth", "Render a synthetic projection stack and write train/test caches");
  s->add_option("--count", syn.count, "Total projections")->capture_default_str();
  s->add_option("--size", syn.size, "Image size in pixels")->capture_default_str();
  s->add_option("--train", syn.train, "Training projections")->capture_default_str();
  s->add_option("--test", syn.test, "Test projections")->capture_default_str();
  s->add_option("--seed", syn.seed, "Rotation and noise seed")->capture_default_str();
  s->add_option("--noise", syn.noise, "Additive Gaussian noise std")->capture_default_str();
  s->add_option("--blobs", syn.blobs, "Gaussian blobs in the phantom")->capture_default_str();
  s->add_option("--phantom-seed", syn.phantom_seed, "Phantom layout seed")->capture_default_str();
  s->add_option("--out", syn.out, "Output directory (env CANON_POSE_DATA)")->capture_default_str();

  std::string config_path;
  std::vector<std::string> overrides;
  auto* t = app.add_subcommand("train", "Train encoder, decoder and critic");
  t->add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  t->add_option("--override", overrides, "key=value applied over the config file (repeatable)");
  TrainFlags flags(t);
  flags.add("--train-data", &TrainConfig::train_path, "Training cache");
  flags.add("--test-data", &TrainConfig::test_path, "Test cache, evaluated after training");
  flags.add("--out", &TrainConfig::out_dir, "Run directory");
  flags.add("--resume", &TrainConfig::resume, "Checkpoint to continue from");
  flags.add("--epochs", &TrainConfig::epochs, "Epochs");
  flags.add("--lr", &TrainConfig::lr, "Learning rate");
  flags.add("--lr-decay-epoch", &TrainConfig::lr_decay_epoch, "Epoch at which the learning rate decays");
  flags.add("--lr-decay-factor", &TrainConfig::lr_decay_factor, "Multiplicative learning rate decay");
  flags.add("--weight-decay", &TrainConfig::weight_decay, "Decoupled weight decay");
  flags.add("--critic-every", &TrainConfig::decoder_steps_per_critic_step, "Decoder steps per critic step");
  flags.add("--batch-size", &TrainConfig::batch_size, "Batch size");
  flags.add("--clip", &TrainConfig::clip_c, "Critic weight clipping bound");
  flags.add("--seed", &TrainConfig::seed, "Seed");
  flags.add("--w-angle", &TrainConfig::w_angle, "Angle loss weight");
  flags.add("--w-rec", &TrainConfig::w_rec, "Reconstruction loss weight");
  flags.add("--w-adv", &TrainConfig::w_adv, "Adversarial loss weight");
  flags.add("--wrap", &TrainConfig::wrap, "Wrap angle differences: auto, on, off");
  flags.add("--paper-literal-adv", &TrainConfig::paper_literal_adv, "Use the literal printed adversarial signs");
  flags.add("--squared-l2", &TrainConfig::squared_l2, "Squared L2 term in the reconstruction loss");
  flags.add("--rerotate-per-epoch", &TrainConfig::rerotate_per_epoch, "Draw fresh rotations every epoch");
  flags.add("--content-dim", &TrainConfig::content_dim, "Content code width D");
  flags.add("--normalization", &TrainConfig::normalization, "Encoder/decoder normalization: layer, none");
  flags.add("--checkpoint-every", &TrainConfig::checkpoint_every, "Epochs between checkpoints (0: final only)");
  flags.add("--threads", &TrainConfig::threads, "BLAS threads (0: all cores, 1: deterministic)");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Compute reconstruction and angle metrics on a cache");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint")->required();
  e->add_option("--data", ev.data, "Dataset cache")->required();
  e->add_option("--json", ev.json_out, "Write the report as JSON");
  e->add_option("--csv", ev.csv_out, "Write the report as a one-row CSV");
  e->add_option("--threads", ev.threads, "BLAS threads (0: all cores)")->capture_default_str();

  RenderArgs rd;
  auto* r = app.add_subcommand("render", "Write a ground truth / input / reconstruction grid");
  r->add_option("--checkpoint", rd.checkpoint, "Checkpoint")->required();
  r->add_option("--data", rd.data, "Dataset cache")->required();
  r->add_option("--out", rd.out, "Output PNG")->capture_default_str();
  r->add_option("--first", rd.first, "First sample index")->capture_default_str();
  r->add_option("--count", rd.count, "Columns")->capture_default_str();
  r->add_option("--worst-out", rd.worst_out, "Also render the worst-case sample to this PNG");
  r->add_option("--threads", rd.threads, "BLAS threads (0: all cores)")->capture_default_str();

  InferArgs in;
  auto* i = app.add_subcommand("infer", "Predict the angle and canonical image for one grayscale PNG");
  i->add_option("--checkpoint", in.checkpoint, "Checkpoint")->required();
  i->add_option("--image", in.image, "Input PNG (8-bit grayscale)")->required();
  i->add_option("--out", in.out, "Write the reconstruction PNG");
  i->add_flag("--normalize", in.normalize_input, "Min-max normalize the input first")->capture_default_str();
  i->add_option("--threads", in.threads, "BLAS threads (0: all cores)")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& ok) {
    return app.exit(ok);
  } catch (const CLI::ParseError& err) {
    std::cerr << "ERROR 1: " << err.what() << "\n";
    return 1;
  }

  try {
    if (*p) run_prepare(prep);
    else if (*s) run_synth(syn);
    else if (*t) run_train(config_path, overrides, flags);
    else if (*e) run_eval(ev);
    else if (*r) run_render(rd);
    else if (*i) run_infer(in);
  } catch (const std::exception& err) {
    const int code = exit_code_for(err);
    std::cerr << "ERROR " << code << ": " << err.what() << "\n";
    return code;
  }
  return 0;
}
