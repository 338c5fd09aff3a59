#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "canon_pose/binary_io.hpp"
#include "canon_pose/config.hpp"
#include "canon_pose/model.hpp"

namespace canon_pose {

struct OptimizerState {
  std::uint64_t steps = 0;
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

// Everything needed to resume training or to run inference.
struct Checkpoint {
  NetworkSpec spec;
  TrainConfig config;
  std::uint64_t epochs_completed = 0;
  std::uint64_t global_step = 0;
  std::uint64_t critic_updates = 0;
  std::string rng_state;
  ParameterSet encoder, decoder, critic;
  OptimizerState encoder_opt, decoder_opt, critic_opt;
  std::string source_tag;  // dataset the run trained on, informational
};

// Layout (little-endian):
//   "RIAC" | u32 version | string header-json
//   3 x ParameterSet: u64 n | n x (string name, u32 rank, u64 dims[rank], f32 values)
//   3 x OptimizerState: u64 steps | u64 n | n x (u64 len, f32 m[len], f32 v[len])
//   u32 CRC32 of every preceding byte
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'R', 'I', 'A', 'C'};

namespace detail {

inline void put_parameters(io::Writer& out, const ParameterSet& set) {
  out.put<std::uint64_t>(set.arrays.size());
  for (const auto& a : set.arrays) {
    out.put_string(a.name);
    out.put<std::uint32_t>(static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) out.put<std::uint64_t>(d);
    out.put_array<float>(a.values);
  }
}

inline ParameterSet get_parameters(io::Reader& in) {
  ParameterSet set;
  const auto n = in.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < n; ++i) {
    ParameterSet::Array a;
    a.name = in.get_string();
    const auto rank = in.get<std::uint32_t>();
    if (rank > 8) throw FormatError("checkpoint: implausible parameter rank");
    for (std::uint32_t k = 0; k < rank; ++k) a.shape.push_back(in.get<std::uint64_t>());
    a.values.resize(nn::element_count(a.shape));
    in.get_array<float>(a.values);
    set.arrays.push_back(std::move(a));
  }
  return set;
}

inline void put_optimizer(io::Writer& out, const OptimizerState& st) {
  out.put<std::uint64_t>(st.steps);
  out.put<std::uint64_t>(st.m.size());
  for (std::size_t k = 0; k < st.m.size(); ++k) {
    out.put<std::uint64_t>(st.m[k].size());
    out.put_array<float>(st.m[k]);
    out.put_array<float>(st.v[k]);
  }
}

inline OptimizerState get_optimizer(io::Reader& in) {
  OptimizerState st;
  st.steps = in.get<std::uint64_t>();
  const auto n = in.get<std::uint64_t>();
  for (std::uint64_t k = 0; k < n; ++k) {
    const auto len = in.get<std::uint64_t>();
    if (len > in.remaining()) throw TruncationError("checkpoint: truncated optimizer state");
    std::vector<float> m(len), v(len);
    in.get_array<float>(m);
    in.get_array<float>(v);
    st.m.push_back(std::move(m));
    st.v.push_back(std::move(v));
  }
  return st;
}

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& ck) {
  io::Writer out;
  out.put_raw({reinterpret_cast<const unsigned char*>(kCheckpointMagic), 4});
  out.put<std::uint32_t>(kCheckpointVersion);
  json header = {{"spec", ck.spec},
                 {"config", ck.config},
                 {"epochs_completed", ck.epochs_completed},
                 {"global_step", ck.global_step},
                 {"critic_updates", ck.critic_updates},
                 {"rng_state", ck.rng_state},
                 {"source", ck.source_tag}};
  out.put_string(header.dump());
  for (const auto* set : {&ck.encoder, &ck.decoder, &ck.critic}) detail::put_parameters(out, *set);
  for (const auto* st : {&ck.encoder_opt, &ck.decoder_opt, &ck.critic_opt}) detail::put_optimizer(out, *st);
  out.put<std::uint32_t>(io::crc32_of(out.bytes()));
  return std::move(out.bytes());
}

inline Checkpoint decode_checkpoint(std::span<const unsigned char> bytes, const std::string& what = "checkpoint") {
  io::Reader in(bytes, what);
  const auto magic = in.take(4);
  if (!std::equal(magic.begin(), magic.end(), kCheckpointMagic)) throw FormatError(what + ": bad magic (expected RIAC)");
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw VersionError(what + ": checkpoint version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  if (bytes.size() < 12) throw TruncationError(what + ": truncated");
  std::uint32_t stored_crc = 0;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  if (stored_crc != io::crc32_of(bytes.first(bytes.size() - 4)))
    throw ChecksumError(what + ": CRC32 mismatch, file is corrupt or truncated");
  Checkpoint ck;
  try {
    const auto header = json::parse(in.get_string());
    ck.spec = header.at("spec").get<NetworkSpec>();
    ck.config = config_from_json(header.at("config"));
    ck.epochs_completed = header.at("epochs_completed").get<std::uint64_t>();
    ck.global_step = header.at("global_step").get<std::uint64_t>();
    ck.critic_updates = header.at("critic_updates").get<std::uint64_t>();
    ck.rng_state = header.at("rng_state").get<std::string>();
    ck.source_tag = header.at("source").get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError(what + ": malformed header: " + e.what());
  }
  ck.encoder = detail::get_parameters(in);
  ck.decoder = detail::get_parameters(in);
  ck.critic = detail::get_parameters(in);
  ck.encoder_opt = detail::get_optimizer(in);
  ck.decoder_opt = detail::get_optimizer(in);
  ck.critic_opt = detail::get_optimizer(in);
  in.get<std::uint32_t>();
  if (in.remaining() != 0) throw FormatError(what + ": trailing bytes after footer");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  // write-then-rename
  auto tmp = path;
  tmp += ".tmp";
  io::write_file(tmp, encode_checkpoint(ck));
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path), path.string());
}

/// Builds float networks from a checkpoint's spec and weights.
inline Networks<float> networks_from(const Checkpoint& ck) {
  Networks<float> nets(ck.spec);
  import_parameters(nets.encoder, ck.encoder);
  import_parameters(nets.decoder, ck.decoder);
  import_parameters(nets.critic, ck.critic);
  return nets;
}

}  // namespace canon_pose
