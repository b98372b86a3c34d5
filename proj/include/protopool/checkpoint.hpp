#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "protopool/pool.hpp"
#include "protopool/training.hpp"

namespace protopool::train {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Everything needed to resume or inspect a run.
struct Checkpoint {
  ProtoPoolModel model;
  std::size_t epoch = 0;
  std::string phase = "init";
  /// Text form of the trainer's mt19937_64 engine (operator<<).
  std::string rng_state;
  /// Free-form string pairs: schedule state, run configuration, summary metrics.
  std::map<std::string, std::string> metadata;
};

/// PPCK layout, little-endian:
///   "PPCK" | u32 version | u32 array count
///   per array:  u32 name length | name | u32 rank | rank x u32 dims | numel x f64
///   u32 pair count | per pair: u32 key length | key | u32 value length | value
///
/// Arrays: addon.weight, addon.bias, pool.prototypes, slots.logits, head.weights.
/// Model scalars, epoch, phase and rng state live in the metadata block under
/// reserved keys; user metadata keys may not collide with them. Pairs are
/// written in key order, so encoding is a pure function of the checkpoint.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Final model of a run, with the schedule state at the end of training.
Checkpoint make_checkpoint(const TrainResult& result, const TrainConfig& config);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double x);
double parse_double(const std::string& text, const std::string& what);

}  // namespace protopool::train
