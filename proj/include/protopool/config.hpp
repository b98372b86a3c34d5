#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "protopool/dataset.hpp"
#include "protopool/training.hpp"

namespace protopool {

/// Every effective parameter of a run, as a flat key=value file.
///
/// With an empty `dataset` the run trains on a generated planted dataset
/// described by the synthetic fields and split by `val_fraction`. With a
/// dataset path, `classes`, `height`, `width` and `depth` are taken from the
/// file when the run resolves.
struct RunConfig {
  std::string dataset;
  std::string out = "run";
  double val_fraction = 0.2;
  data::SyntheticSpec synth;
  train::TrainConfig train;

  RunConfig();

  /// Keys in file order.
  static const std::vector<std::string>& keys();

  /// Throws ParameterError for an unknown key or a malformed value.
  void set(std::string_view key, std::string_view value);
  std::string get(std::string_view key) const;

  /// K in [1, 10], positive dimensions, finite weights, and the checks of
  /// the synthetic spec and the training config.
  void validate() const;

  /// One `key = value` line per key, in keys() order.
  std::string serialize() const;
  /// Applies the lines of `text` on top of the current values. Blank lines
  /// and lines starting with '#' are ignored; a key may appear only once.
  void apply(std::string_view text);
  /// apply() on the contents of a file; only the keys it names change.
  void apply_file(const std::filesystem::path& path);

  static RunConfig parse(std::string_view text);
  static RunConfig load(const std::filesystem::path& path);
  /// Writes `dir/config.resolved`.
  void write_resolved(const std::filesystem::path& dir) const;
};

}  // namespace protopool
