#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "protopool/pool.hpp"

namespace protopool::data {

struct Sample {
  std::uint32_t label = 0;
  std::vector<double> features;  // H*W*D, row-major (location-major, depth fastest)
};

/// Labeled feature maps with uniform H, W, D. Values are float32-representable
/// so that the on-disk form round-trips exactly.
struct FeatureMapDataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t depth = 0;
  std::vector<Sample> samples;
  std::vector<std::string> class_names;  // optional; not persisted

  std::size_t size() const { return samples.size(); }
  std::size_t locations() const { return height * width; }
  /// max label + 1 (0 for an empty dataset).
  std::size_t num_classes() const;
  std::vector<std::size_t> class_counts() const;

  FeatureMap feature_map(std::size_t index) const;
  /// Stacked (B*HW) x D features of the selected samples.
  Tensor batch_features(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> labels(std::span<const std::size_t> indices) const;

  /// Throws DataError unless shapes are uniform and labels are dense in [0, C).
  void validate() const;
};

inline constexpr std::uint32_t kDatasetVersion = 1;

/// PPFM layout, little-endian:
///   "PPFM" | u32 version | u32 N | u32 H | u32 W | u32 D
///   N x ( u32 label | H*W*D x f32 )
std::vector<std::uint8_t> encode_dataset(const FeatureMapDataset& ds);
FeatureMapDataset decode_dataset(std::span<const std::uint8_t> bytes);

void write_dataset(const FeatureMapDataset& ds, const std::filesystem::path& path);
FeatureMapDataset read_dataset(const std::filesystem::path& path);

// ---------------------------------------------------------------------------

struct SyntheticSpec {
  std::size_t classes = 20;
  std::size_t parts = 30;  // G ground-truth part vectors
  std::size_t parts_per_class = 3;
  /// Fraction of each class's parts taken from the shared pool. Shared parts
  /// are spread over the pool so that each one is planted in at least two
  /// classes where possible, and two classes share as few parts as possible.
  double shared_fraction = 1.0;
  double sigma = 0.1;
  /// Norm of the mean vector shared by every background location.
  double background_offset = 2.0;
  double jitter = 0.05;
  std::size_t height = 7;
  std::size_t width = 7;
  std::size_t depth = 16;
  std::size_t samples_per_class = 50;
  std::uint64_t seed = 7;

  void validate() const;
};

struct Placement {
  std::size_t sample = 0;
  std::size_t part = 0;
  std::size_t row = 0;
  std::size_t col = 0;
};

struct SyntheticManifest {
  std::vector<std::vector<std::size_t>> class_parts;
  std::vector<Placement> placements;
  Tensor part_vectors;  // G x D
  /// Accuracy of the nearest-part oracle classifier on the generated samples.
  double oracle_accuracy = 0.0;

  /// Number of ground-truth parts two classes have in common.
  std::size_t shared_parts(std::size_t a, std::size_t b) const;
};

struct SyntheticData {
  FeatureMapDataset dataset;
  SyntheticManifest manifest;
};

/// Gaussian background (sigma) with each class's unit-norm part vectors, plus
/// N(0, jitter^2) noise, planted at distinct random grid cells.
SyntheticData generate_synthetic(const SyntheticSpec& spec);

/// Predicts the class whose parts have the smallest summed nearest-patch
/// squared distance; returns the fraction predicted correctly.
double nearest_part_accuracy(const FeatureMapDataset& ds, const SyntheticManifest& manifest);

/// Writes `<prefix>.classes.csv` (class_id,part_id) and
/// `<prefix>.placements.csv` (sample_id,part_id,row,col).
void write_manifest(const SyntheticManifest& manifest, const std::filesystem::path& prefix);
/// Reads the class-part table back (placements optional).
SyntheticManifest read_manifest(const std::filesystem::path& prefix);

// ---------------------------------------------------------------------------

struct Split {
  FeatureMapDataset train;
  FeatureMapDataset val;
  std::vector<std::size_t> train_index;
  std::vector<std::size_t> val_index;
};

/// Stratified split: each class contributes round(val_fraction * n_c),
/// clamped to [1, n_c - 1], samples to validation.
Split split(const FeatureMapDataset& ds, double val_fraction, std::uint64_t seed);

}  // namespace protopool::data
