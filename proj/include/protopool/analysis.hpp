#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "protopool/dataset.hpp"
#include "protopool/pool.hpp"

namespace protopool::analysis {

enum class Assignment { relaxed, hardened };

/// (C*K) x M slot distributions: noise-free relaxed rows or argmax one-hots.
Tensor assignment_matrix(const ProtoPoolModel& model, Assignment kind = Assignment::relaxed);
/// Header `class,slot,proto_0,...,proto_{M-1}`.
void write_assignment_csv(const Tensor& matrix, std::size_t slots, const std::filesystem::path& path);

struct HistogramBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
};

/// Equal-width bins over [0, 1] of every entry of the assignment matrix. The
/// last bin is closed so that 1.0 lands in it.
std::vector<HistogramBin> q_histogram(const ProtoPoolModel& model, std::size_t bins,
                                      Assignment kind = Assignment::relaxed);
/// Header `bin_lo,bin_hi,count`.
void write_histogram_csv(std::span<const HistogramBin> hist, const std::filesystem::path& path);

/// Distinct classes holding at least one (hardened) slot on each prototype.
std::vector<std::vector<std::size_t>> prototype_classes(const ProtoPoolModel& model);

struct SharingStats {
  /// Classes per prototype, 0 for unassigned ones.
  std::vector<std::size_t> counts;
  /// histogram[n] = number of prototypes shared by exactly n classes, n >= 1
  /// (index 0 is always 0).
  std::vector<std::size_t> histogram;
  std::size_t assigned = 0;
  std::size_t unassigned = 0;
  /// Over assigned prototypes. std is the population standard deviation.
  double mean = 0.0;
  double std = 0.0;
  /// Over class slots: each slot counts the classes sharing its prototype.
  /// This weights a prototype by how many slots use it.
  double slot_mean = 0.0;
  double slot_std = 0.0;
};

SharingStats sharing_stats(const ProtoPoolModel& model);
/// Header `proto_id,class_count`, one row per prototype including unassigned ones.
void write_sharing_csv(const SharingStats& stats, const std::filesystem::path& path);
/// `key,value` rows: assigned, unassigned, mean, std, slot_mean, slot_std,
/// and hist_<n> for every n >= 1.
void write_sharing_summary_csv(const SharingStats& stats, const std::filesystem::path& path);

/// Aggregates over several runs, reading a "mean +/- std" figure both ways.
struct RunsSharingSummary {
  /// Mean and std of the per-run means.
  double run_mean = 0.0;
  double run_std = 0.0;
  /// Mean and std over the assigned prototypes of all runs pooled.
  double pooled_mean = 0.0;
  double pooled_std = 0.0;
};

RunsSharingSummary summarize_runs(std::span<const SharingStats> runs);

struct Edge {
  std::size_t a = 0;
  std::size_t b = 0;
  std::size_t weight = 0;
};

struct ClassGraph {
  std::size_t classes = 0;
  /// a < b, weight > 0, sorted by (a, b).
  std::vector<Edge> edges;

  /// Symmetric lookup; 0 for absent edges and for a == b.
  std::size_t weight(std::size_t a, std::size_t b) const;
  std::size_t total_weight() const;
};

/// Edge (a, b) weighs the number of prototypes hardened slots of both a and b use.
ClassGraph class_graph(const ProtoPoolModel& model);
/// Header `class_a,class_b,weight`, one row per unordered pair.
void write_graph_csv(const ClassGraph& graph, const std::filesystem::path& path);

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either side is constant.
double spearman(std::span<const double> x, std::span<const double> y);

/// Correlation between per-pair shared-prototype counts and the manifest's
/// shared-part counts over all class pairs a < b.
double sharing_correlation(const ProtoPoolModel& model, const data::SyntheticManifest& manifest);

/// Min-max normalized to 0..255; a constant map becomes uniform 128.
std::vector<unsigned char> to_gray(const Tensor& map);
/// Binary P5 graymap of an H x W map.
void write_pgm(const Tensor& map, const std::filesystem::path& path);
/// Header `row,col,value`, values unnormalized.
void write_activation_csv(const Tensor& map, const std::filesystem::path& path);

/// Activation of prototype `prototype` over the latent map of `sample`.
/// Writes `<prefix>.pgm` and `<prefix>.csv` and returns the H x W map.
Tensor export_activation(const ProtoPoolModel& model, const data::FeatureMapDataset& ds, std::size_t sample,
                         std::size_t prototype, const std::filesystem::path& prefix);

}  // namespace protopool::analysis
