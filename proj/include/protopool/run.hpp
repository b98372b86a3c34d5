#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "protopool/config.hpp"
#include "protopool/dataset.hpp"
#include "protopool/training.hpp"

namespace protopool {

struct RunData {
  data::FeatureMapDataset train;
  data::FeatureMapDataset val;
  /// Set when the data was generated rather than read.
  std::optional<data::SyntheticManifest> manifest;
};

/// Reads `config.dataset` or generates the planted dataset, then splits it.
/// With a dataset file, the config's classes, height, width and depth are
/// overwritten with the file's so that the resolved config describes the run.
RunData prepare_data(RunConfig& config);

/// Worker cap from PROTOPOOL_THREADS, defaulting to the hardware concurrency.
/// Throws ParameterError for a value that is not a positive integer.
std::size_t worker_threads();

struct AblationArm {
  std::string name;
  train::TrainConfig config;
};

/// Full model, then one arm each with the Gumbel trick, the orthogonality
/// loss and focal similarity removed. All arms share the base seed.
std::vector<AblationArm> ablation_arms(const train::TrainConfig& base);

struct AblationRow {
  std::string arm;
  GumbelVariant gumbel = GumbelVariant::paper;
  bool orth = true;
  bool focal = true;
  double val_acc = 0.0;
  double pre_projection_val_acc = 0.0;
  double post_projection_val_acc = 0.0;
  /// Binarization of the converged (pre-projection) slots.
  double binarized = 0.0;
  double max_q_median = 0.0;
  train::TrainResult result;
};

inline constexpr const char* kAblationHeader =
    "arm,gumbel,orth,focal,val_acc,pre_projection_val_acc,post_projection_val_acc,binarized,max_q_median";

/// Trains every arm on `threads` workers. Results are in arm order and do not
/// depend on the thread count.
std::vector<AblationRow> run_ablation(const std::vector<AblationArm>& arms, const RunData& data, std::size_t threads);

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path);

}  // namespace protopool
