#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "protopool/dataset.hpp"
#include "protopool/errors.hpp"
#include "protopool/pool.hpp"

namespace protopool::train {

using data::FeatureMapDataset;

struct LossWeights {
  double entropy = 1.0;
  double clst = 0.8;
  double sep = -0.08;
  double orth = 1.0;
  double l1 = 1e-4;
};

enum class TauSchedule {
  /// 1/sqrt(alpha * epoch) clamped to [tau_floor, 1], tau_floor from the switch epoch on.
  paper,
  /// 1 at epoch 1 decaying geometrically to tau_floor at the switch epoch.
  geometric,
};

struct Schedule {
  double alpha = 3.4e4;
  double tau_floor = 1e-3;
  std::size_t tau_switch_epoch = 30;
  TauSchedule tau_schedule = TauSchedule::paper;

  /// Cap on warm-up plus joint epochs. Zero trains nothing.
  std::size_t epochs = 60;
  std::size_t warmup_epochs = 10;
  std::size_t patience = 12;
  std::size_t batch_size = 80;
  bool freeze_addon_warmup = false;

  double lr_addon = 1.5e-3;
  double lr_pool = 1.5e-3;
  std::size_t lr_halving_every = 5;
  double weight_decay = 1e-3;

  double lr_finetune = 1e-4;
  std::size_t finetune_epochs = 15;

  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

struct TrainConfig {
  std::size_t slots = 3;
  std::size_t prototypes = 30;
  /// Latent depth produced by the add-on; 0 keeps the input depth.
  std::size_t depth = 0;
  GumbelVariant gumbel = GumbelVariant::paper;
  bool orth = true;
  bool focal = true;
  double epsilon = kDefaultEpsilon;
  std::uint64_t seed = 7;
  LossWeights weights;
  Schedule schedule;

  void validate() const;
};

double temperature(std::size_t epoch, const Schedule& schedule);

/// Joint-phase learning rate: base * 0.5^floor(joint_epoch / halving_every).
double joint_learning_rate(double base, std::size_t joint_epoch, const Schedule& schedule);

// ---------------------------------------------------------------------------

struct LossBreakdown {
  double total = 0.0;
  double ce = 0.0;
  double clst = 0.0;
  double sep = 0.0;
  double orth = 0.0;
  double l1 = 0.0;
};

struct LossTerms {
  Var total;
  Var ce;
  Var clst;
  Var sep;
  Var orth;
  Var l1;

  LossBreakdown values() const;
};

/// total = w_e*CE + w_clst*L_clst + w_sep*L_sep + w_orth*L_orth + w_l1*|off-block head|_1
///
/// L_clst = mean_b(-max_k s(b, y_b, k)) and L_sep = mean_b(-max_{c != y_b, k} s(b, c, k))
/// are distance-like (lower means more similar), so the negative separation
/// weight pushes other classes' slots away. L_orth is always computed; it only
/// enters the total when `orth_enabled`.
LossTerms build_loss(Graph& g, const ForwardOutput& out, const BoundModel& bound,
                     const ProtoPoolModel& model, std::span<const std::size_t> labels,
                     const LossWeights& weights, bool orth_enabled);

/// Loss on the selected samples. `noise` is used in train mode only.
LossBreakdown total_loss(const FeatureMapDataset& ds, std::span<const std::size_t> batch,
                         const ProtoPoolModel& model, const LossWeights& weights, Mode mode,
                         const Tensor* noise = nullptr, bool orth_enabled = true);

/// Parameters bound as constants (no gradients), for read-only evaluation.
BoundModel bind_frozen(Graph& g, const ProtoPoolModel& model);

// ---------------------------------------------------------------------------

struct EvalResult {
  double accuracy = 0.0;
  std::vector<double> per_class_accuracy;
  std::vector<std::size_t> predictions;
  double cross_entropy = 0.0;
};

/// Eval-mode (hardened, noiseless) top-1 accuracy.
EvalResult evaluate(const ProtoPoolModel& model, const FeatureMapDataset& ds, std::size_t batch_size = 80);

/// Class logits for every sample, B x C, in the given mode without noise.
Tensor predict_logits(const ProtoPoolModel& model, const FeatureMapDataset& ds, Mode mode,
                      std::size_t batch_size = 80);

/// Latent (post add-on) feature map of one sample.
FeatureMap latent_map(const ProtoPoolModel& model, const FeatureMapDataset& ds, std::size_t index);

struct ProjectionEntry {
  std::size_t prototype = 0;
  /// False when no class has a slot on this prototype; it is left unchanged.
  bool used = false;
  std::vector<std::size_t> classes;
  std::size_t sample = 0;
  std::size_t row = 0;
  std::size_t col = 0;
  /// L2 distance between the old prototype and the chosen patch.
  double distance = 0.0;
};

struct ProjectionReport {
  std::vector<ProjectionEntry> entries;

  void write_csv(const std::filesystem::path& path) const;
};

/// Replaces every used prototype with its nearest latent training patch among
/// images whose label is in the prototype's (hardened) class set.
ProjectionReport project_prototypes(ProtoPoolModel& model, const FeatureMapDataset& train);

// ---------------------------------------------------------------------------

struct EpochMetrics {
  std::size_t epoch = 0;
  std::string phase;
  double tau = 0.0;
  LossBreakdown loss;
  double train_acc = 0.0;
  double val_acc = 0.0;
  double max_q_median = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "epoch,phase,tau,loss,ce,clst,sep,orth,l1,train_acc,val_acc,max_q_median";

void write_metrics_csv(std::span<const EpochMetrics> log, const std::filesystem::path& path);
std::string metrics_csv(std::span<const EpochMetrics> log);

/// Median over slots of the largest noise-free relaxed entry.
double max_q_median(const SlotBank& slots);
/// Fraction of slots whose largest relaxed entry exceeds `threshold`.
double binarized_fraction(const SlotBank& slots, double threshold = 0.95);

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t steps = 0;
};

struct TrainResult {
  ProtoPoolModel model;
  /// Model at the end of joint training, before projection.
  std::optional<ProtoPoolModel> converged;
  std::vector<EpochMetrics> log;
  ProjectionReport projection;
  std::size_t epochs_run = 0;
  std::string phase = "init";
  double pre_projection_val_acc = 0.0;
  double post_projection_val_acc = 0.0;
  double final_val_acc = 0.0;
  std::string rng_state;
};

/// Raised when a loss component turns non-finite; carries the last good state.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, TrainResult last_good)
      : NumericError(what), last_good_(std::move(last_good)) {}
  const TrainResult& last_good() const { return last_good_; }

 private:
  TrainResult last_good_;
};

/// Builds a model for the dataset's shape and config.
ProtoPoolModel initial_model(const TrainConfig& config, std::size_t classes, std::size_t in_depth, Rng& rng);

/// Warm-up, joint training with early stopping on validation cross-entropy,
/// projection, then last-layer fine-tuning. Deterministic given config.seed.
/// `initial` replaces the freshly initialized model when given.
TrainResult train(const FeatureMapDataset& train_set, const FeatureMapDataset& val_set,
                  const TrainConfig& config, const ProtoPoolModel* initial = nullptr);

}  // namespace protopool::train
