#include "protopool/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "protopool/errors.hpp"

namespace protopool::train {

void Schedule::validate() const {
  auto positive = [](double x, const char* name) {
    if (!(x > 0.0) || !std::isfinite(x)) throw ParameterError(std::string(name) + " must be positive");
  };
  positive(alpha, "alpha");
  positive(tau_floor, "tau_floor");
  positive(lr_addon, "lr_addon");
  positive(lr_pool, "lr_pool");
  positive(lr_finetune, "lr_finetune");
  positive(adam_eps, "adam_eps");
  if (tau_floor > 1.0) throw ParameterError("tau_floor must not exceed 1");
  if (tau_switch_epoch < 1) throw ParameterError("tau_switch_epoch must be at least 1");
  if (batch_size == 0) throw ParameterError("batch_size must be positive");
  if (lr_halving_every == 0) throw ParameterError("lr_halving_every must be positive");
  if (patience == 0) throw ParameterError("patience must be positive");
  if (!(weight_decay >= 0.0)) throw ParameterError("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ParameterError("adam betas must lie in [0, 1)");
  }
}

void TrainConfig::validate() const {
  if (slots == 0 || slots > kMaxSlotsPerClass) {
    throw ParameterError("slots must lie in [1, " + std::to_string(kMaxSlotsPerClass) + "]");
  }
  if (prototypes == 0) throw ParameterError("prototypes must be positive");
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw ParameterError("epsilon must lie in (0, 1)");
  for (double w : {weights.entropy, weights.clst, weights.sep, weights.orth, weights.l1}) {
    if (!std::isfinite(w)) throw ParameterError("loss weights must be finite");
  }
  schedule.validate();
}

double temperature(std::size_t epoch, const Schedule& schedule) {
  if (epoch < 1) throw ParameterError("temperature schedule counts epochs from 1");
  if (epoch >= schedule.tau_switch_epoch) return schedule.tau_floor;
  if (schedule.tau_schedule == TauSchedule::geometric) {
    const double progress = static_cast<double>(epoch - 1) / static_cast<double>(schedule.tau_switch_epoch - 1);
    return std::pow(schedule.tau_floor, progress);
  }
  const double tau = 1.0 / std::sqrt(schedule.alpha * static_cast<double>(epoch));
  return std::clamp(tau, schedule.tau_floor, 1.0);
}

double joint_learning_rate(double base, std::size_t joint_epoch, const Schedule& schedule) {
  return base * std::pow(0.5, static_cast<double>(joint_epoch / schedule.lr_halving_every));
}

// ---------------------------------------------------------------------------

LossBreakdown LossTerms::values() const {
  return LossBreakdown{total.item(), ce.item(), clst.item(), sep.item(), orth.item(), l1.item()};
}

LossTerms build_loss(Graph& g, const ForwardOutput& out, const BoundModel& bound, const ProtoPoolModel& model,
                     std::span<const std::size_t> labels, const LossWeights& weights, bool orth_enabled) {
  const std::size_t batch = out.logits.value().dim(0);
  const std::size_t classes = model.classes(), slots = model.slots_per_class();
  if (labels.size() != batch) throw ShapeError("one label per sample required");
  if (batch == 0) throw ParameterError("loss needs a non-empty batch");

  LossTerms t;
  t.ce = ad::scale(ad::sum(ad::pick(ad::log_softmax(out.logits, 1), labels)), -1.0 / static_cast<double>(batch));

  Var per_class = ad::reduce(ad::Reduce::max, ad::reshape(out.slot_scores, Shape{batch, classes, slots}), 2);
  t.clst = ad::scale(ad::sum(ad::pick(per_class, labels)), -1.0 / static_cast<double>(batch));
  if (classes > 1) {
    Tensor exclude(Shape{batch, classes}, 0.0);
    for (std::size_t b = 0; b < batch; ++b) exclude.at(b, labels[b]) = -1e9;
    Var others = ad::reduce(ad::Reduce::max, per_class + g.constant(std::move(exclude)), 1);
    t.sep = ad::scale(ad::sum(others), -1.0 / static_cast<double>(batch));
  } else {
    t.sep = g.constant(Tensor::scalar(0.0));
  }

  t.orth = orthogonality_loss(out.distributions, classes, slots);
  t.l1 = ad::sum(ad::abs(bound.head * g.constant(model.head.off_block_mask())));

  Var total = ad::scale(t.ce, weights.entropy) + ad::scale(t.clst, weights.clst) + ad::scale(t.sep, weights.sep) +
              ad::scale(t.l1, weights.l1);
  if (orth_enabled) total = total + ad::scale(t.orth, weights.orth);
  t.total = total;
  return t;
}

BoundModel bind_frozen(Graph& g, const ProtoPoolModel& model) {
  return BoundModel{g.constant(model.addon.weight), g.constant(model.addon.bias),
                    g.constant(model.pool.prototypes), g.constant(model.slots.logits),
                    g.constant(model.head.weights)};
}

LossBreakdown total_loss(const FeatureMapDataset& ds, std::span<const std::size_t> batch,
                         const ProtoPoolModel& model, const LossWeights& weights, Mode mode, const Tensor* noise,
                         bool orth_enabled) {
  Graph g;
  BoundModel bound = bind_frozen(g, model);
  const Tensor features = ds.batch_features(batch);
  ForwardOutput out = forward(g, bound, model, features, batch.size(), mode, noise);
  const auto labels = ds.labels(batch);
  return build_loss(g, out, bound, model, labels, weights, orth_enabled).values();
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

std::size_t row_argmax(const Tensor& logits, std::size_t row) {
  const std::size_t c = logits.dim(1);
  return argmax(logits.data().subspan(row * c, c));
}

}  // namespace

Tensor predict_logits(const ProtoPoolModel& model, const FeatureMapDataset& ds, Mode mode, std::size_t batch_size) {
  if (batch_size == 0) throw ParameterError("batch_size must be positive");
  const std::size_t classes = model.classes();
  Tensor all(Shape{std::max<std::size_t>(ds.size(), 1), classes}, 0.0);
  const auto indices = iota_indices(ds.size());
  for (std::size_t begin = 0; begin < ds.size(); begin += batch_size) {
    const std::size_t end = std::min(ds.size(), begin + batch_size);
    const std::span<const std::size_t> chunk(indices.data() + begin, end - begin);
    Graph g;
    BoundModel bound = bind_frozen(g, model);
    ForwardOutput out = forward(g, bound, model, ds.batch_features(chunk), chunk.size(), mode, nullptr);
    const Tensor& logits = out.logits.value();
    std::copy(logits.data().begin(), logits.data().end(), all.data().begin() + static_cast<std::ptrdiff_t>(begin * classes));
  }
  return all;
}

EvalResult evaluate(const ProtoPoolModel& model, const FeatureMapDataset& ds, std::size_t batch_size) {
  EvalResult result;
  const std::size_t classes = model.classes();
  result.per_class_accuracy.assign(classes, 0.0);
  if (ds.size() == 0) return result;
  const Tensor logits = predict_logits(model, ds, Mode::eval, batch_size);
  std::vector<std::size_t> hits(classes, 0), totals(classes, 0);
  std::size_t correct = 0;
  double ce = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::size_t label = ds.samples[i].label;
    if (label >= classes) throw DataError("label " + std::to_string(label) + " exceeds model classes");
    const std::size_t pred = row_argmax(logits, i);
    result.predictions.push_back(pred);
    ++totals[label];
    if (pred == label) {
      ++hits[label];
      ++correct;
    }
    const double* row = logits.data().data() + i * classes;
    const double hi = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - hi);
    ce += std::log(z) + hi - row[label];
  }
  for (std::size_t c = 0; c < classes; ++c) {
    result.per_class_accuracy[c] = totals[c] ? static_cast<double>(hits[c]) / static_cast<double>(totals[c]) : 0.0;
  }
  result.accuracy = static_cast<double>(correct) / static_cast<double>(ds.size());
  result.cross_entropy = ce / static_cast<double>(ds.size());
  return result;
}

FeatureMap latent_map(const ProtoPoolModel& model, const FeatureMapDataset& ds, std::size_t index) {
  const std::size_t one[] = {index};
  Graph g;
  BoundModel bound = bind_frozen(g, model);
  const Tensor features = ds.batch_features(one);
  Var ones = g.constant(Tensor(Shape{features.dim(0), 1}, 1.0));
  Var latent = ad::matmul(g.constant(features), bound.addon_weight) + ad::matmul(ones, bound.addon_bias);
  return FeatureMap{ds.height, ds.width, latent.value()};
}

// ---------------------------------------------------------------------------

ProjectionReport project_prototypes(ProtoPoolModel& model, const FeatureMapDataset& train) {
  model.check_consistent();
  const std::size_t m_count = model.pool.size(), depth = model.pool.depth();
  const auto assignment = model.slots.assignment();
  std::vector<std::vector<std::size_t>> class_sets(m_count);
  for (std::size_t r = 0; r < assignment.size(); ++r) {
    auto& set = class_sets[assignment[r]];
    const std::size_t c = r / model.slots_per_class();
    if (std::find(set.begin(), set.end(), c) == set.end()) set.push_back(c);
  }

  std::vector<FeatureMap> latents;
  latents.reserve(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) latents.push_back(latent_map(model, train, i));

  ProjectionReport report;
  Tensor projected = model.pool.prototypes;
  for (std::size_t m = 0; m < m_count; ++m) {
    ProjectionEntry entry;
    entry.prototype = m;
    entry.classes = class_sets[m];
    std::sort(entry.classes.begin(), entry.classes.end());
    const auto p = model.pool.prototype(m);
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < train.size(); ++i) {
      const std::size_t label = train.samples[i].label;
      if (std::find(entry.classes.begin(), entry.classes.end(), label) == entry.classes.end()) continue;
      const Tensor& z = latents[i].z;
      for (std::size_t loc = 0; loc < latents[i].locations(); ++loc) {
        double acc = 0.0;
        for (std::size_t d = 0; d < depth; ++d) {
          const double diff = z.at(loc, d) - p[d];
          acc += diff * diff;
        }
        if (acc < best) {
          best = acc;
          entry.used = true;
          entry.sample = i;
          entry.row = loc / train.width;
          entry.col = loc % train.width;
        }
      }
    }
    if (entry.used) {
      entry.distance = std::sqrt(best);
      const std::size_t loc = entry.row * train.width + entry.col;
      for (std::size_t d = 0; d < depth; ++d) projected.at(m, d) = latents[entry.sample].z.at(loc, d);
    }
    report.entries.push_back(std::move(entry));
  }
  model.pool.prototypes = std::move(projected);
  return report;
}

void ProjectionReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  out << "proto_id,used,classes,sample_id,row,col,distance\n";
  out.precision(17);
  for (const auto& e : entries) {
    out << e.prototype << ',' << (e.used ? 1 : 0) << ',';
    for (std::size_t i = 0; i < e.classes.size(); ++i) out << (i ? ";" : "") << e.classes[i];
    out << ',' << e.sample << ',' << e.row << ',' << e.col << ',' << e.distance << '\n';
  }
  if (!out) throw DataError("failed writing " + path.string());
}

// ---------------------------------------------------------------------------

std::string metrics_csv(std::span<const EpochMetrics> log) {
  std::ostringstream out;
  out.precision(17);
  out << kMetricsHeader << '\n';
  for (const auto& m : log) {
    out << m.epoch << ',' << m.phase << ',' << m.tau << ',' << m.loss.total << ',' << m.loss.ce << ','
        << m.loss.clst << ',' << m.loss.sep << ',' << m.loss.orth << ',' << m.loss.l1 << ',' << m.train_acc << ','
        << m.val_acc << ',' << m.max_q_median << '\n';
  }
  return out.str();
}

void write_metrics_csv(std::span<const EpochMetrics> log, const std::filesystem::path& path) {
  std::ofstream out(path);
  out << metrics_csv(log);
  if (!out) throw DataError("failed writing " + path.string());
}

namespace {

std::vector<double> row_maxima(const SlotBank& slots) {
  const Tensor relaxed = slots.relaxed();
  const std::size_t m = slots.pool_size();
  std::vector<double> maxima(slots.rows());
  for (std::size_t r = 0; r < slots.rows(); ++r) {
    const auto row = relaxed.data().subspan(r * m, m);
    maxima[r] = *std::max_element(row.begin(), row.end());
  }
  return maxima;
}

}  // namespace

double max_q_median(const SlotBank& slots) {
  auto maxima = row_maxima(slots);
  std::sort(maxima.begin(), maxima.end());
  const std::size_t n = maxima.size();
  return n % 2 ? maxima[n / 2] : 0.5 * (maxima[n / 2 - 1] + maxima[n / 2]);
}

double binarized_fraction(const SlotBank& slots, double threshold) {
  const auto maxima = row_maxima(slots);
  const auto hits = std::count_if(maxima.begin(), maxima.end(), [threshold](double x) { return x > threshold; });
  return static_cast<double>(hits) / static_cast<double>(maxima.size());
}

// ---------------------------------------------------------------------------

ProtoPoolModel initial_model(const TrainConfig& config, std::size_t classes, std::size_t in_depth, Rng& rng) {
  config.validate();
  const std::size_t depth = config.depth == 0 ? in_depth : config.depth;
  ProtoPoolModel model = make_model(classes, config.slots, config.prototypes, in_depth, depth, rng);
  model.epsilon = config.epsilon;
  model.focal = config.focal;
  model.slots.variant = config.gumbel;
  model.slots.tau = temperature(1, config.schedule);
  return model;
}

namespace {

void adam_update(Tensor& param, AdamState& state, double lr, double weight_decay, const Schedule& s) {
  if (!param.grad) return;
  std::vector<double>& grad = *param.grad;
  if (state.m.empty()) {
    state.m.assign(param.numel(), 0.0);
    state.v.assign(param.numel(), 0.0);
  }
  ++state.steps;
  const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(state.steps));
  const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(state.steps));
  for (std::size_t i = 0; i < param.numel(); ++i) {
    const double g = grad[i] + weight_decay * param[i];
    state.m[i] = s.beta1 * state.m[i] + (1.0 - s.beta1) * g;
    state.v[i] = s.beta2 * state.v[i] + (1.0 - s.beta2) * g * g;
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    param[i] -= lr * m_hat / (std::sqrt(v_hat) + s.adam_eps);
  }
  param.zero_grad();
}

struct PhaseSetup {
  const char* name = "";
  Mode mode = Mode::train;
  bool train_addon = false;
  bool train_pool = false;
  bool train_head = false;
  double lr_addon = 0.0;
  double lr_pool = 0.0;
  double lr_head = 0.0;
  double weight_decay = 0.0;
};

struct Optimizers {
  AdamState addon_weight, addon_bias, prototypes, logits, head;
};

class Trainer {
 public:
  Trainer(const FeatureMapDataset& train_set, const FeatureMapDataset& val_set, const TrainConfig& config,
          const ProtoPoolModel* initial)
      : train_(train_set), val_(val_set), config_(config), rng_(config.seed), initial_(initial) {}

  TrainResult run();

 private:
  EpochMetrics run_epoch(std::size_t epoch, const PhaseSetup& phase);
  void set_trainable(const PhaseSetup& phase);
  void record(EpochMetrics m) { result_.log.push_back(std::move(m)); }
  TrainResult snapshot() const;

  const FeatureMapDataset& train_;
  const FeatureMapDataset& val_;
  TrainConfig config_;
  Rng rng_;
  TrainResult result_;
  Optimizers opt_;
  const ProtoPoolModel* initial_ = nullptr;
};

void Trainer::set_trainable(const PhaseSetup& phase) {
  ProtoPoolModel& m = result_.model;
  m.addon.weight.requires_grad = phase.train_addon;
  m.addon.bias.requires_grad = phase.train_addon;
  m.pool.prototypes.requires_grad = phase.train_pool;
  m.slots.logits.requires_grad = phase.train_pool;
  m.head.weights.requires_grad = phase.train_head;
}

TrainResult Trainer::snapshot() const {
  TrainResult copy = result_;
  std::ostringstream os;
  Rng r = rng_;
  os << r;
  copy.rng_state = os.str();
  return copy;
}

EpochMetrics Trainer::run_epoch(std::size_t epoch, const PhaseSetup& phase) {
  ProtoPoolModel& model = result_.model;
  set_trainable(phase);
  std::vector<std::size_t> order = iota_indices(train_.size());
  std::shuffle(order.begin(), order.end(), rng_);

  const Schedule& s = config_.schedule;
  const bool use_noise = phase.mode == Mode::train && model.slots.noise_enabled &&
                         model.slots.variant != GumbelVariant::off;
  EpochMetrics metrics;
  metrics.epoch = epoch;
  metrics.phase = phase.name;
  metrics.tau = model.slots.tau;
  std::size_t correct = 0, batches = 0;

  for (std::size_t begin = 0; begin < order.size(); begin += s.batch_size) {
    const std::size_t end = std::min(order.size(), begin + s.batch_size);
    const std::span<const std::size_t> batch(order.data() + begin, end - begin);
    const Tensor features = train_.batch_features(batch);
    const auto labels = train_.labels(batch);
    Tensor noise;
    if (use_noise) noise = draw_slot_noise(model.slots, rng_);

    LossBreakdown values;
    {
      Graph g;
      BoundModel bound = bind(g, model);
      ForwardOutput out;
      LossTerms terms;
      try {
        out = forward(g, bound, model, features, batch.size(), phase.mode, use_noise ? &noise : nullptr);
        terms = build_loss(g, out, bound, model, labels, config_.weights, config_.orth);
      } catch (const DomainError& e) {
        throw TrainingDiverged(std::string("non-finite loss at epoch ") + std::to_string(epoch) + ": " + e.what(),
                               snapshot());
      }
      values = terms.values();
      for (double v : {values.total, values.ce, values.clst, values.sep, values.orth, values.l1}) {
        if (!std::isfinite(v)) {
          throw TrainingDiverged("non-finite loss component at epoch " + std::to_string(epoch), snapshot());
        }
      }
      const Tensor& logits = out.logits.value();
      for (std::size_t b = 0; b < batch.size(); ++b) correct += row_argmax(logits, b) == labels[b] ? 1 : 0;
      g.backward(terms.total);
    }

    if (phase.train_addon) {
      adam_update(model.addon.weight, opt_.addon_weight, phase.lr_addon, phase.weight_decay, s);
      adam_update(model.addon.bias, opt_.addon_bias, phase.lr_addon, phase.weight_decay, s);
    }
    if (phase.train_pool) {
      adam_update(model.pool.prototypes, opt_.prototypes, phase.lr_pool, phase.weight_decay, s);
      adam_update(model.slots.logits, opt_.logits, phase.lr_pool, phase.weight_decay, s);
    }
    if (phase.train_head) adam_update(model.head.weights, opt_.head, phase.lr_head, phase.weight_decay, s);

    metrics.loss.total += values.total;
    metrics.loss.ce += values.ce;
    metrics.loss.clst += values.clst;
    metrics.loss.sep += values.sep;
    metrics.loss.orth += values.orth;
    metrics.loss.l1 += values.l1;
    ++batches;
  }
  set_trainable(PhaseSetup{});

  if (batches > 0) {
    const double n = static_cast<double>(batches);
    metrics.loss.total /= n;
    metrics.loss.ce /= n;
    metrics.loss.clst /= n;
    metrics.loss.sep /= n;
    metrics.loss.orth /= n;
    metrics.loss.l1 /= n;
  }
  metrics.train_acc = train_.size() ? static_cast<double>(correct) / static_cast<double>(train_.size()) : 0.0;
  metrics.max_q_median = max_q_median(model.slots);
  return metrics;
}

TrainResult Trainer::run() {
  config_.validate();
  train_.validate();
  if (train_.size() == 0) throw DataError("training set is empty");
  const std::size_t classes = train_.num_classes();
  if (val_.size() > 0 && (val_.depth != train_.depth || val_.locations() != train_.locations())) {
    throw DataError("validation set shape differs from training set");
  }
  if (val_.num_classes() > classes) throw DataError("validation labels exceed training classes");

  result_.model = initial_model(config_, classes, train_.depth, rng_);
  if (initial_) {
    initial_->check_consistent();
    if (initial_->classes() != classes || initial_->addon.in_depth() != train_.depth) {
      throw ParameterError("initial model does not match the training set");
    }
    result_.model = *initial_;
  }
  const Schedule& s = config_.schedule;
  if (s.epochs == 0) return snapshot();

  auto finish_epoch = [&](EpochMetrics m) {
    m.val_acc = evaluate(result_.model, val_, s.batch_size).accuracy;
    record(std::move(m));
  };

  std::size_t epoch = 0;
  result_.phase = "warmup";
  const PhaseSetup warmup{"warmup", Mode::train, !s.freeze_addon_warmup, true, false,
                          s.lr_addon, s.lr_pool, 0.0, 0.0};
  for (std::size_t e = 0; e < s.warmup_epochs && epoch < s.epochs; ++e) {
    ++epoch;
    result_.model.slots.tau = temperature(epoch, s);
    finish_epoch(run_epoch(epoch, warmup));
  }

  result_.phase = "joint";
  double best_ce = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  for (std::size_t joint_epoch = 1; epoch < s.epochs; ++joint_epoch) {
    ++epoch;
    result_.model.slots.tau = temperature(epoch, s);
    const PhaseSetup joint{"joint",
                           Mode::train,
                           true,
                           true,
                           false,
                           joint_learning_rate(s.lr_addon, joint_epoch, s),
                           joint_learning_rate(s.lr_pool, joint_epoch, s),
                           0.0,
                           s.weight_decay};
    EpochMetrics m = run_epoch(epoch, joint);
    const EvalResult val = evaluate(result_.model, val_, s.batch_size);
    m.val_acc = val.accuracy;
    record(std::move(m));
    const double monitored = val_.size() ? val.cross_entropy : result_.log.back().loss.ce;
    if (monitored < best_ce) {
      best_ce = monitored;
      stale = 0;
    } else if (++stale >= s.patience) {
      break;
    }
  }
  result_.epochs_run = epoch;

  result_.pre_projection_val_acc = evaluate(result_.model, val_, s.batch_size).accuracy;
  result_.converged = result_.model;
  result_.projection = project_prototypes(result_.model, train_);
  result_.phase = "projected";
  {
    EpochMetrics m;
    m.epoch = epoch;
    m.phase = "project";
    m.tau = result_.model.slots.tau;
    const auto all = iota_indices(train_.size());
    m.loss = total_loss(train_, all, result_.model, config_.weights, Mode::eval, nullptr, config_.orth);
    m.train_acc = evaluate(result_.model, train_, s.batch_size).accuracy;
    m.max_q_median = max_q_median(result_.model.slots);
    finish_epoch(std::move(m));
  }
  result_.post_projection_val_acc = result_.log.back().val_acc;

  result_.phase = "finetune";
  const PhaseSetup finetune{"finetune", Mode::eval, false, false, true, 0.0, 0.0, s.lr_finetune, 0.0};
  for (std::size_t e = 0; e < s.finetune_epochs; ++e) finish_epoch(run_epoch(epoch + e + 1, finetune));

  result_.phase = "done";
  result_.final_val_acc = evaluate(result_.model, val_, s.batch_size).accuracy;
  return snapshot();
}

}  // namespace

TrainResult train(const FeatureMapDataset& train_set, const FeatureMapDataset& val_set, const TrainConfig& config,
                  const ProtoPoolModel* initial) {
  return Trainer(train_set, val_set, config, initial).run();
}

}  // namespace protopool::train
