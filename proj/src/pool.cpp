#include "protopool/pool.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "protopool/errors.hpp"

namespace protopool {

std::string_view to_string(GumbelVariant v) {
  switch (v) {
    case GumbelVariant::classic: return "classic";
    case GumbelVariant::paper: return "paper";
    case GumbelVariant::off: return "off";
  }
  return "?";
}

GumbelVariant parse_gumbel_variant(std::string_view text) {
  if (text == "classic") return GumbelVariant::classic;
  if (text == "paper") return GumbelVariant::paper;
  if (text == "off") return GumbelVariant::off;
  throw ParameterError("unknown gumbel variant '" + std::string(text) + "'");
}

namespace {

Tensor xavier_normal(Shape shape, double fan_in, double fan_out, Rng& rng) {
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / (fan_in + fan_out)));
  Tensor t(std::move(shape));
  for (double& x : t.data()) x = normal(rng);
  return t;
}

Tensor softmax_rows(const Tensor& scores) {
  const std::size_t rows = scores.dim(0), cols = scores.dim(1);
  Tensor out(scores.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* s = scores.data().data() + r * cols;
    const double hi = *std::max_element(s, s + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(s[c] - hi);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = std::exp(s[c] - hi) / z;
  }
  return out;
}

void check_tau(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ParameterError("temperature must be positive and finite");
}

}  // namespace

std::span<const double> PrototypePool::prototype(std::size_t m) const {
  if (m >= size()) throw ShapeError("prototype id " + std::to_string(m) + " out of range");
  return prototypes.data().subspan(m * depth(), depth());
}

PrototypePool PrototypePool::xavier(std::size_t m, std::size_t d, Rng& rng) {
  // Same fans as an M x D x 1 x 1 convolution kernel.
  return PrototypePool{xavier_normal(Shape{m, d}, static_cast<double>(d), static_cast<double>(m), rng)};
}

Tensor SlotBank::relaxed() const {
  if (variant == GumbelVariant::off) return softmax_rows(logits);
  check_tau(tau);
  Tensor scaled = logits;
  for (double& x : scaled.data()) x /= tau;
  return softmax_rows(scaled);
}

Tensor SlotBank::hardened() const {
  Tensor out(logits.shape(), 0.0);
  const std::size_t m = pool_size();
  for (std::size_t r = 0; r < rows(); ++r) {
    out[r * m + argmax(logits.data().subspan(r * m, m))] = 1.0;
  }
  return out;
}

std::vector<std::size_t> SlotBank::assignment() const {
  std::vector<std::size_t> out(rows());
  const std::size_t m = pool_size();
  for (std::size_t r = 0; r < rows(); ++r) out[r] = argmax(logits.data().subspan(r * m, m));
  return out;
}

SlotBank SlotBank::uniform(std::size_t classes, std::size_t slots, std::size_t pool_size) {
  SlotBank bank;
  bank.classes = classes;
  bank.slots = slots;
  bank.logits = Tensor(Shape{classes * slots, pool_size}, 0.0);
  return bank;
}

ClassifierHead ClassifierHead::block_init(std::size_t classes, std::size_t slots) {
  ClassifierHead head{classes, slots, Tensor(Shape{classes * slots, classes}, 0.0)};
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t k = 0; k < slots; ++k) head.weights.at(c * slots + k, c) = 1.0;
  }
  return head;
}

Tensor ClassifierHead::off_block_mask() const {
  Tensor mask(weights.shape(), 1.0);
  for (std::size_t r = 0; r < classes * slots; ++r) mask.at(r, r / slots) = 0.0;
  return mask;
}

AddOn AddOn::xavier(std::size_t in_depth, std::size_t out_depth, Rng& rng) {
  return AddOn{xavier_normal(Shape{in_depth, out_depth}, static_cast<double>(in_depth),
                             static_cast<double>(out_depth), rng),
               Tensor(Shape{1, out_depth}, 0.0)};
}

void ProtoPoolModel::check_consistent() const {
  const std::size_t c = slots.classes, k = slots.slots;
  if (c == 0 || k == 0) throw ShapeError("model needs at least one class and one slot");
  if (slots.logits.shape() != Shape{c * k, pool.size()}) throw ShapeError("slot logits do not match C*K x M");
  if (head.classes != c || head.slots != k || head.weights.shape() != Shape{c * k, c}) {
    throw ShapeError("classifier head does not match C*K x C");
  }
  if (addon.out_depth() != pool.depth() || addon.bias.shape() != Shape{1, pool.depth()}) {
    throw ShapeError("add-on output depth does not match prototype depth");
  }
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw ParameterError("epsilon must lie in (0, 1)");
}

ProtoPoolModel make_model(std::size_t classes, std::size_t slots, std::size_t pool_size,
                          std::size_t in_depth, std::size_t depth, Rng& rng) {
  if (classes == 0 || pool_size == 0 || depth == 0 || in_depth == 0) {
    throw ParameterError("model dimensions must be positive");
  }
  if (slots == 0 || slots > kMaxSlotsPerClass) {
    throw ParameterError("slots per class must lie in [1, " + std::to_string(kMaxSlotsPerClass) + "]");
  }
  ProtoPoolModel model;
  model.addon = AddOn::xavier(in_depth, depth, rng);
  model.pool = PrototypePool::xavier(pool_size, depth, rng);
  model.slots = SlotBank::uniform(classes, slots, pool_size);
  model.head = ClassifierHead::block_init(classes, slots);
  return model;
}

// ---------------------------------------------------------------------------

double gumbel_from_uniform(double u) {
  u = std::clamp(u, 1e-12, 1.0 - 1e-12);
  return -std::log(-std::log(u));
}

std::vector<double> gumbel_noise(Rng& rng, std::size_t n) {
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<double> eta(n);
  for (double& x : eta) x = gumbel_from_uniform(uniform(rng));
  return eta;
}

std::vector<double> gumbel_softmax(std::span<const double> q, double tau, std::span<const double> eta,
                                   GumbelVariant variant) {
  Graph g;
  Var logits = g.constant(Tensor(Shape{1, q.size()}, std::vector<double>(q.begin(), q.end())));
  if (variant == GumbelVariant::off) return gumbel_softmax(logits, tau, nullptr, variant).value().values();
  if (eta.size() != q.size()) throw ShapeError("gumbel_softmax: noise length differs from logits");
  const Tensor noise(Shape{1, eta.size()}, std::vector<double>(eta.begin(), eta.end()));
  return gumbel_softmax(logits, tau, &noise, variant).value().values();
}

std::size_t argmax(std::span<const double> values) {
  if (values.empty()) throw ShapeError("argmax of empty range");
  return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

std::vector<double> harden(std::span<const double> q_logits) {
  std::vector<double> out(q_logits.size(), 0.0);
  out[argmax(q_logits)] = 1.0;
  return out;
}

namespace {

Var latent_var(Graph& g, const FeatureMap& z) {
  if (z.z.rank() != 2 || z.z.dim(0) != z.locations()) {
    throw ShapeError("feature map must be (H*W) x D");
  }
  return g.constant(z.z);
}

Var pool_var(Graph& g, const PrototypePool& pool) { return g.constant(pool.prototypes); }

}  // namespace

double focal_similarity(const FeatureMap& z, std::span<const double> p, double epsilon) {
  Graph g;
  Var proto = g.constant(Tensor(Shape{1, p.size()}, std::vector<double>(p.begin(), p.end())));
  return prototype_scores(latent_var(g, z), proto, 1, epsilon, true).item();
}

double slot_similarity(const FeatureMap& z, std::span<const double> q, const PrototypePool& pool,
                       double epsilon) {
  if (q.size() != pool.size()) throw ShapeError("slot distribution length differs from pool size");
  Graph g;
  Var scores = prototype_scores(latent_var(g, z), pool_var(g, pool), 1, epsilon, true);
  Var dist = g.constant(Tensor(Shape{1, q.size()}, std::vector<double>(q.begin(), q.end())));
  return slot_similarity(scores, dist).item();
}

Tensor activation_map(const FeatureMap& z, std::span<const double> p, double epsilon) {
  Graph g;
  Var proto = g.constant(Tensor::vector(std::vector<double>(p.begin(), p.end())));
  Var sim = base_similarity(ad::sq_dist_map(latent_var(g, z), proto), epsilon);
  return sim.value().reshaped(Shape{z.height, z.width});
}

double orthogonality_loss(const Tensor& distributions, std::size_t classes, std::size_t slots) {
  Graph g;
  return orthogonality_loss(g.constant(distributions), classes, slots).item();
}

std::vector<double> forward(const FeatureMap& z, const SlotBank& slots, const PrototypePool& pool,
                            const ClassifierHead& head, Mode mode, Rng* rng, double epsilon, bool focal) {
  if (head.weights.shape() != Shape{slots.rows(), slots.classes}) throw ShapeError("head does not match slots");
  if (slots.pool_size() != pool.size()) throw ShapeError("slot bank does not match pool size");
  if (z.depth() != pool.depth()) throw ShapeError("feature depth differs from prototype depth");
  Graph g;
  Tensor noise;
  const Tensor* noise_ptr = nullptr;
  if (mode == Mode::train && slots.noise_enabled && slots.variant != GumbelVariant::off) {
    if (rng == nullptr) throw ParameterError("train-mode forward with noise needs an rng");
    noise = draw_slot_noise(slots, *rng);
    noise_ptr = &noise;
  }
  Var scores = prototype_scores(latent_var(g, z), pool_var(g, pool), 1, epsilon, focal);
  Var dist = slot_distributions(g, g.constant(slots.logits), slots, mode, noise_ptr);
  Var logits = ad::matmul(slot_similarity(scores, dist), g.constant(head.weights));
  return logits.value().values();
}

// ---------------------------------------------------------------------------

Var base_similarity(Var dist2, double epsilon) {
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw ParameterError("epsilon must lie in (0, 1)");
  return ad::log(ad::add_scalar(dist2, 1.0)) - ad::log(ad::add_scalar(dist2, epsilon));
}

Var prototype_scores(Var latent, Var prototypes, std::size_t batch, double epsilon, bool focal) {
  const std::size_t rows = latent.value().dim(0);
  if (batch == 0 || rows % batch != 0) throw ShapeError("latent rows are not a multiple of the batch size");
  const std::size_t locations = rows / batch;
  const std::size_t m = prototypes.value().dim(0);
  Var sim = base_similarity(ad::sq_dist_matrix(latent, prototypes), epsilon);
  Var per_image = ad::reshape(sim, Shape{batch, locations, m});
  Var peak = ad::reduce(ad::Reduce::max, per_image, 1);
  if (!focal) return peak;
  return peak - ad::reduce(ad::Reduce::mean, per_image, 1);
}

Var gumbel_softmax(Var logits, double tau, const Tensor* noise, GumbelVariant variant) {
  Graph& g = *logits.graph;
  if (variant == GumbelVariant::off) return ad::softmax(logits, 1);
  check_tau(tau);
  if (noise == nullptr) return ad::softmax(ad::scale(logits, 1.0 / tau), 1);
  Var eta = g.constant(*noise);
  if (variant == GumbelVariant::classic) return ad::softmax(ad::scale(logits + eta, 1.0 / tau), 1);
  return ad::softmax(ad::scale(logits, 1.0 / tau) + eta, 1);
}

Var slot_distributions(Graph& g, Var logits, const SlotBank& slots, Mode mode, const Tensor* noise) {
  if (mode == Mode::eval) return g.constant(slots.hardened());
  return gumbel_softmax(logits, slots.tau, slots.noise_enabled ? noise : nullptr, slots.variant);
}

Var slot_similarity(Var scores, Var distributions) {
  return ad::matmul(scores, ad::transpose(distributions));
}

Var orthogonality_loss(Var distributions, std::size_t classes, std::size_t slots) {
  Graph& g = *distributions.graph;
  const Tensor& d = distributions.value();
  if (d.rank() != 2 || d.dim(0) != classes * slots) throw ShapeError("orthogonality: expected (C*K) x M");
  if (slots < 2) return g.constant(Tensor::scalar(0.0));
  Tensor upper(Shape{slots, slots}, 0.0);
  for (std::size_t i = 0; i < slots; ++i) {
    for (std::size_t j = i + 1; j < slots; ++j) upper.at(i, j) = 1.0;
  }
  Var mask = g.constant(std::move(upper));
  Var unit = ad::normalize_rows(distributions);
  Var total;
  for (std::size_t c = 0; c < classes; ++c) {
    Var block = ad::slice_rows(unit, c * slots, slots);
    Var cosines = ad::sum(ad::matmul(block, ad::transpose(block)) * mask);
    total = c == 0 ? cosines : total + cosines;
  }
  return ad::scale(total, 1.0 / static_cast<double>(classes * slots));
}

BoundModel bind(Graph& g, ProtoPoolModel& model) {
  return BoundModel{g.parameter(model.addon.weight), g.parameter(model.addon.bias),
                    g.parameter(model.pool.prototypes), g.parameter(model.slots.logits),
                    g.parameter(model.head.weights)};
}

ForwardOutput forward(Graph& g, const BoundModel& bound, const ProtoPoolModel& model,
                      const Tensor& features, std::size_t batch, Mode mode, const Tensor* noise) {
  model.check_consistent();
  if (features.rank() != 2 || features.dim(1) != model.addon.in_depth()) {
    throw ShapeError("features must be (B*HW) x D_in, got " + ad::shape_string(features.shape()));
  }
  ForwardOutput out;
  const std::size_t rows = features.dim(0);
  Var ones = g.constant(Tensor(Shape{rows, 1}, 1.0));
  out.latent = ad::matmul(g.constant(features), bound.addon_weight) + ad::matmul(ones, bound.addon_bias);
  out.scores = prototype_scores(out.latent, bound.prototypes, batch, model.epsilon, model.focal);
  out.distributions = slot_distributions(g, bound.logits, model.slots, mode, noise);
  out.slot_scores = slot_similarity(out.scores, out.distributions);
  out.logits = ad::matmul(out.slot_scores, bound.head);
  return out;
}

Tensor draw_slot_noise(const SlotBank& slots, Rng& rng) {
  return Tensor(slots.logits.shape(), gumbel_noise(rng, slots.logits.numel()));
}

}  // namespace protopool
