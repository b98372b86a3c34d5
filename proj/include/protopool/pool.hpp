#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "protopool/graph.hpp"
#include "protopool/tensor.hpp"

namespace protopool {

using ad::Graph;
using ad::Shape;
using ad::Tensor;
using ad::Var;

using Rng = std::mt19937_64;

inline constexpr double kDefaultEpsilon = 1e-4;
inline constexpr std::size_t kMaxSlotsPerClass = 10;

/// How slot logits become a distribution over the pool.
///   classic: softmax((q + eta) / tau)
///   paper:   softmax(q / tau + eta)   (noise does not scale with 1/tau)
///   off:     softmax(q), no noise and no temperature
enum class GumbelVariant { classic, paper, off };

std::string_view to_string(GumbelVariant v);
GumbelVariant parse_gumbel_variant(std::string_view text);

enum class Mode { train, eval };

/// One image as H*W location vectors of depth D (rows of `z`).
struct FeatureMap {
  std::size_t height = 1;
  std::size_t width = 1;
  Tensor z;  // (H*W) x D

  std::size_t locations() const { return height * width; }
  std::size_t depth() const { return z.dim(1); }
};

struct PrototypePool {
  Tensor prototypes;  // M x D

  std::size_t size() const { return prototypes.dim(0); }
  std::size_t depth() const { return prototypes.dim(1); }
  std::span<const double> prototype(std::size_t m) const;

  static PrototypePool xavier(std::size_t m, std::size_t d, Rng& rng);
};

/// Per-class, per-slot logits over the pool. Row c*K + k is slot k of class c.
struct SlotBank {
  std::size_t classes = 0;
  std::size_t slots = 0;
  Tensor logits;  // (C*K) x M
  double tau = 1.0;
  bool noise_enabled = true;
  GumbelVariant variant = GumbelVariant::paper;

  std::size_t rows() const { return classes * slots; }
  std::size_t pool_size() const { return logits.dim(1); }

  /// Noise-free relaxed distributions at the current temperature.
  Tensor relaxed() const;
  /// One-hot rows at each slot's logit argmax.
  Tensor hardened() const;
  /// Argmax prototype of every slot, row-major over (class, slot).
  std::vector<std::size_t> assignment() const;

  /// All-zero logits: every slot starts as the uniform distribution 1/M.
  static SlotBank uniform(std::size_t classes, std::size_t slots, std::size_t pool_size);
};

/// Fully connected layer from the C*K slot scores to C class logits.
struct ClassifierHead {
  std::size_t classes = 0;
  std::size_t slots = 0;
  Tensor weights;  // (C*K) x C

  /// 1 on every (class c slot, class c) connection, 0 elsewhere.
  static ClassifierHead block_init(std::size_t classes, std::size_t slots);
  /// 1 on entries outside the class-own blocks, 0 inside.
  Tensor off_block_mask() const;
};

/// Trainable 1x1 convolution applied to every location: z' = z W + b.
struct AddOn {
  Tensor weight;  // D_in x D
  Tensor bias;    // 1 x D

  std::size_t in_depth() const { return weight.dim(0); }
  std::size_t out_depth() const { return weight.dim(1); }

  static AddOn xavier(std::size_t in_depth, std::size_t out_depth, Rng& rng);
};

struct ProtoPoolModel {
  AddOn addon;
  PrototypePool pool;
  SlotBank slots;
  ClassifierHead head;
  double epsilon = kDefaultEpsilon;
  /// False replaces max-minus-mean pooling with plain max pooling.
  bool focal = true;

  std::size_t classes() const { return slots.classes; }
  std::size_t slots_per_class() const { return slots.slots; }

  void check_consistent() const;
};

/// Checks C, K, M, D and returns a freshly initialized model.
ProtoPoolModel make_model(std::size_t classes, std::size_t slots, std::size_t pool_size,
                          std::size_t in_depth, std::size_t depth, Rng& rng);

// ---------------------------------------------------------------------------
// Scalar building blocks (value API)

/// -log(-log(u)) with u clamped to (1e-12, 1 - 1e-12).
double gumbel_from_uniform(double u);
std::vector<double> gumbel_noise(Rng& rng, std::size_t n);

std::vector<double> gumbel_softmax(std::span<const double> q, double tau, std::span<const double> eta,
                                   GumbelVariant variant);

/// First index of the maximum.
std::size_t argmax(std::span<const double> values);
std::vector<double> harden(std::span<const double> q_logits);

double focal_similarity(const FeatureMap& z, std::span<const double> p, double epsilon = kDefaultEpsilon);
/// Expected focal similarity under slot distribution q.
double slot_similarity(const FeatureMap& z, std::span<const double> q, const PrototypePool& pool,
                       double epsilon = kDefaultEpsilon);
/// Per-location base similarity reshaped to H x W.
Tensor activation_map(const FeatureMap& z, std::span<const double> p, double epsilon = kDefaultEpsilon);

/// Sum over classes of the pairwise within-class cosines, divided by C*K.
/// `distributions` is (C*K) x M.
double orthogonality_loss(const Tensor& distributions, std::size_t classes, std::size_t slots);

/// Class logits for one latent feature map (no add-on). Train mode draws
/// fresh noise from `rng` when the bank has noise enabled.
std::vector<double> forward(const FeatureMap& z, const SlotBank& slots, const PrototypePool& pool,
                            const ClassifierHead& head, Mode mode, Rng* rng = nullptr,
                            double epsilon = kDefaultEpsilon, bool focal = true);

// ---------------------------------------------------------------------------
// Graph API

/// log((d + 1) / (d + eps)), elementwise.
Var base_similarity(Var dist2, double epsilon);

/// Per-image similarity to each prototype: [B x M]. `latent` stacks B images
/// of `locations` rows each.
Var prototype_scores(Var latent, Var prototypes, std::size_t batch, double epsilon, bool focal);

/// Relaxed slot distributions. `noise` may be null (noise-free relaxation).
Var gumbel_softmax(Var logits, double tau, const Tensor* noise, GumbelVariant variant);

/// Distributions used by a forward pass in the given mode.
Var slot_distributions(Graph& g, Var logits, const SlotBank& slots, Mode mode, const Tensor* noise);

/// scores [B x M] x distributions [R x M]^T -> [B x R].
Var slot_similarity(Var scores, Var distributions);

Var orthogonality_loss(Var distributions, std::size_t classes, std::size_t slots);

struct BoundModel {
  Var addon_weight;
  Var addon_bias;
  Var prototypes;
  Var logits;
  Var head;
};

/// Parameters enter as graph parameters; tensors with requires_grad receive
/// gradients on backward().
BoundModel bind(Graph& g, ProtoPoolModel& model);

struct ForwardOutput {
  Var latent;         // (B*HW) x D
  Var scores;         // B x M
  Var distributions;  // (C*K) x M
  Var slot_scores;    // B x (C*K)
  Var logits;         // B x C
};

/// `features` stacks B images of HW rows with the add-on's input depth.
ForwardOutput forward(Graph& g, const BoundModel& bound, const ProtoPoolModel& model,
                      const Tensor& features, std::size_t batch, Mode mode, const Tensor* noise);

/// Gumbel noise tensor matching the slot logits.
Tensor draw_slot_noise(const SlotBank& slots, Rng& rng);

}  // namespace protopool
