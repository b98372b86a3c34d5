#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "protopool/errors.hpp"
#include "protopool/pool.hpp"

using namespace protopool;

namespace {

constexpr double kEps = 1e-4;

FeatureMap random_map(std::size_t h, std::size_t w, std::size_t d, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  FeatureMap z{h, w, Tensor(Shape{h * w, d})};
  for (double& x : z.z.data()) x = n(rng);
  return z;
}

std::vector<double> random_vec(std::size_t n, Rng& rng, double lo = -3.0, double hi = 3.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

// Independent recomputation of g on the test side.
double g_oracle(double dist2) { return std::log((dist2 + 1.0) / (dist2 + kEps)); }

double focal_oracle(const FeatureMap& z, std::span<const double> p) {
  double mx = -INFINITY, total = 0.0;
  for (std::size_t i = 0; i < z.locations(); ++i) {
    double d2 = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) d2 += (z.z.at(i, j) - p[j]) * (z.z.at(i, j) - p[j]);
    const double g = g_oracle(d2);
    mx = std::max(mx, g);
    total += g;
  }
  return mx - total / static_cast<double>(z.locations());
}

}  // namespace

TEST_CASE("gumbel noise examples") {
  CHECK(std::abs(gumbel_from_uniform(1.0 / std::exp(1.0))) < 1e-15);
  CHECK(gumbel_from_uniform(std::exp(-std::exp(1.0))) == doctest::Approx(-1.0).epsilon(1e-14));
  // clamping keeps the extremes finite
  CHECK(std::isfinite(gumbel_from_uniform(0.0)));
  CHECK(std::isfinite(gumbel_from_uniform(1.0)));

  Rng rng(1);
  const auto eta = gumbel_noise(rng, 1'000'000);
  const double mean = std::accumulate(eta.begin(), eta.end(), 0.0) / static_cast<double>(eta.size());
  CHECK(std::abs(mean - 0.5772156649) < 0.01);
}

TEST_CASE("gumbel_softmax examples") {
  const std::vector<double> zero(3, 0.0), flat{0.7, 0.7, 0.7};
  for (double tau : {0.01, 0.5, 3.0}) {
    for (auto v : {GumbelVariant::classic, GumbelVariant::paper}) {
      for (double y : gumbel_softmax(flat, tau, zero, v)) CHECK(y == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
    }
  }
  const auto sharp = gumbel_softmax(std::vector<double>{2, 1, 0}, 0.01, zero, GumbelVariant::paper);
  CHECK(std::abs(sharp[0] - 1.0) < 1e-3);
  CHECK(sharp[1] < 1e-3);
  CHECK(sharp[2] < 1e-3);

  const auto classic = gumbel_softmax(std::vector<double>{1, 0}, 0.5, std::vector<double>{0, 0.5}, GumbelVariant::classic);
  CHECK(classic[0] == doctest::Approx(0.7310585786300049).epsilon(1e-12));
  CHECK(classic[1] == doctest::Approx(0.2689414213699951).epsilon(1e-12));

  const auto paper = gumbel_softmax(std::vector<double>{1, 0}, 0.5, std::vector<double>{0, 0.5}, GumbelVariant::paper);
  // softmax([2, 0.5])
  CHECK(paper[0] == doctest::Approx(0.8175744761936438).epsilon(1e-12));

  CHECK_THROWS_AS(gumbel_softmax(flat, 0.0, zero, GumbelVariant::paper), ParameterError);
  CHECK_THROWS_AS(gumbel_softmax(flat, -1.0, zero, GumbelVariant::classic), ParameterError);
}

TEST_CASE("gumbel_softmax stays on the simplex") {
  Rng rng(17);
  std::uniform_real_distribution<double> logtau(-8.0, 6.0);
  for (int trial = 0; trial < 500; ++trial) {
    const auto q = random_vec(6, rng, -50, 50);
    const auto eta = gumbel_noise(rng, 6);
    const double tau = std::exp(logtau(rng));
    for (auto v : {GumbelVariant::classic, GumbelVariant::paper}) {
      const auto y = gumbel_softmax(q, tau, eta, v);
      double s = 0.0;
      for (double x : y) {
        CHECK(x >= 0.0);
        s += x;
      }
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("gumbel_softmax shift invariance per variant") {
  Rng rng(23);
  for (int trial = 0; trial < 200; ++trial) {
    const auto q = random_vec(5, rng);
    const auto eta = gumbel_noise(rng, 5);
    const double tau = std::uniform_real_distribution<double>(0.05, 2.0)(rng);
    const double c = std::uniform_real_distribution<double>(-5, 5)(rng);

    auto shifted = q;
    for (double& x : shifted) x += c;
    const auto a = gumbel_softmax(q, tau, eta, GumbelVariant::classic);
    const auto b = gumbel_softmax(shifted, tau, eta, GumbelVariant::classic);
    for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(a[i] - b[i]) < 1e-12);

    auto scaled_shift = q;
    for (double& x : scaled_shift) x += c * tau;
    const auto p = gumbel_softmax(q, tau, eta, GumbelVariant::paper);
    const auto r = gumbel_softmax(scaled_shift, tau, eta, GumbelVariant::paper);
    for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(p[i] - r[i]) < 1e-12);
  }
}

TEST_CASE("lower temperature concentrates mass on the score argmax") {
  // As tau -> 0 the classic score ranks by q + eta and the paper score by q.
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const auto q = random_vec(8, rng);
    const auto eta = gumbel_noise(rng, 8);
    for (auto v : {GumbelVariant::classic, GumbelVariant::paper}) {
      std::vector<double> limit(8);
      for (std::size_t i = 0; i < 8; ++i) limit[i] = v == GumbelVariant::classic ? q[i] + eta[i] : q[i];
      const std::size_t target = argmax(limit);
      double prev = 0.0;
      for (double tau : {1.0, 0.1, 0.01, 0.001}) {
        std::vector<double> score(8);
        for (std::size_t i = 0; i < 8; ++i) {
          score[i] = v == GumbelVariant::classic ? (q[i] + eta[i]) / tau : q[i] / tau + eta[i];
        }
        const auto y = gumbel_softmax(q, tau, eta, v);
        CHECK(argmax(y) == argmax(score));
        CHECK(y[target] >= prev - 1e-15);
        prev = y[target];
      }
    }
  }
}

TEST_CASE("off variant is plain softmax") {
  const std::vector<double> q{1.0, 0.0};
  const auto y = gumbel_softmax(q, 0.01, std::vector<double>{5.0, 0.0}, GumbelVariant::off);
  CHECK(y[0] == doctest::Approx(0.7310585786300049).epsilon(1e-12));
}

TEST_CASE("base similarity examples") {
  Graph g;
  const auto v = base_similarity(g.constant(Tensor::vector({0.0, 1.0, 1e12})), kEps).value();
  CHECK(v[0] == doctest::Approx(9.210340371976184).epsilon(1e-14));
  CHECK(v[1] == doctest::Approx(0.693047185559612).epsilon(1e-13));
  CHECK(v[2] > 0.0);
  CHECK(v[2] < 1e-11);

  // strictly decreasing in the squared distance
  Graph h;
  const auto dec = base_similarity(h.constant(Tensor::vector({0.0, 0.1, 0.5, 2.0, 10.0})), kEps).value();
  for (std::size_t i = 1; i < dec.numel(); ++i) CHECK(dec[i] < dec[i - 1]);
}

TEST_CASE("focal similarity examples") {
  Rng rng(4);
  FeatureMap constant{2, 2, Tensor(Shape{4, 3}, 0.25)};
  const auto p = random_vec(3, rng);
  CHECK(focal_similarity(constant, p) == 0.0);

  const FeatureMap single = random_map(1, 1, 3, rng);
  CHECK(focal_similarity(single, p) == 0.0);

  // One-dimensional map with per-location g values {9.2103, 0.1, 0.1, 0.1}:
  // invert g to get the distances.
  auto dist_for = [](double g) { return std::sqrt((1.0 - kEps * std::exp(g)) / (std::exp(g) - 1.0)); };
  FeatureMap z{2, 2, Tensor(Shape{4, 1})};
  z.z[0] = dist_for(9.2103);
  for (std::size_t i = 1; i < 4; ++i) z.z[i] = dist_for(0.1);
  CHECK(focal_similarity(z, std::vector<double>{0.0}) == doctest::Approx(6.832725).epsilon(1e-9));
}

TEST_CASE("focal similarity properties") {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const FeatureMap z = random_map(3, 4, 5, rng);
    const auto p = random_vec(5, rng, -1, 1);
    const double f = focal_similarity(z, p);
    CHECK(f >= 0.0);
    CHECK(f == doctest::Approx(focal_oracle(z, p)).epsilon(1e-12));

    // max - mean ignores a constant added to every g value
    const Tensor map = activation_map(z, p);
    const double c = 3.7;
    double mx = -INFINITY, total = 0.0;
    for (double v : map.data()) {
      mx = std::max(mx, v + c);
      total += v + c;
    }
    CHECK(mx - total / static_cast<double>(map.numel()) == doctest::Approx(f).epsilon(1e-12));
  }
}

TEST_CASE("focal gradient reaches more than one location") {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const FeatureMap z = random_map(3, 3, 4, rng);
    const auto p = random_vec(4, rng, -1, 1);
    Graph g;
    Var latent = g.variable(z.z);
    Var protos = g.constant(Tensor(Shape{1, 4}, std::vector<double>(p)));
    g.backward(sum(prototype_scores(latent, protos, 1, kEps, true)));
    const auto grad = g.grad(latent);
    int nonzero_rows = 0;
    for (std::size_t i = 0; i < 9; ++i) {
      bool any = false;
      for (std::size_t d = 0; d < 4; ++d) any = any || grad[i * 4 + d] != 0.0;
      nonzero_rows += any;
    }
    CHECK(nonzero_rows > 1);
  }
}

TEST_CASE("slot similarity examples") {
  Rng rng(6);
  const FeatureMap z = random_map(3, 3, 4, rng);
  PrototypePool pool = PrototypePool::xavier(5, 4, rng);

  std::vector<double> e3(5, 0.0);
  e3[3] = 1.0;
  CHECK(slot_similarity(z, e3, pool) == focal_similarity(z, pool.prototype(3)));

  std::vector<double> half(5, 0.0);
  half[0] = half[1] = 0.5;
  const double expect = 0.5 * focal_similarity(z, pool.prototype(0)) + 0.5 * focal_similarity(z, pool.prototype(1));
  CHECK(slot_similarity(z, half, pool) == doctest::Approx(expect).epsilon(1e-14));

  for (int trial = 0; trial < 50; ++trial) {
    auto q = random_vec(5, rng, 0.0, 1.0);
    const double s = std::accumulate(q.begin(), q.end(), 0.0);
    for (double& x : q) x /= s;
    double brute = 0.0;
    for (std::size_t m = 0; m < 5; ++m) brute += q[m] * focal_oracle(z, pool.prototype(m));
    CHECK(std::abs(slot_similarity(z, q, pool) - brute) < 1e-12);
  }
}

TEST_CASE("slot similarity with a one-hot distribution is bitwise focal similarity") {
  Rng rng(41);
  for (int trial = 0; trial < 200; ++trial) {
    const FeatureMap z = random_map(2, 3, 3, rng);
    PrototypePool pool = PrototypePool::xavier(4, 3, rng);
    const std::size_t m = trial % 4;
    std::vector<double> q(4, 0.0);
    q[m] = 1.0;
    CHECK(slot_similarity(z, q, pool) == focal_similarity(z, pool.prototype(m)));
  }
}

TEST_CASE("harden examples") {
  CHECK(harden(std::vector<double>{0.2, 0.5, 0.3}) == std::vector<double>{0, 1, 0});
  CHECK(harden(std::vector<double>{0.25, 0.25, 0.25, 0.25}) == std::vector<double>{1, 0, 0, 0});
  const std::vector<double> onehot{0, 0, 1};
  CHECK(harden(onehot) == onehot);
}

TEST_CASE("orthogonality loss examples") {
  CHECK(orthogonality_loss(Tensor::matrix(2, 3, {1, 0, 0, 0, 1, 0}), 1, 2) == 0.0);
  CHECK(orthogonality_loss(Tensor::matrix(2, 3, {1, 0, 0, 1, 0, 0}), 1, 2) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(orthogonality_loss(Tensor::matrix(1, 3, {0.2, 0.3, 0.5}), 1, 1) == 0.0);
  CHECK_THROWS(orthogonality_loss(Tensor::matrix(2, 2, {0, 0, 1, 0}), 1, 2));
}

TEST_CASE("orthogonality loss vanishes exactly on injective one-hot assignments") {
  // All assignments of 2 classes x 2 slots onto a pool of 3.
  const std::size_t m = 3;
  for (std::size_t code = 0; code < 81; ++code) {
    std::size_t rest = code;
    std::vector<std::size_t> pick(4);
    for (auto& p : pick) {
      p = rest % m;
      rest /= m;
    }
    Tensor q(Shape{4, m});
    for (std::size_t r = 0; r < 4; ++r) q.at(r, pick[r]) = 1.0;
    const bool injective = pick[0] != pick[1] && pick[2] != pick[3];
    const double loss = orthogonality_loss(q, 2, 2);
    CHECK((std::abs(loss) <= 1e-12) == injective);
  }
}

TEST_CASE("classifier head block init") {
  const auto head = ClassifierHead::block_init(3, 2);
  for (std::size_t r = 0; r < 6; ++r) {
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(head.weights.at(r, c) == (r / 2 == c ? 1.0 : 0.0));
      CHECK(head.off_block_mask().at(r, c) == (r / 2 == c ? 0.0 : 1.0));
    }
  }
}

TEST_CASE("uniform slot bank starts at 1/M") {
  const auto bank = SlotBank::uniform(4, 3, 200);
  const Tensor q = bank.relaxed();
  for (double x : q.data()) CHECK(x == doctest::Approx(0.005).epsilon(1e-14));
}

TEST_CASE("forward examples") {
  Rng rng(13);
  const FeatureMap z = random_map(3, 3, 4, rng);
  PrototypePool pool = PrototypePool::xavier(2, 4, rng);
  SlotBank slots = SlotBank::uniform(1, 1, 2);
  slots.logits[1] = 5.0;  // argmax on prototype 1
  const auto head = ClassifierHead::block_init(1, 1);
  const auto logits = forward(z, slots, pool, head, Mode::eval);
  REQUIRE(logits.size() == 1);
  CHECK(logits[0] == focal_similarity(z, pool.prototype(1)));

  ClassifierHead zero = ClassifierHead::block_init(1, 1);
  zero.weights[0] = 0.0;
  CHECK(forward(z, slots, pool, zero, Mode::eval)[0] == 0.0);

  // train mode draws noise; eval mode never does
  SlotBank three = SlotBank::uniform(2, 2, 2);
  Rng a(1), b(2);
  const auto head2 = ClassifierHead::block_init(2, 2);
  CHECK(forward(z, three, pool, head2, Mode::eval) == forward(z, three, pool, head2, Mode::eval));
  CHECK(forward(z, three, pool, head2, Mode::train, &a) != forward(z, three, pool, head2, Mode::train, &b));

  SlotBank bad = SlotBank::uniform(1, 1, 3);
  CHECK_THROWS(forward(z, bad, pool, head, Mode::eval));
}

TEST_CASE("hardened and noiseless relaxed logits agree once slots binarize") {
  Rng rng(19);
  PrototypePool pool = PrototypePool::xavier(6, 4, rng);
  SlotBank slots = SlotBank::uniform(3, 2, 6);
  for (std::size_t r = 0; r < 6; ++r) slots.logits.at(r, (r * 5) % 6) = 0.05;
  slots.tau = 1e-3;
  slots.noise_enabled = false;
  const Tensor relaxed = slots.relaxed();
  for (double x : relaxed.data()) CHECK((x < 1e-6 || x > 1.0 - 1e-6));
  const auto head = ClassifierHead::block_init(3, 2);
  for (int trial = 0; trial < 20; ++trial) {
    const FeatureMap z = random_map(3, 3, 4, rng);
    const auto hard = forward(z, slots, pool, head, Mode::eval);
    const auto soft = forward(z, slots, pool, head, Mode::train);
    for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(hard[c] - soft[c]) < 1e-4);
  }
}

TEST_CASE("activation map examples") {
  Rng rng(29);
  FeatureMap z = random_map(3, 4, 2, rng);
  for (double& x : z.z.data()) x += 50.0;
  z.z.at(0, 0) = 0.0;
  z.z.at(0, 1) = 0.0;
  const Tensor map = activation_map(z, std::vector<double>{0.0, 0.0});
  CHECK(map.shape() == Shape{3, 4});
  for (std::size_t i = 1; i < 12; ++i) CHECK(map[i] < map[0]);

  FeatureMap flat{2, 2, Tensor(Shape{4, 2}, 1.0)};
  const Tensor c = activation_map(flat, std::vector<double>{0.3, -0.2});
  for (double v : c.data()) CHECK(v == c[0]);

  const FeatureMap r = random_map(2, 3, 3, rng);
  const auto p = random_vec(3, rng, -1, 1);
  const Tensor m = activation_map(r, p);
  for (std::size_t i = 0; i < 6; ++i) {
    double d2 = 0.0;
    for (std::size_t j = 0; j < 3; ++j) d2 += (r.z.at(i, j) - p[j]) * (r.z.at(i, j) - p[j]);
    CHECK(std::abs(m[i] - g_oracle(d2)) < 1e-12);
  }
}

TEST_CASE("model dimension checks") {
  Rng rng(1);
  CHECK_NOTHROW(make_model(2, 10, 4, 3, 3, rng));
  CHECK_THROWS_AS(make_model(2, 11, 4, 3, 3, rng), ParameterError);
  CHECK_THROWS_AS(make_model(2, 0, 4, 3, 3, rng), ParameterError);
  CHECK_THROWS_AS(make_model(0, 2, 4, 3, 3, rng), ParameterError);
  CHECK(parse_gumbel_variant("classic") == GumbelVariant::classic);
  CHECK_THROWS_AS(parse_gumbel_variant("hard"), ParameterError);
}
