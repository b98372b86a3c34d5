#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "protopool/analysis.hpp"
#include "protopool/training.hpp"

using namespace protopool;
using namespace protopool::analysis;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* name) {
  auto dir = fs::temp_directory_path() / (std::string("protopool_analysis_") + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(cell);
    rows.push_back(row);
  }
  return rows;
}

// Model whose hardened slot (c, k) points at assignment[c * K + k].
ProtoPoolModel assigned_model(std::size_t classes, std::size_t slots, std::size_t pool,
                              const std::vector<std::size_t>& assignment) {
  Rng rng(1);
  ProtoPoolModel m = make_model(classes, slots, pool, 2, 2, rng);
  for (std::size_t r = 0; r < assignment.size(); ++r) m.slots.logits.at(r, assignment[r]) = 3.0;
  return m;
}

}  // namespace

TEST_CASE("assignment matrix examples") {
  Rng rng(3);
  ProtoPoolModel m = make_model(3, 2, 5, 2, 2, rng);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& x : m.slots.logits.data()) x = n(rng);
  m.slots.tau = 0.3;

  const Tensor hard = assignment_matrix(m, Assignment::hardened);
  for (std::size_t r = 0; r < 6; ++r) {
    int ones = 0;
    for (std::size_t c = 0; c < 5; ++c) {
      CHECK((hard.at(r, c) == 0.0 || hard.at(r, c) == 1.0));
      ones += hard.at(r, c) == 1.0;
    }
    CHECK(ones == 1);
  }
  const Tensor soft = assignment_matrix(m);
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 5; ++c) s += soft.at(r, c);
    CHECK(std::abs(s - 1.0) < 1e-9);
  }

  const auto dir = temp_dir("assignment");
  write_assignment_csv(soft, 2, dir / "a.csv");
  const auto rows = read_csv(dir / "a.csv");
  REQUIRE(rows.size() == 7);
  CHECK(rows[0] == std::vector<std::string>{"class", "slot", "proto_0", "proto_1", "proto_2", "proto_3", "proto_4"});
  CHECK(rows[3][0] == "1");
  CHECK(rows[3][1] == "0");
  CHECK(std::stod(rows[3][4]) == soft.at(2, 2));
}

TEST_CASE("q histogram examples") {
  const ProtoPoolModel hard = assigned_model(2, 2, 4, {0, 1, 2, 3});
  const auto h = q_histogram(hard, 10, Assignment::hardened);
  CHECK(h.size() == 10);
  CHECK(h.front().count == 12);
  CHECK(h.back().count == 4);
  std::size_t nonzero = 0;
  for (const auto& b : h) nonzero += b.count > 0;
  CHECK(nonzero == 2);
  CHECK(h.front().lo == 0.0);
  CHECK(h.back().hi == 1.0);

  Rng rng(2);
  const ProtoPoolModel fresh = make_model(4, 3, 200, 2, 2, rng);
  const auto spike = q_histogram(fresh, 400);
  std::size_t filled = 0, total = 0;
  for (const auto& b : spike) {
    total += b.count;
    if (b.count > 0) {
      ++filled;
      CHECK(b.lo <= 0.005);
      CHECK(b.hi > 0.005);
    }
  }
  CHECK(filled == 1);
  CHECK(total == 4 * 3 * 200);

  CHECK_THROWS_AS(q_histogram(fresh, 1), ParameterError);

  const auto dir = temp_dir("hist");
  write_histogram_csv(h, dir / "h.csv");
  const auto rows = read_csv(dir / "h.csv");
  CHECK(rows[0] == std::vector<std::string>{"bin_lo", "bin_hi", "count"});
  CHECK(rows.size() == 11);
}

TEST_CASE("sharing examples") {
  const auto disjoint = sharing_stats(assigned_model(3, 2, 8, {0, 1, 2, 3, 4, 5}));
  for (std::size_t m = 0; m < 6; ++m) CHECK(disjoint.counts[m] == 1);
  CHECK(disjoint.mean == 1.0);
  CHECK(disjoint.std == 0.0);
  CHECK(disjoint.assigned == 6);
  CHECK(disjoint.unassigned == 2);

  const auto same = sharing_stats(assigned_model(2, 3, 4, {0, 1, 2, 0, 1, 2}));
  CHECK(same.counts == std::vector<std::size_t>{2, 2, 2, 0});
  CHECK(same.mean == 2.0);
  CHECK(same.histogram == std::vector<std::size_t>{0, 0, 3});

  // two slots of one class on the same prototype count that class once
  const auto repeat = sharing_stats(assigned_model(2, 2, 3, {0, 0, 0, 1}));
  CHECK(repeat.counts == std::vector<std::size_t>{2, 1, 0});
  CHECK(repeat.mean == 1.5);
  CHECK(repeat.slot_mean == doctest::Approx((2.0 + 2.0 + 2.0 + 1.0) / 4.0));
}

TEST_CASE("sharing histogram and CSV recompute the mean") {
  Rng rng(9);
  std::uniform_int_distribution<std::size_t> pick(0, 6);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::size_t> a(5 * 3);
    for (auto& x : a) x = pick(rng);
    const auto s = sharing_stats(assigned_model(5, 3, 7, a));
    std::size_t hist_total = 0;
    for (std::size_t n = 1; n < s.histogram.size(); ++n) hist_total += s.histogram[n];
    CHECK(hist_total == s.assigned);
    CHECK(s.assigned + s.unassigned == 7);

    const auto dir = temp_dir("sharing");
    write_sharing_csv(s, dir / "s.csv");
    const auto rows = read_csv(dir / "s.csv");
    CHECK(rows[0] == std::vector<std::string>{"proto_id", "class_count"});
    double total = 0.0;
    std::size_t assigned = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const double c = std::stod(rows[i][1]);
      total += c;
      assigned += c > 0;
    }
    CHECK(total / static_cast<double>(assigned) == doctest::Approx(s.mean).epsilon(1e-14));

    // graph total weight is the number of sharing pairs
    const auto g = class_graph(assigned_model(5, 3, 7, a));
    std::size_t pairs = 0;
    for (std::size_t c : s.counts) pairs += c * (c - (c > 0)) / 2;
    CHECK(g.total_weight() == pairs);
    for (const auto& e : g.edges) {
      CHECK(e.weight <= 3);
      CHECK(e.weight > 0);
      CHECK(e.a < e.b);
      CHECK(g.weight(e.a, e.b) == g.weight(e.b, e.a));
    }
  }
}

TEST_CASE("run summaries read the mean both ways") {
  const auto a = sharing_stats(assigned_model(2, 3, 4, {0, 1, 2, 0, 1, 2}));  // counts 2,2,2
  const auto b = sharing_stats(assigned_model(3, 1, 4, {0, 1, 2}));           // counts 1,1,1
  const auto c = sharing_stats(assigned_model(2, 1, 4, {0, 0}));              // count 2
  const std::vector<SharingStats> runs{a, b, c};
  const auto s = summarize_runs(runs);
  CHECK(s.run_mean == doctest::Approx(5.0 / 3.0));
  CHECK(s.run_std == doctest::Approx(std::sqrt(2.0 / 9.0)));
  CHECK(s.pooled_mean == doctest::Approx(11.0 / 7.0));
}

TEST_CASE("class graph examples") {
  CHECK(class_graph(assigned_model(2, 3, 6, {0, 1, 2, 3, 4, 5})).edges.empty());
  const auto g = class_graph(assigned_model(2, 3, 4, {0, 1, 2, 2, 1, 0}));
  REQUIRE(g.edges.size() == 1);
  CHECK(g.edges[0].a == 0);
  CHECK(g.edges[0].b == 1);
  CHECK(g.edges[0].weight == 3);
  CHECK(g.weight(1, 0) == 3);
  CHECK(g.weight(1, 1) == 0);

  const auto dir = temp_dir("graph");
  write_graph_csv(g, dir / "g.csv");
  const auto rows = read_csv(dir / "g.csv");
  CHECK(rows[0] == std::vector<std::string>{"class_a", "class_b", "weight"});
  CHECK(rows[1] == std::vector<std::string>{"0", "1", "3"});
}

TEST_CASE("spearman with average ranks") {
  CHECK(spearman(std::vector<double>{1, 2, 3, 4, 5}, std::vector<double>{5, 6, 7, 8, 7}) ==
        doctest::Approx(0.8207826816681233).epsilon(1e-12));
  CHECK(spearman(std::vector<double>{0, 0, 1, 1, 2, 3}, std::vector<double>{1, 0, 2, 2, 3, 1}) ==
        doctest::Approx(0.5).epsilon(1e-12));
  CHECK(spearman(std::vector<double>{3, 1, 2}, std::vector<double>{1, 3, 2}) == doctest::Approx(-1.0));
  CHECK(spearman(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}) == 0.0);
  CHECK_THROWS_AS(spearman(std::vector<double>{1, 2}, std::vector<double>{1}), ShapeError);
}

TEST_CASE("activation export examples") {
  const auto dir = temp_dir("activation");
  CHECK(to_gray(Tensor(Shape{2, 3}, 4.2)) == std::vector<unsigned char>(6, 128));
  const auto ramp = to_gray(Tensor::matrix(1, 3, {-1.0, 0.0, 1.0}));
  CHECK(ramp == std::vector<unsigned char>{0, 128, 255});

  write_pgm(Tensor::matrix(2, 3, {0, 1, 2, 3, 4, 5}), dir / "r.pgm");
  const std::string pgm = slurp(dir / "r.pgm");
  CHECK(pgm.rfind("P5\n3 2\n255\n", 0) == 0);
  CHECK(pgm.size() == 11 + 6);
  CHECK(static_cast<unsigned char>(pgm.back()) == 255);

  // constant feature map gives a uniform gray image
  data::FeatureMapDataset flat;
  flat.height = 3;
  flat.width = 3;
  flat.depth = 2;
  flat.samples.push_back(data::Sample{0, std::vector<double>(18, 0.5)});
  Rng rng(5);
  ProtoPoolModel m = make_model(1, 1, 2, 2, 2, rng);
  export_activation(m, flat, 0, 1, dir / "flat");
  const std::string gray = slurp(dir / "flat.pgm");
  for (std::size_t i = gray.size() - 9; i < gray.size(); ++i) CHECK(static_cast<unsigned char>(gray[i]) == 128);

  CHECK_THROWS_AS(export_activation(m, flat, 1, 0, dir / "x"), ParameterError);
  CHECK_THROWS_AS(export_activation(m, flat, 0, 2, dir / "x"), ParameterError);
}

TEST_CASE("planted part activation peaks at the planted cell") {
  const data::SyntheticSpec spec;
  const auto syn = data::generate_synthetic(spec);
  Rng rng(1);
  ProtoPoolModel m = make_model(spec.classes, 3, spec.parts, spec.depth, spec.depth, rng);
  m.addon.weight = Tensor(Shape{spec.depth, spec.depth}, 0.0);
  for (std::size_t d = 0; d < spec.depth; ++d) m.addon.weight.at(d, d) = 1.0;
  m.addon.bias = Tensor(Shape{1, spec.depth}, 0.0);
  m.pool.prototypes = syn.manifest.part_vectors;

  const auto dir = temp_dir("planted");
  for (std::size_t i = 0; i < 40; ++i) {
    const auto& pl = syn.manifest.placements[i * 7];
    const auto name = "a" + std::to_string(i);
    const Tensor map = export_activation(m, syn.dataset, pl.sample, pl.part, dir / name);
    std::size_t best = 0;
    for (std::size_t k = 1; k < map.numel(); ++k) best = map[k] > map[best] ? k : best;
    CHECK(best == pl.row * spec.width + pl.col);

    // CSV is a pass-through of activation_map
    const FeatureMap z = train::latent_map(m, syn.dataset, pl.sample);
    const Tensor direct = activation_map(z, m.pool.prototype(pl.part), m.epsilon);
    const auto rows = read_csv(dir / (name + ".csv"));
    REQUIRE(rows.size() == 1 + map.numel());
    CHECK(rows[0] == std::vector<std::string>{"row", "col", "value"});
    for (std::size_t k = 0; k < map.numel(); ++k) {
      CHECK(std::stoul(rows[k + 1][0]) == k / spec.width);
      CHECK(std::stoul(rows[k + 1][1]) == k % spec.width);
      CHECK(std::abs(std::stod(rows[k + 1][2]) - direct[k]) <= 1e-12);
    }
  }
}

TEST_CASE("exports are deterministic") {
  Rng rng(8);
  ProtoPoolModel m = make_model(4, 2, 5, 2, 2, rng);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& x : m.slots.logits.data()) x = n(rng);
  const auto a = temp_dir("det_a"), b = temp_dir("det_b");
  for (const auto& dir : {a, b}) {
    write_assignment_csv(assignment_matrix(m), 2, dir / "assignment.csv");
    write_histogram_csv(q_histogram(m, 20), dir / "hist.csv");
    write_sharing_csv(sharing_stats(m), dir / "sharing.csv");
    write_sharing_summary_csv(sharing_stats(m), dir / "summary.csv");
    write_graph_csv(class_graph(m), dir / "graph.csv");
  }
  for (const char* f : {"assignment.csv", "hist.csv", "sharing.csv", "summary.csv", "graph.csv"}) {
    CHECK(slurp(a / f) == slurp(b / f));
  }
}
