#include "protopool/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <tuple>

#include "protopool/checkpoint.hpp"
#include "protopool/training.hpp"

namespace protopool::analysis {

namespace {

std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

void check_written(const std::ofstream& out, const std::filesystem::path& path) {
  if (!out) throw DataError("failed writing " + path.string());
}

std::pair<double, double> mean_std(std::span<const double> xs) {
  if (xs.empty()) return {0.0, 0.0};
  const double n = static_cast<double>(xs.size());
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / n)};
}

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

Tensor assignment_matrix(const ProtoPoolModel& model, Assignment kind) {
  return kind == Assignment::hardened ? model.slots.hardened() : model.slots.relaxed();
}

void write_assignment_csv(const Tensor& matrix, std::size_t slots, const std::filesystem::path& path) {
  if (matrix.rank() != 2 || slots == 0 || matrix.dim(0) % slots != 0) {
    throw ShapeError("assignment matrix must be (C*K) x M");
  }
  auto out = open_csv(path);
  out << "class,slot";
  for (std::size_t m = 0; m < matrix.dim(1); ++m) out << ",proto_" << m;
  out << '\n';
  for (std::size_t r = 0; r < matrix.dim(0); ++r) {
    out << r / slots << ',' << r % slots;
    for (std::size_t m = 0; m < matrix.dim(1); ++m) out << ',' << train::format_double(matrix.at(r, m));
    out << '\n';
  }
  check_written(out, path);
}

std::vector<HistogramBin> q_histogram(const ProtoPoolModel& model, std::size_t bins, Assignment kind) {
  if (bins < 2) throw ParameterError("histogram needs at least 2 bins");
  std::vector<HistogramBin> hist(bins);
  const double width = 1.0 / static_cast<double>(bins);
  for (std::size_t i = 0; i < bins; ++i) {
    hist[i].lo = static_cast<double>(i) * width;
    hist[i].hi = i + 1 == bins ? 1.0 : static_cast<double>(i + 1) * width;
  }
  const Tensor matrix = assignment_matrix(model, kind);
  for (double q : matrix.data()) {
    const double clamped = std::clamp(q, 0.0, 1.0);
    const auto bin = std::min(bins - 1, static_cast<std::size_t>(clamped * static_cast<double>(bins)));
    ++hist[bin].count;
  }
  return hist;
}

void write_histogram_csv(std::span<const HistogramBin> hist, const std::filesystem::path& path) {
  auto out = open_csv(path);
  out << "bin_lo,bin_hi,count\n";
  for (const auto& b : hist) out << train::format_double(b.lo) << ',' << train::format_double(b.hi) << ',' << b.count << '\n';
  check_written(out, path);
}

std::vector<std::vector<std::size_t>> prototype_classes(const ProtoPoolModel& model) {
  const auto assignment = model.slots.assignment();
  const std::size_t k = model.slots.slots;
  std::vector<std::vector<std::size_t>> classes(model.slots.pool_size());
  for (std::size_t r = 0; r < assignment.size(); ++r) {
    auto& set = classes[assignment[r]];
    const std::size_t c = r / k;
    if (set.empty() || set.back() != c) set.push_back(c);  // rows are class-major, so sets stay sorted
  }
  return classes;
}

SharingStats sharing_stats(const ProtoPoolModel& model) {
  const auto classes = prototype_classes(model);
  SharingStats s;
  s.counts.reserve(classes.size());
  std::size_t max_count = 0;
  std::vector<double> assigned;
  for (const auto& set : classes) {
    s.counts.push_back(set.size());
    max_count = std::max(max_count, set.size());
    if (set.empty()) {
      ++s.unassigned;
    } else {
      assigned.push_back(static_cast<double>(set.size()));
    }
  }
  s.assigned = assigned.size();
  s.histogram.assign(max_count + 1, 0);
  for (std::size_t n : s.counts) {
    if (n > 0) ++s.histogram[n];
  }
  std::tie(s.mean, s.std) = mean_std(assigned);

  std::vector<double> per_slot;
  for (std::size_t proto : model.slots.assignment()) per_slot.push_back(static_cast<double>(s.counts[proto]));
  std::tie(s.slot_mean, s.slot_std) = mean_std(per_slot);
  return s;
}

void write_sharing_csv(const SharingStats& stats, const std::filesystem::path& path) {
  auto out = open_csv(path);
  out << "proto_id,class_count\n";
  for (std::size_t m = 0; m < stats.counts.size(); ++m) out << m << ',' << stats.counts[m] << '\n';
  check_written(out, path);
}

void write_sharing_summary_csv(const SharingStats& stats, const std::filesystem::path& path) {
  auto out = open_csv(path);
  out << "key,value\n";
  out << "assigned," << stats.assigned << '\n';
  out << "unassigned," << stats.unassigned << '\n';
  out << "mean," << train::format_double(stats.mean) << '\n';
  out << "std," << train::format_double(stats.std) << '\n';
  out << "slot_mean," << train::format_double(stats.slot_mean) << '\n';
  out << "slot_std," << train::format_double(stats.slot_std) << '\n';
  for (std::size_t n = 1; n < stats.histogram.size(); ++n) out << "hist_" << n << ',' << stats.histogram[n] << '\n';
  check_written(out, path);
}

RunsSharingSummary summarize_runs(std::span<const SharingStats> runs) {
  std::vector<double> means, pooled;
  for (const auto& r : runs) {
    means.push_back(r.mean);
    for (std::size_t n : r.counts) {
      if (n > 0) pooled.push_back(static_cast<double>(n));
    }
  }
  RunsSharingSummary s;
  std::tie(s.run_mean, s.run_std) = mean_std(means);
  std::tie(s.pooled_mean, s.pooled_std) = mean_std(pooled);
  return s;
}

std::size_t ClassGraph::weight(std::size_t a, std::size_t b) const {
  if (a == b) return 0;
  if (a > b) std::swap(a, b);
  const auto it = std::lower_bound(edges.begin(), edges.end(), std::pair{a, b}, [](const Edge& e, const auto& key) {
    return std::pair{e.a, e.b} < key;
  });
  return it != edges.end() && it->a == a && it->b == b ? it->weight : 0;
}

std::size_t ClassGraph::total_weight() const {
  std::size_t total = 0;
  for (const auto& e : edges) total += e.weight;
  return total;
}

ClassGraph class_graph(const ProtoPoolModel& model) {
  const std::size_t c = model.classes();
  std::vector<std::size_t> shared(c * c, 0);
  for (const auto& set : prototype_classes(model)) {
    for (std::size_t i = 0; i < set.size(); ++i) {
      for (std::size_t j = i + 1; j < set.size(); ++j) ++shared[set[i] * c + set[j]];
    }
  }
  ClassGraph g;
  g.classes = c;
  for (std::size_t a = 0; a < c; ++a) {
    for (std::size_t b = a + 1; b < c; ++b) {
      if (shared[a * c + b] > 0) g.edges.push_back(Edge{a, b, shared[a * c + b]});
    }
  }
  return g;
}

void write_graph_csv(const ClassGraph& graph, const std::filesystem::path& path) {
  auto out = open_csv(path);
  out << "class_a,class_b,weight\n";
  for (const auto& e : graph.edges) out << e.a << ',' << e.b << ',' << e.weight << '\n';
  check_written(out, path);
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("spearman needs equal-length samples");
  if (x.size() < 2) return 0.0;
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const auto [mx, sx] = mean_std(rx);
  const auto [my, sy] = mean_std(ry);
  if (sx == 0.0 || sy == 0.0) return 0.0;
  double cov = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) cov += (rx[i] - mx) * (ry[i] - my);
  return cov / static_cast<double>(rx.size()) / (sx * sy);
}

double sharing_correlation(const ProtoPoolModel& model, const data::SyntheticManifest& manifest) {
  const std::size_t c = model.classes();
  if (manifest.class_parts.size() != c) throw DataError("manifest class count differs from model");
  const ClassGraph g = class_graph(model);
  std::vector<double> learned, planted;
  for (std::size_t a = 0; a < c; ++a) {
    for (std::size_t b = a + 1; b < c; ++b) {
      learned.push_back(static_cast<double>(g.weight(a, b)));
      planted.push_back(static_cast<double>(manifest.shared_parts(a, b)));
    }
  }
  return spearman(learned, planted);
}

std::vector<unsigned char> to_gray(const Tensor& map) {
  const auto values = map.data();
  std::vector<unsigned char> gray(values.size(), 128);
  if (values.empty()) return gray;
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) return gray;
  for (std::size_t i = 0; i < values.size(); ++i) {
    gray[i] = static_cast<unsigned char>(std::lround(255.0 * (values[i] - lo) / (hi - lo)));
  }
  return gray;
}

void write_pgm(const Tensor& map, const std::filesystem::path& path) {
  if (map.rank() != 2) throw ShapeError("graymap needs an H x W map");
  const auto gray = to_gray(map);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P5\n" << map.dim(1) << ' ' << map.dim(0) << "\n255\n";
  out.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
  check_written(out, path);
}

void write_activation_csv(const Tensor& map, const std::filesystem::path& path) {
  if (map.rank() != 2) throw ShapeError("activation export needs an H x W map");
  auto out = open_csv(path);
  out << "row,col,value\n";
  for (std::size_t r = 0; r < map.dim(0); ++r) {
    for (std::size_t c = 0; c < map.dim(1); ++c) out << r << ',' << c << ',' << train::format_double(map.at(r, c)) << '\n';
  }
  check_written(out, path);
}

Tensor export_activation(const ProtoPoolModel& model, const data::FeatureMapDataset& ds, std::size_t sample,
                         std::size_t prototype, const std::filesystem::path& prefix) {
  if (sample >= ds.size()) throw ParameterError("sample id " + std::to_string(sample) + " out of range");
  if (prototype >= model.pool.size()) throw ParameterError("prototype id " + std::to_string(prototype) + " out of range");
  const FeatureMap z = train::latent_map(model, ds, sample);
  Tensor map = activation_map(z, model.pool.prototype(prototype), model.epsilon);
  auto with_ext = [&](const char* ext) {
    auto p = prefix;
    p += ext;
    return p;
  };
  write_pgm(map, with_ext(".pgm"));
  write_activation_csv(map, with_ext(".csv"));
  return map;
}

}  // namespace protopool::analysis
