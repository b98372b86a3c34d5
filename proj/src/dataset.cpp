#include "protopool/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <tuple>
#include <numeric>
#include <random>
#include <sstream>

#include "binary_io.hpp"
#include "protopool/errors.hpp"

namespace protopool::data {

namespace detail = protopool::detail;

std::size_t FeatureMapDataset::num_classes() const {
  std::size_t c = 0;
  for (const Sample& s : samples) c = std::max<std::size_t>(c, s.label + 1u);
  return c;
}

std::vector<std::size_t> FeatureMapDataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes(), 0);
  for (const Sample& s : samples) ++counts[s.label];
  return counts;
}

FeatureMap FeatureMapDataset::feature_map(std::size_t index) const {
  const Sample& s = samples.at(index);
  return FeatureMap{height, width, Tensor(Shape{locations(), depth}, s.features)};
}

Tensor FeatureMapDataset::batch_features(std::span<const std::size_t> indices) const {
  const std::size_t per = locations() * depth;
  std::vector<double> out;
  out.reserve(indices.size() * per);
  for (std::size_t i : indices) {
    const auto& f = samples.at(i).features;
    out.insert(out.end(), f.begin(), f.end());
  }
  return Tensor(Shape{indices.size() * locations(), depth}, std::move(out));
}

std::vector<std::size_t> FeatureMapDataset::labels(std::span<const std::size_t> indices) const {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(samples.at(i).label);
  return out;
}

void FeatureMapDataset::validate() const {
  if (height == 0 || width == 0 || depth == 0) throw DataError("dataset extents must be positive");
  const std::size_t per = locations() * depth;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].features.size() != per) {
      throw DataError("sample " + std::to_string(i) + " has " + std::to_string(samples[i].features.size()) +
                      " values, expected " + std::to_string(per));
    }
    for (double x : samples[i].features) {
      if (!std::isfinite(x)) throw DataError("sample " + std::to_string(i) + " has a non-finite value");
    }
  }
  const auto counts = class_counts();
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) throw DataError("labels are not dense: class " + std::to_string(c) + " has no samples");
  }
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[] = "PPFM";

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xffffffffu) throw DataError(std::string(what) + " does not fit in u32");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

std::vector<std::uint8_t> encode_dataset(const FeatureMapDataset& ds) {
  const std::size_t per = ds.locations() * ds.depth;
  detail::ByteWriter w;
  w.raw(kMagic);
  w.u32(kDatasetVersion);
  w.u32(checked_u32(ds.size(), "N"));
  w.u32(checked_u32(ds.height, "H"));
  w.u32(checked_u32(ds.width, "W"));
  w.u32(checked_u32(ds.depth, "D"));
  for (const Sample& s : ds.samples) {
    if (s.features.size() != per) throw DataError("sample size differs from H*W*D");
    w.u32(s.label);
    for (double x : s.features) w.f32(static_cast<float>(x));
  }
  return std::move(w.bytes());
}

FeatureMapDataset decode_dataset(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (r.raw(4, "magic") != kMagic) throw ParseError("bad magic, expected PPFM", 0);
  const std::size_t version_at = r.offset();
  if (const auto version = r.u32("version"); version != kDatasetVersion) {
    throw ParseError("unsupported PPFM version " + std::to_string(version), version_at);
  }
  FeatureMapDataset ds;
  const std::size_t n = r.u32("N");
  ds.height = r.u32("H");
  ds.width = r.u32("W");
  ds.depth = r.u32("D");
  const std::size_t per = ds.locations() * ds.depth;
  if (n > 0 && per == 0) throw ParseError("zero extent with non-empty dataset", r.offset());
  ds.samples.reserve(std::min<std::size_t>(n, r.remaining() / (4 + 4 * std::max<std::size_t>(per, 1))));
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.label = r.u32("label");
    r.need(4 * per, "features");
    s.features.resize(per);
    for (double& x : s.features) {
      const std::size_t at = r.offset();
      x = r.f32("feature");
      if (!std::isfinite(x)) throw ParseError("non-finite feature value", at);
    }
    ds.samples.push_back(std::move(s));
  }
  if (r.remaining() != 0) throw ParseError("trailing bytes after last record", r.offset());
  return ds;
}

void write_dataset(const FeatureMapDataset& ds, const std::filesystem::path& path) {
  detail::write_file(path, encode_dataset(ds));
}

FeatureMapDataset read_dataset(const std::filesystem::path& path) {
  return decode_dataset(detail::read_file(path));
}

// ---------------------------------------------------------------------------

void SyntheticSpec::validate() const {
  if (classes == 0 || parts == 0 || parts_per_class == 0 || samples_per_class == 0) {
    throw ParameterError("synthetic spec counts must be positive");
  }
  if (height == 0 || width == 0 || depth == 0) throw ParameterError("synthetic grid extents must be positive");
  if (parts_per_class > parts) throw ParameterError("parts_per_class exceeds the number of parts");
  if (parts_per_class > height * width) throw ParameterError("parts per class exceed grid capacity");
  if (!(shared_fraction >= 0.0 && shared_fraction <= 1.0)) throw ParameterError("shared_fraction must lie in [0, 1]");
  if (!(sigma >= 0.0) || !(jitter >= 0.0) || !(background_offset >= 0.0)) {
    throw ParameterError("sigma, jitter and background_offset must be non-negative");
  }
  const std::size_t shared = static_cast<std::size_t>(std::lround(shared_fraction * parts_per_class));
  const std::size_t exclusive = (parts_per_class - shared) * classes;
  if (exclusive > parts || (shared > 0 && parts - exclusive < shared)) {
    throw ParameterError("not enough parts: need " + std::to_string(exclusive) + " exclusive plus " +
                         std::to_string(shared) + " shared");
  }
}

std::size_t SyntheticManifest::shared_parts(std::size_t a, std::size_t b) const {
  const auto& pa = class_parts.at(a);
  const auto& pb = class_parts.at(b);
  std::size_t n = 0;
  for (std::size_t p : pa) n += static_cast<std::size_t>(std::count(pb.begin(), pb.end(), p));
  return n;
}

namespace {

// Class sets of each shared part. Every class joins `per_class` distinct
// parts; parts hold at least two classes when the pool allows it, and the
// greedy fill keeps repeated class pairs rare. Restarts pick the first fill
// with no repeated pair, else the one with the fewest.
std::vector<std::vector<std::size_t>> shared_groups(std::size_t classes, std::size_t per_class, std::size_t pool,
                                                    Rng& rng) {
  const std::size_t incidences = classes * per_class;
  const std::size_t min_size = std::min<std::size_t>(2, classes);
  const std::size_t used = std::min(pool, (incidences + min_size - 1) / min_size);
  std::vector<std::size_t> capacity(used, incidences / used);
  for (std::size_t j = 0; j < incidences % used; ++j) ++capacity[j];

  std::vector<std::vector<std::size_t>> best;
  std::size_t best_repeats = std::numeric_limits<std::size_t>::max();
  std::uniform_real_distribution<double> tie(0.0, 1.0);
  for (int attempt = 0; attempt < 200 && best_repeats > 0; ++attempt) {
    std::vector<std::size_t> remaining(classes, per_class);
    std::vector<std::size_t> pair_count(classes * classes, 0);
    std::vector<std::vector<std::size_t>> groups(used);
    std::size_t repeats = 0;
    bool complete = true;
    for (std::size_t j = 0; j < used && complete; ++j) {
      std::vector<double> key(classes);
      for (double& k : key) k = tie(rng);
      for (std::size_t slot = 0; slot < capacity[j]; ++slot) {
        std::size_t pick = classes;
        for (std::size_t c = 0; c < classes; ++c) {
          if (remaining[c] == 0 || std::find(groups[j].begin(), groups[j].end(), c) != groups[j].end()) continue;
          if (pick == classes) {
            pick = c;
            continue;
          }
          auto clashes = [&](std::size_t x) {
            std::size_t n = 0;
            for (std::size_t o : groups[j]) n += pair_count[x * classes + o];
            return n;
          };
          const auto a = std::make_tuple(clashes(c), remaining[pick], key[c]);
          const auto b = std::make_tuple(clashes(pick), remaining[c], key[pick]);
          if (a < b) pick = c;
        }
        if (pick == classes) {
          complete = false;
          break;
        }
        for (std::size_t o : groups[j]) {
          repeats += pair_count[pick * classes + o] > 0 ? 1 : 0;
          ++pair_count[pick * classes + o];
          ++pair_count[o * classes + pick];
        }
        groups[j].push_back(pick);
        --remaining[pick];
      }
    }
    if (complete && repeats < best_repeats) {
      best_repeats = repeats;
      best = std::move(groups);
    }
  }
  if (best.empty()) throw ParameterError("could not spread shared parts over the pool");
  return best;
}

}  // namespace

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  SyntheticManifest manifest;
  manifest.part_vectors = Tensor(Shape{spec.parts, spec.depth});
  for (std::size_t g = 0; g < spec.parts; ++g) {
    double norm = 0.0;
    std::vector<double> v(spec.depth);
    for (double& x : v) {
      x = normal(rng);
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (std::size_t d = 0; d < spec.depth; ++d) manifest.part_vectors.at(g, d) = v[d] / norm;
  }
  std::vector<double> background(spec.depth);
  {
    double norm = 0.0;
    for (double& x : background) {
      x = normal(rng);
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (double& x : background) x *= spec.background_offset / norm;
  }

  const std::size_t n_shared = static_cast<std::size_t>(std::lround(spec.shared_fraction * spec.parts_per_class));
  const std::size_t n_excl = spec.parts_per_class - n_shared;
  std::vector<std::size_t> ids(spec.parts);
  std::iota(ids.begin(), ids.end(), 0);
  std::shuffle(ids.begin(), ids.end(), rng);
  const std::size_t pool_begin = spec.classes * n_excl;

  manifest.class_parts.resize(spec.classes);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    for (std::size_t j = 0; j < n_excl; ++j) manifest.class_parts[c].push_back(ids[c * n_excl + j]);
  }
  if (n_shared > 0) {
    const auto groups = shared_groups(spec.classes, n_shared, spec.parts - pool_begin, rng);
    for (std::size_t j = 0; j < groups.size(); ++j) {
      for (std::size_t c : groups[j]) manifest.class_parts[c].push_back(ids[pool_begin + j]);
    }
  }

  FeatureMapDataset ds;
  ds.height = spec.height;
  ds.width = spec.width;
  ds.depth = spec.depth;
  const std::size_t cells = spec.height * spec.width;
  std::vector<std::size_t> cell_order(cells);
  for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
    for (std::size_t c = 0; c < spec.classes; ++c) {
      Sample sample;
      sample.label = static_cast<std::uint32_t>(c);
      sample.features.resize(cells * spec.depth);
      for (std::size_t i = 0; i < sample.features.size(); ++i) {
        sample.features[i] = background[i % spec.depth] + spec.sigma * normal(rng);
      }
      std::iota(cell_order.begin(), cell_order.end(), 0);
      std::shuffle(cell_order.begin(), cell_order.end(), rng);
      const std::size_t sample_id = ds.samples.size();
      for (std::size_t j = 0; j < spec.parts_per_class; ++j) {
        const std::size_t part = manifest.class_parts[c][j];
        const std::size_t cell = cell_order[j];
        for (std::size_t d = 0; d < spec.depth; ++d) {
          sample.features[cell * spec.depth + d] = manifest.part_vectors.at(part, d) + spec.jitter * normal(rng);
        }
        manifest.placements.push_back({sample_id, part, cell / spec.width, cell % spec.width});
      }
      for (double& x : sample.features) x = static_cast<double>(static_cast<float>(x));
      ds.samples.push_back(std::move(sample));
    }
  }
  manifest.oracle_accuracy = nearest_part_accuracy(ds, manifest);
  return SyntheticData{std::move(ds), std::move(manifest)};
}

double nearest_part_accuracy(const FeatureMapDataset& ds, const SyntheticManifest& manifest) {
  if (ds.size() == 0) return 0.0;
  const std::size_t cells = ds.locations(), depth = ds.depth;
  const std::size_t parts = manifest.part_vectors.dim(0);
  std::size_t correct = 0;
  std::vector<double> nearest(parts);
  for (const Sample& s : ds.samples) {
    for (std::size_t p = 0; p < parts; ++p) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < cells; ++i) {
        double acc = 0.0;
        for (std::size_t d = 0; d < depth; ++d) {
          const double diff = s.features[i * depth + d] - manifest.part_vectors.at(p, d);
          acc += diff * diff;
        }
        best = std::min(best, acc);
      }
      nearest[p] = best;
    }
    std::size_t predicted = 0;
    double best_cost = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < manifest.class_parts.size(); ++c) {
      double cost = 0.0;
      for (std::size_t p : manifest.class_parts[c]) cost += nearest[p];
      if (cost < best_cost) {
        best_cost = cost;
        predicted = c;
      }
    }
    correct += predicted == s.label ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

namespace {

std::filesystem::path with_suffix(const std::filesystem::path& prefix, const char* suffix) {
  return std::filesystem::path(prefix.string() + suffix);
}

std::vector<std::vector<std::size_t>> read_csv_rows(const std::filesystem::path& path, std::size_t columns) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);  // header
  std::vector<std::vector<std::size_t>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::size_t> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stoull(cell));
    if (row.size() != columns) throw DataError("malformed row in " + path.string() + ": " + line);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace

void write_manifest(const SyntheticManifest& manifest, const std::filesystem::path& prefix) {
  std::ofstream classes(with_suffix(prefix, ".classes.csv"));
  classes << "class_id,part_id\n";
  for (std::size_t c = 0; c < manifest.class_parts.size(); ++c) {
    for (std::size_t p : manifest.class_parts[c]) classes << c << ',' << p << '\n';
  }
  std::ofstream placements(with_suffix(prefix, ".placements.csv"));
  placements << "sample_id,part_id,row,col\n";
  for (const Placement& p : manifest.placements) {
    placements << p.sample << ',' << p.part << ',' << p.row << ',' << p.col << '\n';
  }
  if (!classes || !placements) throw DataError("failed writing manifest next to " + prefix.string());
}

SyntheticManifest read_manifest(const std::filesystem::path& prefix) {
  SyntheticManifest manifest;
  for (const auto& row : read_csv_rows(with_suffix(prefix, ".classes.csv"), 2)) {
    if (manifest.class_parts.size() <= row[0]) manifest.class_parts.resize(row[0] + 1);
    manifest.class_parts[row[0]].push_back(row[1]);
  }
  const auto placements = with_suffix(prefix, ".placements.csv");
  if (std::filesystem::exists(placements)) {
    for (const auto& row : read_csv_rows(placements, 4)) {
      manifest.placements.push_back({row[0], row[1], row[2], row[3]});
    }
  }
  return manifest;
}

// ---------------------------------------------------------------------------

Split split(const FeatureMapDataset& ds, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ParameterError("val_fraction must lie in (0, 1)");
  const std::size_t classes = ds.num_classes();
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.samples[i].label].push_back(i);

  Rng rng(seed);
  Split out;
  for (std::size_t c = 0; c < classes; ++c) {
    auto& idx = by_class[c];
    if (idx.size() < 2) throw DataError("class " + std::to_string(c) + " has fewer than 2 samples");
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto wanted = static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(idx.size())));
    const std::size_t n_val = std::clamp<std::size_t>(wanted, 1, idx.size() - 1);
    out.val_index.insert(out.val_index.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
    out.train_index.insert(out.train_index.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  }
  std::sort(out.train_index.begin(), out.train_index.end());
  std::sort(out.val_index.begin(), out.val_index.end());
  for (auto* part : {&out.train, &out.val}) {
    part->height = ds.height;
    part->width = ds.width;
    part->depth = ds.depth;
    part->class_names = ds.class_names;
  }
  for (std::size_t i : out.train_index) out.train.samples.push_back(ds.samples[i]);
  for (std::size_t i : out.val_index) out.val.samples.push_back(ds.samples[i]);
  return out;
}

}  // namespace protopool::data
