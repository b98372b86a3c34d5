#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <random>
#include <set>

#include "protopool/dataset.hpp"
#include "protopool/errors.hpp"

using namespace protopool;
using namespace protopool::data;
namespace fs = std::filesystem;

namespace {

FeatureMapDataset random_dataset(std::mt19937_64& rng, std::size_t n, std::size_t classes) {
  std::uniform_int_distribution<std::size_t> ext(1, 4);
  std::normal_distribution<float> val(0.0f, 10.0f);
  FeatureMapDataset ds;
  ds.height = ext(rng);
  ds.width = ext(rng);
  ds.depth = ext(rng);
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.label = static_cast<std::uint32_t>(i % classes);
    s.features.resize(ds.height * ds.width * ds.depth);
    for (double& x : s.features) x = static_cast<double>(val(rng));
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

bool bit_equal(const FeatureMapDataset& a, const FeatureMapDataset& b) {
  if (a.height != b.height || a.width != b.width || a.depth != b.depth || a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.samples[i].label != b.samples[i].label) return false;
    const auto& x = a.samples[i].features;
    const auto& y = b.samples[i].features;
    if (x.size() != y.size() || std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) != 0) return false;
  }
  return true;
}

fs::path temp_dir(const char* name) {
  auto dir = fs::temp_directory_path() / (std::string("protopool_dataio_") + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.classes = 6;
  s.parts = 12;
  s.parts_per_class = 2;
  s.height = 4;
  s.width = 4;
  s.depth = 8;
  s.samples_per_class = 10;
  return s;
}

}  // namespace

TEST_CASE("PPFM round trip is bit-exact for random shapes") {
  std::mt19937_64 rng(5);
  const auto dir = temp_dir("roundtrip");
  for (int trial = 0; trial < 30; ++trial) {
    const auto ds = random_dataset(rng, 1 + trial % 7, 1 + trial % 3);
    CHECK(bit_equal(decode_dataset(encode_dataset(ds)), ds));
    write_dataset(ds, dir / "ds.ppfm");
    CHECK(bit_equal(read_dataset(dir / "ds.ppfm"), ds));
  }
}

TEST_CASE("PPFM layout") {
  FeatureMapDataset ds;
  ds.height = 1;
  ds.width = 2;
  ds.depth = 1;
  ds.samples.push_back(Sample{1, {1.0, -2.0}});
  const auto bytes = encode_dataset(ds);
  REQUIRE(bytes.size() == 4 + 5 * 4 + 4 + 2 * 4);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "PPFM");
  CHECK(bytes[4] == kDatasetVersion);
  CHECK(bytes[8] == 1);    // N
  CHECK(bytes[16] == 2);   // W
  CHECK(bytes[24] == 1);   // label
  CHECK(bytes[31] == 0x3f);  // 1.0f little-endian high byte
}

TEST_CASE("PPFM errors name the byte offset") {
  std::mt19937_64 rng(1);
  const auto bytes = encode_dataset(random_dataset(rng, 3, 2));
  std::vector<std::uint8_t> cut(bytes.begin(), bytes.end() - 3);
  try {
    decode_dataset(cut);
    FAIL("truncated input accepted");
  } catch (const ParseError& e) {
    CHECK(e.offset() > 24);
    CHECK(e.offset() < cut.size());
    CHECK(std::string(e.what()).find("offset") != std::string::npos);
  }

  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_dataset(bad), ParseError);
  auto version = bytes;
  version[4] = 9;
  try {
    decode_dataset(version);
    FAIL("bad version accepted");
  } catch (const ParseError& e) {
    CHECK(e.offset() == 4);
  }
  std::vector<std::uint8_t> header_only(bytes.begin(), bytes.begin() + 10);
  CHECK_THROWS_AS(decode_dataset(header_only), ParseError);
}

TEST_CASE("empty PPFM file is a valid empty dataset") {
  FeatureMapDataset ds;
  ds.height = 2;
  ds.width = 2;
  ds.depth = 3;
  const auto back = decode_dataset(encode_dataset(ds));
  CHECK(back.size() == 0);
  CHECK(back.num_classes() == 0);
  CHECK(back.height == 2);
}

TEST_CASE("dataset validation") {
  std::mt19937_64 rng(2);
  auto ds = random_dataset(rng, 4, 2);
  CHECK_NOTHROW(ds.validate());
  ds.samples[1].label = 3;  // class 1 now empty
  ds.samples[3].label = 3;
  CHECK_THROWS_AS(ds.validate(), DataError);
}

TEST_CASE("synthetic generator examples") {
  auto spec = small_spec();
  spec.shared_fraction = 0.0;
  const auto disjoint = generate_synthetic(spec);
  std::set<std::size_t> seen;
  for (const auto& parts : disjoint.manifest.class_parts) {
    for (std::size_t p : parts) CHECK(seen.insert(p).second);
  }

  SyntheticSpec two = small_spec();
  two.classes = 2;
  two.parts = 3;
  two.parts_per_class = 3;
  two.shared_fraction = 1.0;
  const auto shared = generate_synthetic(two);
  auto a = shared.manifest.class_parts[0], b = shared.manifest.class_parts[1];
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  CHECK(a == b);

  // nearest-part oracle at the default noise levels
  const auto full = generate_synthetic(SyntheticSpec{});
  CHECK(full.manifest.oracle_accuracy == 1.0);
  CHECK(nearest_part_accuracy(full.dataset, full.manifest) == 1.0);
}

TEST_CASE("synthetic spec errors") {
  auto spec = small_spec();
  spec.parts_per_class = 17;  // 4x4 grid
  spec.parts = 40;
  CHECK_THROWS_AS(generate_synthetic(spec), ParameterError);
  spec = small_spec();
  spec.parts_per_class = 13;
  CHECK_THROWS_AS(generate_synthetic(spec), ParameterError);
  spec = small_spec();
  spec.shared_fraction = 1.5;
  CHECK_THROWS_AS(generate_synthetic(spec), ParameterError);
  spec = small_spec();
  spec.sigma = -0.1;
  CHECK_THROWS_AS(generate_synthetic(spec), ParameterError);
}

TEST_CASE("default design spreads every part over two classes") {
  const auto syn = generate_synthetic(SyntheticSpec{});
  std::vector<std::size_t> uses(30, 0);
  for (const auto& parts : syn.manifest.class_parts) {
    CHECK(parts.size() == 3);
    for (std::size_t p : parts) ++uses[p];
  }
  for (std::size_t u : uses) CHECK(u == 2);
  for (std::size_t a = 0; a < 20; ++a) {
    for (std::size_t b = a + 1; b < 20; ++b) CHECK(syn.manifest.shared_parts(a, b) <= 1);
  }
}

TEST_CASE("generator is deterministic") {
  const auto spec = small_spec();
  const auto a = generate_synthetic(spec);
  const auto b = generate_synthetic(spec);
  CHECK(encode_dataset(a.dataset) == encode_dataset(b.dataset));
  CHECK(a.manifest.class_parts == b.manifest.class_parts);
  REQUIRE(a.manifest.placements.size() == b.manifest.placements.size());
  for (std::size_t i = 0; i < a.manifest.placements.size(); ++i) {
    CHECK(a.manifest.placements[i].row == b.manifest.placements[i].row);
    CHECK(a.manifest.placements[i].col == b.manifest.placements[i].col);
  }
  auto other = spec;
  other.seed = spec.seed + 1;
  CHECK(encode_dataset(generate_synthetic(other).dataset) != encode_dataset(a.dataset));
}

TEST_CASE("planted parts are recoverable") {
  const SyntheticSpec spec;
  const auto syn = generate_synthetic(spec);
  const auto& ds = syn.dataset;
  const double bound = static_cast<double>(spec.depth) * spec.jitter * spec.jitter + 1e-3;
  for (std::size_t g = 0; g < spec.parts; ++g) {
    double best = INFINITY;
    for (const auto& s : ds.samples) {
      for (std::size_t loc = 0; loc < ds.locations(); ++loc) {
        double d2 = 0.0;
        for (std::size_t d = 0; d < ds.depth; ++d) {
          const double diff = s.features[loc * ds.depth + d] - syn.manifest.part_vectors.at(g, d);
          d2 += diff * diff;
        }
        best = std::min(best, d2);
      }
    }
    CHECK(best <= bound);
  }
  // every placement is on the grid and distinct within its sample
  std::set<std::tuple<std::size_t, std::size_t, std::size_t>> cells;
  for (const auto& p : syn.manifest.placements) {
    CHECK(p.row < spec.height);
    CHECK(p.col < spec.width);
    CHECK(cells.insert({p.sample, p.row, p.col}).second);
  }
}

TEST_CASE("manifest round trip") {
  const auto syn = generate_synthetic(small_spec());
  const auto dir = temp_dir("manifest");
  write_manifest(syn.manifest, dir / "m");
  CHECK(fs::exists(dir / "m.classes.csv"));
  CHECK(fs::exists(dir / "m.placements.csv"));
  const auto back = read_manifest(dir / "m");
  CHECK(back.class_parts == syn.manifest.class_parts);
  CHECK(back.placements.size() == syn.manifest.placements.size());
}

TEST_CASE("stratified split") {
  FeatureMapDataset ds;
  ds.height = ds.width = ds.depth = 1;
  for (std::size_t i = 0; i < 30; ++i) ds.samples.push_back(Sample{static_cast<std::uint32_t>(i % 3), {double(i)}});
  const auto a = split(ds, 0.2, 4);
  const auto b = split(ds, 0.2, 4);
  CHECK(a.train_index == b.train_index);
  CHECK(a.val_index == b.val_index);
  CHECK(a.train.class_counts() == std::vector<std::size_t>{8, 8, 8});
  CHECK(a.val.class_counts() == std::vector<std::size_t>{2, 2, 2});

  std::vector<std::size_t> all = a.train_index;
  all.insert(all.end(), a.val_index.begin(), a.val_index.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 30; ++i) CHECK(all[i] == i);

  CHECK_THROWS_AS(split(ds, 0.0, 1), ParameterError);
  CHECK_THROWS_AS(split(ds, 1.0, 1), ParameterError);
  FeatureMapDataset tiny;
  tiny.height = tiny.width = tiny.depth = 1;
  tiny.samples = {Sample{0, {1.0}}, Sample{0, {2.0}}, Sample{1, {3.0}}};
  CHECK_THROWS_AS(split(tiny, 0.5, 1), DataError);
}
