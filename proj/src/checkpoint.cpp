#include "protopool/checkpoint.hpp"

#include <charconv>
#include <cmath>
#include <sstream>
#include <system_error>

#include "binary_io.hpp"

namespace protopool::train {

namespace {

constexpr std::string_view kMagic = "PPCK";

// Reserved metadata keys.
constexpr const char* kClasses = "model.classes";
constexpr const char* kSlots = "model.slots";
constexpr const char* kEpsilon = "model.epsilon";
constexpr const char* kFocal = "model.focal";
constexpr const char* kTau = "model.tau";
constexpr const char* kNoise = "model.noise";
constexpr const char* kGumbel = "model.gumbel";
constexpr const char* kEpoch = "run.epoch";
constexpr const char* kPhase = "run.phase";
constexpr const char* kRng = "run.rng_state";

constexpr const char* kReserved[] = {kClasses, kSlots, kEpsilon, kFocal, kTau,
                                     kNoise,   kGumbel, kEpoch,  kPhase, kRng};

bool is_reserved(const std::string& key) {
  for (const char* r : kReserved) {
    if (key == r) return true;
  }
  return false;
}

void put_array(detail::ByteWriter& w, std::string_view name, const Tensor& t) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  for (double x : t.data()) w.f64(x);
}

std::size_t parse_size(const std::string& text, const std::string& what) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw DataError("checkpoint field " + what + " is not an unsigned integer: '" + text + "'");
  }
  return v;
}

bool parse_flag(const std::string& text, const std::string& what) {
  if (text == "1") return true;
  if (text == "0") return false;
  throw DataError("checkpoint field " + what + " must be 0 or 1");
}

}  // namespace

std::string format_double(double x) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
  if (ec != std::errc()) throw NumericError("cannot format double");
  return std::string(buf, ptr);
}

double parse_double(const std::string& text, const std::string& what) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty()) {
    throw ParameterError(what + ": not a number: '" + text + "'");
  }
  return v;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  const ProtoPoolModel& m = ckpt.model;
  m.check_consistent();

  std::map<std::string, std::string> meta;
  for (const auto& [k, v] : ckpt.metadata) {
    if (is_reserved(k)) throw ParameterError("metadata key '" + k + "' is reserved");
    meta[k] = v;
  }
  meta[kClasses] = std::to_string(m.slots.classes);
  meta[kSlots] = std::to_string(m.slots.slots);
  meta[kEpsilon] = format_double(m.epsilon);
  meta[kFocal] = m.focal ? "1" : "0";
  meta[kTau] = format_double(m.slots.tau);
  meta[kNoise] = m.slots.noise_enabled ? "1" : "0";
  meta[kGumbel] = std::string(to_string(m.slots.variant));
  meta[kEpoch] = std::to_string(ckpt.epoch);
  meta[kPhase] = ckpt.phase;
  meta[kRng] = ckpt.rng_state;

  detail::ByteWriter w;
  w.raw(kMagic);
  w.u32(kCheckpointVersion);
  w.u32(5);
  put_array(w, "addon.weight", m.addon.weight);
  put_array(w, "addon.bias", m.addon.bias);
  put_array(w, "pool.prototypes", m.pool.prototypes);
  put_array(w, "slots.logits", m.slots.logits);
  put_array(w, "head.weights", m.head.weights);
  w.u32(static_cast<std::uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    w.str(k);
    w.str(v);
  }
  return std::move(w.bytes());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (r.raw(kMagic.size(), "magic") != kMagic) throw ParseError("bad checkpoint magic", 0);
  const std::size_t version_at = r.offset();
  if (const auto v = r.u32("version"); v != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(v), version_at);
  }

  std::map<std::string, Tensor> arrays;
  const std::uint32_t count = r.u32("array count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    std::string name = r.str("array name");
    const std::uint32_t rank = r.u32("array rank");
    if (rank > 8) throw ParseError("implausible rank for array " + name, at);
    Shape shape(rank);
    for (auto& d : shape) d = r.u32("array dims");
    const std::size_t n = ad::shape_numel(shape);
    r.need(n * 8, "array values");
    std::vector<double> values(n);
    for (double& x : values) x = r.f64("array values");
    if (!arrays.emplace(name, Tensor(std::move(shape), std::move(values))).second) {
      throw ParseError("duplicate array " + name, at);
    }
  }

  std::map<std::string, std::string> meta;
  const std::uint32_t pairs = r.u32("metadata count");
  for (std::uint32_t i = 0; i < pairs; ++i) {
    const std::size_t at = r.offset();
    std::string key = r.str("metadata key");
    std::string value = r.str("metadata value");
    if (!meta.emplace(std::move(key), std::move(value)).second) throw ParseError("duplicate metadata key", at);
  }
  if (r.remaining() != 0) throw ParseError("trailing bytes after checkpoint", r.offset());

  auto array = [&](const char* name) {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw DataError(std::string("checkpoint lacks array ") + name);
    Tensor t = std::move(it->second);
    arrays.erase(it);
    return t;
  };
  auto take = [&](const char* key) {
    auto it = meta.find(key);
    if (it == meta.end()) throw DataError(std::string("checkpoint lacks metadata ") + key);
    std::string v = std::move(it->second);
    meta.erase(it);
    return v;
  };

  Checkpoint ckpt;
  ProtoPoolModel& m = ckpt.model;
  m.addon.weight = array("addon.weight");
  m.addon.bias = array("addon.bias");
  m.pool.prototypes = array("pool.prototypes");
  m.slots.logits = array("slots.logits");
  m.head.weights = array("head.weights");
  if (!arrays.empty()) throw DataError("checkpoint has unknown array " + arrays.begin()->first);

  m.slots.classes = parse_size(take(kClasses), kClasses);
  m.slots.slots = parse_size(take(kSlots), kSlots);
  m.head.classes = m.slots.classes;
  m.head.slots = m.slots.slots;
  m.epsilon = parse_double(take(kEpsilon), kEpsilon);
  m.focal = parse_flag(take(kFocal), kFocal);
  m.slots.tau = parse_double(take(kTau), kTau);
  m.slots.noise_enabled = parse_flag(take(kNoise), kNoise);
  try {
    m.slots.variant = parse_gumbel_variant(take(kGumbel));
  } catch (const ParameterError& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
  ckpt.epoch = parse_size(take(kEpoch), kEpoch);
  ckpt.phase = take(kPhase);
  ckpt.rng_state = take(kRng);
  ckpt.metadata = std::move(meta);

  try {
    m.check_consistent();
  } catch (const std::exception& e) {
    throw DataError(std::string("inconsistent checkpoint: ") + e.what());
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  detail::write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path));
}

Checkpoint make_checkpoint(const TrainResult& result, const TrainConfig& config) {
  Checkpoint ckpt;
  ckpt.model = result.model;
  ckpt.model.addon.weight.requires_grad = false;
  ckpt.model.addon.bias.requires_grad = false;
  ckpt.model.pool.prototypes.requires_grad = false;
  ckpt.model.slots.logits.requires_grad = false;
  ckpt.model.head.weights.requires_grad = false;
  ckpt.epoch = result.epochs_run;
  ckpt.phase = result.phase;
  ckpt.rng_state = result.rng_state;

  const Schedule& s = config.schedule;
  auto& meta = ckpt.metadata;
  if (result.epochs_run > 0) meta["schedule.tau"] = format_double(temperature(result.epochs_run, s));
  meta["schedule.alpha"] = format_double(s.alpha);
  meta["schedule.tau_floor"] = format_double(s.tau_floor);
  meta["schedule.tau_switch_epoch"] = std::to_string(s.tau_switch_epoch);
  meta["schedule.joint_epochs"] =
      std::to_string(result.epochs_run > s.warmup_epochs ? result.epochs_run - s.warmup_epochs : 0);
  meta["metrics.pre_projection_val_acc"] = format_double(result.pre_projection_val_acc);
  meta["metrics.post_projection_val_acc"] = format_double(result.post_projection_val_acc);
  meta["metrics.final_val_acc"] = format_double(result.final_val_acc);
  return ckpt;
}

}  // namespace protopool::train
