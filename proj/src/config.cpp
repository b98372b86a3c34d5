#include "protopool/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <system_error>

#include "protopool/checkpoint.hpp"

namespace protopool {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::size_t to_size(std::string_view key, std::string_view text) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || ec != std::errc() || ptr != text.data() + text.size()) {
    throw ParameterError(std::string(key) + ": expected a non-negative integer, got '" + std::string(text) + "'");
  }
  return v;
}

std::uint64_t to_u64(std::string_view key, std::string_view text) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || ec != std::errc() || ptr != text.data() + text.size()) {
    throw ParameterError(std::string(key) + ": expected a non-negative integer, got '" + std::string(text) + "'");
  }
  return v;
}

double to_double(std::string_view key, std::string_view text) {
  return train::parse_double(std::string(text), std::string(key));
}

bool to_switch(std::string_view key, std::string_view text) {
  if (text == "on" || text == "true" || text == "1") return true;
  if (text == "off" || text == "false" || text == "0") return false;
  throw ParameterError(std::string(key) + ": expected on or off, got '" + std::string(text) + "'");
}

std::string from_switch(bool b) { return b ? "on" : "off"; }

struct Field {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

#define PP_SIZE(name, member)                                                   \
  Field {                                                                       \
    name, [](const RunConfig& c) { return std::to_string(c.member); },          \
        [](RunConfig& c, std::string_view v) { c.member = to_size(name, v); } \
  }
#define PP_DOUBLE(name, member)                                                   \
  Field {                                                                         \
    name, [](const RunConfig& c) { return train::format_double(c.member); },      \
        [](RunConfig& c, std::string_view v) { c.member = to_double(name, v); } \
  }
#define PP_SWITCH(name, member)                                                   \
  Field {                                                                         \
    name, [](const RunConfig& c) { return from_switch(c.member); },               \
        [](RunConfig& c, std::string_view v) { c.member = to_switch(name, v); } \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"dataset", [](const RunConfig& c) { return c.dataset; },
       [](RunConfig& c, std::string_view v) { c.dataset = std::string(v); }},
      {"out", [](const RunConfig& c) { return c.out; },
       [](RunConfig& c, std::string_view v) { c.out = std::string(v); }},
      {"seed", [](const RunConfig& c) { return std::to_string(c.train.seed); },
       [](RunConfig& c, std::string_view v) {
         c.train.seed = to_u64("seed", v);
         c.synth.seed = c.train.seed;
       }},
      PP_SIZE("classes", synth.classes),
      PP_SIZE("slots", train.slots),
      PP_SIZE("prototypes", train.prototypes),
      {"depth", [](const RunConfig& c) { return std::to_string(c.train.depth); },
       [](RunConfig& c, std::string_view v) {
         c.train.depth = to_size("depth", v);
         c.synth.depth = c.train.depth;
       }},
      PP_SIZE("height", synth.height),
      PP_SIZE("width", synth.width),
      PP_SIZE("parts", synth.parts),
      PP_SIZE("parts_per_class", synth.parts_per_class),
      PP_DOUBLE("shared", synth.shared_fraction),
      PP_DOUBLE("sigma", synth.sigma),
      PP_DOUBLE("jitter", synth.jitter),
      PP_DOUBLE("background_offset", synth.background_offset),
      PP_SIZE("samples_per_class", synth.samples_per_class),
      PP_DOUBLE("val_fraction", val_fraction),
      {"gumbel", [](const RunConfig& c) { return std::string(to_string(c.train.gumbel)); },
       [](RunConfig& c, std::string_view v) { c.train.gumbel = parse_gumbel_variant(v); }},
      PP_SWITCH("orth", train.orth),
      PP_SWITCH("focal", train.focal),
      PP_DOUBLE("epsilon", train.epsilon),
      PP_DOUBLE("w_entropy", train.weights.entropy),
      PP_DOUBLE("w_clst", train.weights.clst),
      PP_DOUBLE("w_sep", train.weights.sep),
      PP_DOUBLE("w_orth", train.weights.orth),
      PP_DOUBLE("w_l1", train.weights.l1),
      {"tau_schedule",
       [](const RunConfig& c) {
         return std::string(c.train.schedule.tau_schedule == train::TauSchedule::paper ? "paper" : "geometric");
       },
       [](RunConfig& c, std::string_view v) {
         if (v == "paper") {
           c.train.schedule.tau_schedule = train::TauSchedule::paper;
         } else if (v == "geometric") {
           c.train.schedule.tau_schedule = train::TauSchedule::geometric;
         } else {
           throw ParameterError("tau_schedule: expected paper or geometric, got '" + std::string(v) + "'");
         }
       }},
      PP_DOUBLE("alpha", train.schedule.alpha),
      PP_DOUBLE("tau_floor", train.schedule.tau_floor),
      PP_SIZE("tau_switch_epoch", train.schedule.tau_switch_epoch),
      PP_SIZE("epochs", train.schedule.epochs),
      PP_SIZE("warmup_epochs", train.schedule.warmup_epochs),
      PP_SIZE("patience", train.schedule.patience),
      PP_SIZE("batch_size", train.schedule.batch_size),
      PP_SWITCH("freeze_addon_warmup", train.schedule.freeze_addon_warmup),
      PP_DOUBLE("lr_addon", train.schedule.lr_addon),
      PP_DOUBLE("lr_pool", train.schedule.lr_pool),
      PP_SIZE("lr_halving_every", train.schedule.lr_halving_every),
      PP_DOUBLE("weight_decay", train.schedule.weight_decay),
      PP_DOUBLE("lr_finetune", train.schedule.lr_finetune),
      PP_SIZE("finetune_epochs", train.schedule.finetune_epochs),
      PP_DOUBLE("beta1", train.schedule.beta1),
      PP_DOUBLE("beta2", train.schedule.beta2),
      PP_DOUBLE("adam_eps", train.schedule.adam_eps),
  };
  return table;
}

#undef PP_SIZE
#undef PP_DOUBLE
#undef PP_SWITCH

const Field& find(std::string_view key) {
  for (const Field& f : fields()) {
    if (key == f.key) return f;
  }
  throw ParameterError("unknown config key '" + std::string(key) + "'");
}

}  // namespace

RunConfig::RunConfig() {
  // 800 training images give few steps per epoch at the paper's batch of 80.
  train.schedule.batch_size = 20;
  train.depth = synth.depth;
  train.seed = synth.seed;
}

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const Field& f : fields()) out.emplace_back(f.key);
    return out;
  }();
  return names;
}

void RunConfig::set(std::string_view key, std::string_view value) { find(key).set(*this, trim(value)); }

std::string RunConfig::get(std::string_view key) const { return find(key).get(*this); }

void RunConfig::validate() const {
  if (train.slots < 1 || train.slots > kMaxSlotsPerClass) {
    throw ParameterError("slots must lie in [1, " + std::to_string(kMaxSlotsPerClass) + "]");
  }
  if (synth.classes == 0 || train.prototypes == 0 || train.depth == 0 || synth.height == 0 || synth.width == 0) {
    throw ParameterError("classes, prototypes, depth, height and width must be positive");
  }
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ParameterError("val_fraction must lie in (0, 1)");
  if (out.empty()) throw ParameterError("out must not be empty");
  for (const Field& f : fields()) {
    const std::string v = f.get(*this);
    if (v.find('\n') != std::string::npos) throw ParameterError(std::string(f.key) + " must not contain a newline");
  }
  if (dataset.empty()) synth.validate();
  train.validate();
}

std::string RunConfig::serialize() const {
  std::ostringstream os;
  for (const Field& f : fields()) os << f.key << " = " << f.get(*this) << '\n';
  return os.str();
}

void RunConfig::apply(std::string_view text) {
  std::set<std::string> seen;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    const std::string line = trim(text.substr(0, nl));
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParameterError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(std::string_view(line).substr(0, eq));
    if (!seen.insert(key).second) {
      throw ParameterError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
    try {
      set(key, std::string_view(line).substr(eq + 1));
    } catch (const ParameterError& e) {
      throw ParameterError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

RunConfig RunConfig::parse(std::string_view text) {
  RunConfig c;
  c.apply(text);
  return c;
}

void RunConfig::apply_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  apply(os.str());
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  RunConfig c;
  c.apply_file(path);
  return c;
}

void RunConfig::write_resolved(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  const auto path = dir / "config.resolved";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << serialize();
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace protopool
