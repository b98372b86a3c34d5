#include "protopool/run.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include "protopool/checkpoint.hpp"

namespace protopool {

RunData prepare_data(RunConfig& config) {
  RunData out;
  data::FeatureMapDataset all;
  if (config.dataset.empty()) {
    auto syn = data::generate_synthetic(config.synth);
    all = std::move(syn.dataset);
    out.manifest = std::move(syn.manifest);
  } else {
    all = data::read_dataset(config.dataset);
    all.validate();
    if (all.size() == 0) throw DataError("dataset " + config.dataset + " is empty");
    config.synth.classes = all.num_classes();
    config.synth.height = all.height;
    config.synth.width = all.width;
    config.synth.depth = all.depth;
    config.train.depth = all.depth;
  }
  auto parts = data::split(all, config.val_fraction, config.train.seed);
  out.train = std::move(parts.train);
  out.val = std::move(parts.val);
  return out;
}

std::size_t worker_threads() {
  const char* env = std::getenv("PROTOPOOL_THREADS");
  if (env == nullptr || *env == '\0') return std::max(1u, std::thread::hardware_concurrency());
  const std::string text(env);
  std::size_t n = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), n);
  if (ec != std::errc() || ptr != text.data() + text.size() || n == 0) {
    throw ParameterError("PROTOPOOL_THREADS must be a positive integer, got '" + text + "'");
  }
  return n;
}

std::vector<AblationArm> ablation_arms(const train::TrainConfig& base) {
  std::vector<AblationArm> arms(4, AblationArm{"", base});
  arms[0].name = "full";
  arms[1].name = "no_gumbel";
  arms[1].config.gumbel = GumbelVariant::off;
  arms[2].name = "no_orth";
  arms[2].config.orth = false;
  arms[3].name = "no_focal";
  arms[3].config.focal = false;
  return arms;
}

std::vector<AblationRow> run_ablation(const std::vector<AblationArm>& arms, const RunData& data, std::size_t threads) {
  std::vector<AblationRow> rows(arms.size());
  std::vector<std::exception_ptr> errors(arms.size());
  std::atomic<std::size_t> next{0};

  auto worker = [&] {
    for (std::size_t i = next++; i < arms.size(); i = next++) {
      try {
        const auto& arm = arms[i];
        AblationRow& row = rows[i];
        row.arm = arm.name;
        row.gumbel = arm.config.gumbel;
        row.orth = arm.config.orth;
        row.focal = arm.config.focal;
        row.result = train::train(data.train, data.val, arm.config);
        const auto& converged = row.result.converged ? *row.result.converged : row.result.model;
        row.val_acc = row.result.final_val_acc;
        row.pre_projection_val_acc = row.result.pre_projection_val_acc;
        row.post_projection_val_acc = row.result.post_projection_val_acc;
        row.binarized = train::binarized_fraction(converged.slots);
        row.max_q_median = train::max_q_median(converged.slots);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };

  const std::size_t n = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(1, arms.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << kAblationHeader << '\n';
  for (const auto& r : rows) {
    out << r.arm << ',' << to_string(r.gumbel) << ',' << (r.orth ? "on" : "off") << ',' << (r.focal ? "on" : "off")
        << ',' << train::format_double(r.val_acc) << ',' << train::format_double(r.pre_projection_val_acc) << ','
        << train::format_double(r.post_projection_val_acc) << ',' << train::format_double(r.binarized) << ','
        << train::format_double(r.max_q_median) << '\n';
  }
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace protopool
