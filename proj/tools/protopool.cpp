// protopool: command-line front end.
//
//   protopool synth   -o ds.ppfm [--classes N --parts G --shared F --seed S ...]
//   protopool train   [-c run.cfg] [--dataset ds.ppfm] -o run/
//   protopool eval    -o run/
//   protopool project -o run/
//   protopool analyze {assignment,histogram,sharing,graph,activation,all} -o run/
//   protopool ablate  -o ablate/
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "protopool/analysis.hpp"
#include "protopool/checkpoint.hpp"
#include "protopool/config.hpp"
#include "protopool/run.hpp"

namespace fs = std::filesystem;
using namespace protopool;

namespace {

constexpr int kUsage = 1;
constexpr int kData = 2;
constexpr int kNumeric = 3;

constexpr const char* kCheckpointFile = "checkpoint.ppck";
constexpr const char* kConfigPrefix = "config.";

struct Common {
  std::string config_file;
  std::string checkpoint;
  std::map<std::string, std::string> flags;  // config key -> value, applied last
  std::vector<std::string> sets;
};

void add_flag(CLI::App* app, Common& c, const std::string& flag, const std::string& key, const std::string& help) {
  app->add_option_function<std::string>(flag, [&c, key](const std::string& v) { c.flags[key] = v; }, help);
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config_file, "key=value config file");
  add_flag(app, c, "--dataset", "dataset", "PPFM dataset (default: generated planted data)");
  add_flag(app, c, "-o,--out", "out", "output directory (synth: dataset file)");
  add_flag(app, c, "--classes", "classes", "classes C");
  add_flag(app, c, "--slots", "slots", "slots per class K (1..10)");
  add_flag(app, c, "--prototypes", "prototypes", "pool size M");
  add_flag(app, c, "--depth", "depth", "latent depth D");
  add_flag(app, c, "--epochs", "epochs", "cap on warm-up plus joint epochs");
  add_flag(app, c, "--seed", "seed", "seed for data, split and training");
  add_flag(app, c, "--gumbel", "gumbel", "paper, classic or off");
  add_flag(app, c, "--orth", "orth", "orthogonality loss on/off");
  add_flag(app, c, "--focal", "focal", "focal similarity on/off");
  add_flag(app, c, "--epsilon", "epsilon", "similarity regularizer");
  add_flag(app, c, "--parts", "parts", "ground-truth parts G");
  add_flag(app, c, "--shared", "shared", "shared fraction of each class's parts");
  add_flag(app, c, "--batch-size", "batch_size", "minibatch size");
  app->add_option("--set", c.sets, "extra key=value overrides");
}

void apply_overrides(RunConfig& cfg, const Common& c) {
  if (!c.config_file.empty()) cfg.apply_file(c.config_file);
  for (const auto& [k, v] : c.flags) cfg.set(k, v);
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ParameterError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
}

RunConfig resolve(const Common& c) {
  RunConfig cfg;
  apply_overrides(cfg, c);
  return cfg;
}

fs::path checkpoint_path(const Common& c, const RunConfig& cfg) {
  return c.checkpoint.empty() ? fs::path(cfg.out) / kCheckpointFile : fs::path(c.checkpoint);
}

void store_config(train::Checkpoint& ckpt, const RunConfig& cfg) {
  for (const auto& key : RunConfig::keys()) ckpt.metadata[kConfigPrefix + key] = cfg.get(key);
}

/// Config stored in the checkpoint, then the config file and flags on top.
std::pair<RunConfig, train::Checkpoint> resolve_with_checkpoint(const Common& c) {
  const RunConfig first = resolve(c);
  train::Checkpoint ckpt = train::load_checkpoint(checkpoint_path(c, first));
  RunConfig cfg;
  for (const auto& [k, v] : ckpt.metadata) {
    if (k.rfind(kConfigPrefix, 0) == 0) cfg.set(k.substr(std::string(kConfigPrefix).size()), v);
  }
  apply_overrides(cfg, c);
  return {cfg, std::move(ckpt)};
}

void print_result(const train::TrainResult& r) {
  std::printf("epochs %zu  pre-projection %.4f  post-projection %.4f  final %.4f  binarized %.3f\n", r.epochs_run,
              r.pre_projection_val_acc, r.post_projection_val_acc, r.final_val_acc,
              train::binarized_fraction(r.model.slots));
}

void write_run(const fs::path& dir, const RunConfig& cfg, const train::TrainResult& r) {
  fs::create_directories(dir);
  cfg.write_resolved(dir);
  auto ckpt = train::make_checkpoint(r, cfg.train);
  store_config(ckpt, cfg);
  train::save_checkpoint(ckpt, dir / kCheckpointFile);
  train::write_metrics_csv(r.log, dir / "metrics.csv");
  r.projection.write_csv(dir / "projection.csv");
}

int cmd_synth(const Common& c) {
  RunConfig cfg = resolve(c);
  if (c.flags.count("out") == 0 && cfg.out == "run") cfg.out = "synthetic.ppfm";
  const fs::path out = cfg.out;
  const auto syn = data::generate_synthetic(cfg.synth);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  data::write_dataset(syn.dataset, out);
  auto prefix = out;
  prefix.replace_extension();
  data::write_manifest(syn.manifest, prefix);
  cfg.write_resolved(out.has_parent_path() ? out.parent_path() : fs::path("."));
  std::printf("wrote %zu samples to %s (nearest-part oracle accuracy %.4f)\n", syn.dataset.size(),
              out.string().c_str(), syn.manifest.oracle_accuracy);
  return 0;
}

int cmd_train(const Common& c) {
  RunConfig cfg = resolve(c);
  RunData data = prepare_data(cfg);
  cfg.validate();
  const fs::path dir = cfg.out;
  try {
    const auto result = train::train(data.train, data.val, cfg.train);
    write_run(dir, cfg, result);
    print_result(result);
  } catch (const train::TrainingDiverged& e) {
    write_run(dir, cfg, e.last_good());
    throw;
  }
  return 0;
}

int cmd_eval(const Common& c) {
  auto [cfg, ckpt] = resolve_with_checkpoint(c);
  RunData data = prepare_data(cfg);
  cfg.write_resolved(cfg.out);
  const auto& ds = data.val;
  const auto res = train::evaluate(ckpt.model, ds, cfg.train.schedule.batch_size);
  std::printf("accuracy %.4f on %zu validation samples\n", res.accuracy, ds.size());
  for (std::size_t k = 0; k < res.per_class_accuracy.size(); ++k) {
    std::printf("  class %zu  %.4f\n", k, res.per_class_accuracy[k]);
  }
  return 0;
}

int cmd_project(const Common& c) {
  auto [cfg, ckpt] = resolve_with_checkpoint(c);
  RunData data = prepare_data(cfg);
  const fs::path dir = cfg.out;
  cfg.write_resolved(dir);
  const double before = train::evaluate(ckpt.model, data.val, cfg.train.schedule.batch_size).accuracy;
  const auto report = train::project_prototypes(ckpt.model, data.train);
  const double after = train::evaluate(ckpt.model, data.val, cfg.train.schedule.batch_size).accuracy;
  ckpt.phase = "projected";
  train::save_checkpoint(ckpt, checkpoint_path(c, cfg));
  report.write_csv(dir / "projection.csv");
  std::printf("validation accuracy %.4f before projection, %.4f after\n", before, after);
  return 0;
}

int cmd_analyze(const Common& c, const std::string& kind, std::size_t bins, bool hardened, std::size_t sample,
                std::size_t prototype) {
  auto [cfg, ckpt] = resolve_with_checkpoint(c);
  const fs::path dir = cfg.out;
  cfg.write_resolved(dir);
  const auto& model = ckpt.model;
  const auto mode = hardened ? analysis::Assignment::hardened : analysis::Assignment::relaxed;
  const bool all = kind == "all";

  if (all || kind == "assignment") {
    analysis::write_assignment_csv(analysis::assignment_matrix(model, mode), model.slots_per_class(),
                                   dir / "assignment.csv");
  }
  if (all || kind == "histogram") {
    analysis::write_histogram_csv(analysis::q_histogram(model, bins, mode), dir / "q_histogram.csv");
  }
  if (all || kind == "sharing" || kind == "graph") {
    const auto stats = analysis::sharing_stats(model);
    const auto graph = analysis::class_graph(model);
    if (all || kind == "sharing") {
      analysis::write_sharing_csv(stats, dir / "sharing.csv");
      analysis::write_sharing_summary_csv(stats, dir / "sharing_summary.csv");
      std::printf("classes per prototype %.3f +/- %.3f over %zu prototypes (%zu unassigned); per slot %.3f +/- %.3f\n",
                  stats.mean, stats.std, stats.assigned, stats.unassigned, stats.slot_mean, stats.slot_std);
    }
    if (all || kind == "graph") {
      analysis::write_graph_csv(graph, dir / "class_graph.csv");
      std::printf("class graph: %zu edges, total weight %zu\n", graph.edges.size(), graph.total_weight());
    }
    if (cfg.dataset.empty()) {
      const auto manifest = data::generate_synthetic(cfg.synth).manifest;
      std::printf("spearman vs planted sharing %.4f\n", analysis::sharing_correlation(model, manifest));
    }
  }
  if (all || kind == "activation") {
    RunData data = prepare_data(cfg);
    const auto name = "activation_s" + std::to_string(sample) + "_p" + std::to_string(prototype);
    analysis::export_activation(model, data.train, sample, prototype, dir / name);
  }
  return 0;
}

int cmd_ablate(const Common& c) {
  RunConfig cfg = resolve(c);
  RunData data = prepare_data(cfg);
  cfg.validate();
  const fs::path dir = cfg.out;
  fs::create_directories(dir);
  cfg.write_resolved(dir);
  const auto rows = run_ablation(ablation_arms(cfg.train), data, worker_threads());
  for (const auto& row : rows) {
    RunConfig arm = cfg;
    arm.out = (dir / row.arm).string();
    arm.train.gumbel = row.gumbel;
    arm.train.orth = row.orth;
    arm.train.focal = row.focal;
    write_run(arm.out, arm, row.result);
    std::printf("%-10s val %.4f  pre %.4f  post %.4f  binarized %.3f\n", row.arm.c_str(), row.val_acc,
                row.pre_projection_val_acc, row.post_projection_val_acc, row.binarized);
  }
  write_ablation_csv(rows, dir / "ablation.csv");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ProtoPool prototype-pool classifier on feature maps"};
  app.require_subcommand(1);

  Common common;
  auto* synth = app.add_subcommand("synth", "generate a planted dataset and its manifest");
  auto* train = app.add_subcommand("train", "train and write checkpoint, metrics and projection report");
  auto* eval = app.add_subcommand("eval", "print validation accuracy of a checkpoint");
  auto* project = app.add_subcommand("project", "project prototypes onto training patches");
  auto* analyze = app.add_subcommand("analyze", "export assignment, histogram, sharing, graph or activation");
  auto* ablate = app.add_subcommand("ablate", "train the full model and the three ablation arms");

  for (auto* sub : {synth, train, eval, project, analyze, ablate}) add_common(sub, common);
  for (auto* sub : {eval, project, analyze}) {
    sub->add_option("--checkpoint", common.checkpoint, "checkpoint (default: <out>/checkpoint.ppck)");
  }

  std::string kind = "all";
  std::size_t bins = 20, sample = 0, prototype = 0;
  bool hardened = false;
  analyze->add_option("kind", kind, "export kind")
      ->check(CLI::IsMember({"assignment", "histogram", "sharing", "graph", "activation", "all"}));
  analyze->add_option("--bins", bins, "histogram bins")->check(CLI::Range(2, 100000));
  analyze->add_flag("--hardened", hardened, "export one-hot rows instead of relaxed ones");
  analyze->add_option("--sample", sample, "training sample for the activation map");
  analyze->add_option("--prototype", prototype, "prototype for the activation map");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (*synth) return cmd_synth(common);
    if (*train) return cmd_train(common);
    if (*eval) return cmd_eval(common);
    if (*project) return cmd_project(common);
    if (*analyze) return cmd_analyze(common, kind, bins, hardened, sample, prototype);
    if (*ablate) return cmd_ablate(common);
  } catch (const ParameterError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const DomainError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}
