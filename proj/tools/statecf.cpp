// statecf: data generation, training, gradient checking, evaluation and
// report comparison.
//
// Exit codes: 0 success, 2 config or schema error, 3 I/O error,
// 4 numerical divergence, 5 gradient check failure.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "statecf/config.hpp"
#include "statecf/eval.hpp"
#include "statecf/gradcheck.hpp"
#include "statecf/rng.hpp"
#include "statecf/trainer.hpp"
#include "statecf/world.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace statecf;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitDivergence = 4;
constexpr int kExitGradcheck = 5;

constexpr const char* kConfigFile = "config.cfg";
constexpr const char* kWorldFile = "world.json";
constexpr const char* kManifestFile = "manifest.json";
constexpr const char* kCheckpointFile = "model.ckpt";
constexpr const char* kRunLogFile = "run_log.jsonl";
constexpr const char* kValReportFile = "val_report.txt";

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot read '{}'", path.string()));
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const fs::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(fmt::format("cannot write '{}'", path.string()));
  out << text;
  if (!out) throw IoError(fmt::format("write to '{}' failed", path.string()));
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(fmt::format("cannot create '{}': {}", dir.string(), ec.message()));
}

std::string hash_hex(std::string_view bytes) { return fmt::format("{:016x}", fnv1a(bytes)); }

std::string file_hash(const fs::path& path) { return hash_hex(read_file(path)); }

RunConfig resolve_config(const std::string& path, std::optional<std::uint64_t> seed) {
  RunConfig c = path.empty() ? RunConfig{} : load_config(path);
  if (seed) c.seed = *seed;
  c.sync();
  c.validate();
  return c;
}

struct LoadedData {
  world::World world;
  world::Dataset train, val, test;
  std::string manifest_hash;
};

// The dataset's world must be the one the config describes.
LoadedData load_data(const fs::path& dir, const RunConfig& config, bool need_train = true) {
  const world::WorldConfig stored = world::world_from_json(read_file(dir / kWorldFile));
  if (!(stored == config.data.world)) {
    throw ConfigError(fmt::format("dataset '{}' was generated for a different world (seed {} vs {}); "
                                  "regenerate it or pass the matching config and seed",
                                  dir.string(), stored.seed, config.data.world.seed));
  }
  LoadedData d{world::World(stored), {}, {}, {}, file_hash(dir / kManifestFile)};
  if (need_train) d.train = world::load_dataset((dir / "train.jsonl").string());
  d.val = world::load_dataset((dir / "val.jsonl").string());
  d.test = world::load_dataset((dir / "test.jsonl").string());
  return d;
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
};

int gen_data(const GenArgs& a) {
  const RunConfig c = resolve_config(a.config, a.seed);
  const world::World w(c.data.world);
  const fs::path out(a.out);
  make_dir(out);
  json manifest;
  manifest["seed"] = c.seed;
  manifest["config_hash"] = hash_hex(to_text(c));
  for (std::string_view split : world::kSplits) {
    const world::Dataset data = world::generate_split(w, c.data, split, a.threads);
    const fs::path file = out / fmt::format("{}.jsonl", split);
    world::save_dataset(file.string(), data);
    manifest["splits"][std::string(split)] = {
        {"file", file.filename().string()}, {"records", data.size()}, {"hash", file_hash(file)}};
  }
  write_file(out / kConfigFile, to_text(c));
  write_file(out / kWorldFile, world::world_to_json(c.data.world));
  manifest["world_hash"] = file_hash(out / kWorldFile);
  write_file(out / kManifestFile, manifest.dump(2) + "\n");
  std::cout << fmt::format("wrote {} (train {}, val {}, test {} videos)\n", out.string(),
                           manifest["splits"]["train"]["records"].get<std::size_t>(),
                           manifest["splits"]["val"]["records"].get<std::size_t>(),
                           manifest["splits"]["test"]["records"].get<std::size_t>());
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, data, out;
  std::optional<std::uint64_t> seed;
  bool ablate_cf = false;
  bool skip_eval = false;
};

int train_cmd(const TrainArgs& a) {
  RunConfig c = resolve_config(a.config, a.seed);
  if (a.ablate_cf) c.train.ablate_cf = true;
  const LoadedData d = load_data(a.data, c);
  const fs::path out(a.out);
  make_dir(out);

  std::ofstream log(out / kRunLogFile, std::ios::binary);
  if (!log) throw IoError(fmt::format("cannot write '{}'", (out / kRunLogFile).string()));
  json header;
  header["event"] = "start";
  header["ablate_cf"] = c.train.ablate_cf;
  header["seed"] = c.seed;
  header["config_hash"] = hash_hex(to_text(c));
  header["data_manifest_hash"] = d.manifest_hash;
  log << header.dump() << "\n";

  train::Trainer trainer(d.world, d.train, c);
  std::size_t clipped = 0;
  try {
    trainer.run([&](const train::StepRecord& r) {
      log << train::to_json(r) << "\n";
      if (r.clipped) ++clipped;
    });
  } catch (const DivergenceError&) {
    log.flush();
    throw;
  }
  log.flush();
  trainer.save((out / kCheckpointFile).string());
  write_file(out / kConfigFile, to_text(c));

  json manifest;
  manifest["seed"] = c.seed;
  manifest["ablate_cf"] = c.train.ablate_cf;
  manifest["config_hash"] = hash_hex(to_text(c));
  manifest["data_manifest_hash"] = d.manifest_hash;
  manifest["checkpoint_hash"] = file_hash(out / kCheckpointFile);
  write_file(out / kManifestFile, manifest.dump(2) + "\n");

  std::cout << fmt::format("trained {} child + {} parent steps ({} clipped); checkpoint {}\n",
                           trainer.child_steps(), trainer.parent_steps(), clipped,
                           (out / kCheckpointFile).string());
  if (!a.skip_eval) {
    const eval::EvalData data{&d.train, &d.val, &d.val};
    const eval::MetricReport report = eval::evaluate(trainer.model(), d.world, data, c);
    write_file(out / kValReportFile, eval::to_text(report));
    std::cout << eval::to_text(report);
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, config, data, out;
  std::optional<std::uint64_t> seed;
  bool untrained = false;
};

int eval_cmd(const EvalArgs& a) {
  RunConfig c;
  train::Model model;
  if (a.untrained) {
    c = resolve_config(a.config, a.seed);
    model = train::Model(c.model, derive_seed(c.seed, "init"));
  } else {
    if (a.checkpoint.empty()) throw ConfigError("--checkpoint is required unless --untrained is given");
    if (!fs::exists(a.checkpoint)) throw IoError(fmt::format("checkpoint '{}' does not exist", a.checkpoint));
    train::Checkpoint ckpt = train::read_checkpoint(a.checkpoint);
    c = ckpt.config;
    model = std::move(ckpt.model);
  }
  const LoadedData d = load_data(a.data, c);
  const eval::MetricReport report = eval::evaluate(model, d.world, {&d.train, &d.val, &d.test}, c);
  const std::string text = eval::to_text(report);
  if (a.out.empty() || a.out == "-") {
    std::cout << text;
  } else {
    write_file(a.out, text);
    std::cout << text;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct GradArgs {
  std::string config;
  std::uint64_t seed = 7;
  std::size_t seeds = 20;
  std::string corrupt_op;
};

int gradcheck_cmd(const GradArgs& a) {
  const RunConfig c = resolve_config(a.config, std::nullopt);
  gc::Options o;
  o.root_seed = a.seed;
  o.seeds = a.seeds;
  if (!a.corrupt_op.empty()) {
    o.corrupt_gradient = ad::op_from_name(a.corrupt_op);
    if (!o.corrupt_gradient) throw ConfigError(fmt::format("unknown op '{}'", a.corrupt_op), 0, "corrupt-op");
  }
  const gc::Report r = gc::run(c.loss, o);
  std::cout << gc::to_text(r);
  if (r.passed()) return kExitOk;
  std::vector<std::string> failing;
  for (const auto& comp : r.components) {
    if (!comp.passed) failing.push_back(comp.name);
  }
  std::cerr << fmt::format("gradient check failed: {}", fmt::join(failing, ", "));
  if (!r.suspect_ops.empty()) std::cerr << fmt::format(" (op: {})", fmt::join(r.suspect_ops, ", "));
  std::cerr << "\n";
  return kExitGradcheck;
}

// ---------------------------------------------------------------------------

int compare_cmd(const std::string& path_a, const std::string& path_b) {
  eval::MetricReport a, b;
  try {
    a = eval::parse_report(read_file(path_a));
  } catch (const ConfigError& e) {
    throw ConfigError(fmt::format("{}: {}", path_a, e.what()), e.line(), e.field());
  }
  try {
    b = eval::parse_report(read_file(path_b));
  } catch (const ConfigError& e) {
    throw ConfigError(fmt::format("{}: {}", path_b, e.what()), e.line(), e.field());
  }
  const auto deltas = eval::compare(a, b);
  std::cout << fmt::format("{:<18} {:>14} {:>14} {:>14}\n", "metric", "A", "B", "B - A");
  for (const auto& d : deltas) {
    std::cout << fmt::format("{:<18} {:>14.6f} {:>14.6f} {:>14.6f}\n", d.key, d.a, d.b, d.b - d.a);
  }
  return kExitOk;
}

std::string report_schema() {
  return R"(Report format (eval, train): one "key=value" line per metric, 6 decimals.
  phase_f1          early/late frame probe, macro F1 in percent
  map_at_10         frame retrieval mAP@10 by state label, in [0, 1]
  seg_f1_10         segmental F1 at IoU 0.10, percent
  seg_f1_25         segmental F1 at IoU 0.25, percent
  seg_f1_50         segmental F1 at IoU 0.50, percent
  seg_edit          segmental edit score, percent
  seg_acc           frame accuracy, percent
  eda               error detection accuracy (balanced), percent
  eda_threshold     cosine threshold chosen on the validation split
  ranking_accuracy  videos closer to their summary than to every counterfactual, percent
  meta.seed, meta.map_queries_excluded
                    run metadata lines

Exit codes: 0 ok, 2 config or schema, 3 I/O, 4 divergence, 5 gradient check.)";
}

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    std::cerr << "config error";
    if (e.line()) std::cerr << " at line " << e.line();
    if (!e.field().empty()) std::cerr << " (" << e.field() << ")";
    std::cerr << ": " << e.what() << "\n";
    return kExitConfig;
  } catch (const VocabError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged in " << e.term() << ": " << e.what() << "\n";
    return kExitDivergence;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical counterfactual-aware contrastive pretraining on a synthetic procedural world"};
  app.footer(report_schema());
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate train/val/test splits and a manifest");
  gen_cmd->add_option("--config", gen.config, "Config file (key = value); defaults apply when omitted");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--seed", gen.seed, "Root seed, overrides the config");
  gen_cmd->add_option("--threads", gen.threads, "Worker threads; output does not depend on it")
      ->check(CLI::Range(1u, 256u));

  TrainArgs tr;
  auto* train_sub = app.add_subcommand("train", "Train; writes model.ckpt, run_log.jsonl, val_report.txt");
  train_sub->add_option("--config", tr.config, "Config file; defaults apply when omitted");
  train_sub->add_option("--data", tr.data, "Directory written by gen-data")->required();
  train_sub->add_option("--out", tr.out, "Output directory")->required();
  train_sub->add_option("--seed", tr.seed, "Root seed, overrides the config");
  train_sub->add_flag("--ablate-cf", tr.ablate_cf, "Drop every counterfactual term from the losses");
  train_sub->add_flag("--skip-eval", tr.skip_eval, "Do not write the validation report");

  GradArgs ga;
  auto* grad_sub = app.add_subcommand("gradcheck", "Finite-difference check of every loss and the aggregator");
  grad_sub->add_option("--config", ga.config, "Config file supplying the loss parameters");
  grad_sub->add_option("--seed", ga.seed, "Root seed of the random instances");
  grad_sub->add_option("--seeds", ga.seeds, "Instances per component")->check(CLI::Range(1, 1000));
  grad_sub->add_option("--corrupt-op", ga.corrupt_op, "Break one backward rule (self-test)")->group("");

  EvalArgs ev;
  auto* eval_sub = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  eval_sub->add_option("--checkpoint", ev.checkpoint, "Checkpoint written by train");
  eval_sub->add_option("--data", ev.data, "Directory written by gen-data")->required();
  eval_sub->add_option("--out", ev.out, "Report path; '-' or omitted prints only");
  eval_sub->add_flag("--untrained", ev.untrained, "Evaluate a freshly initialized model instead");
  eval_sub->add_option("--config", ev.config, "Config for --untrained");
  eval_sub->add_option("--seed", ev.seed, "Root seed for --untrained, overrides the config");

  std::string report_a, report_b;
  auto* cmp_sub = app.add_subcommand("compare", "Print per-metric deltas between two reports");
  cmp_sub->add_option("report_a", report_a, "Baseline report")->required();
  cmp_sub->add_option("report_b", report_b, "Report to compare")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  if (*gen_cmd) return guarded([&] { return gen_data(gen); });
  if (*train_sub) return guarded([&] { return train_cmd(tr); });
  if (*grad_sub) return guarded([&] { return gradcheck_cmd(ga); });
  if (*eval_sub) return guarded([&] { return eval_cmd(ev); });
  if (*cmp_sub) return guarded([&] { return compare_cmd(report_a, report_b); });
  return kExitConfig;
}
