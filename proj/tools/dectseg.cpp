// dectseg: command-line entry point. Experiments are defined by a JSON run
// config; flags only carry paths and overrides.

#include <CLI11.hpp>
#include <json.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/basic_file_sink.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>

#include "dectseg/eval.hpp"
#include "dectseg/metaimage.hpp"

namespace fs = std::filesystem;
using namespace dectseg;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string runs_dir;
  std::string data_dir;
  int jobs = 1;
};

RunConfig resolve_config(const Common& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (!o.runs_dir.empty()) cfg.runs_dir = o.runs_dir;
  if (!o.data_dir.empty()) cfg.data.dir = o.data_dir;
  cfg.validate();
  if (o.jobs < 1) throw ConfigError("--jobs must be >= 1");
  return cfg;
}

DatasetManifest require_manifest(const fs::path& dir, const char* what) {
  if (!fs::exists(dir / kManifestFile)) {
    throw ConfigError(fmt::format("no {} dataset at {} (run `dectseg phantom` first)", what, dir.string()));
  }
  return load_manifest(dir);
}

CascadeCheckpoints require_model(const fs::path& dir, const UNetConfig* expected) {
  const fs::path p1 = dir / "stage1.ckpt", p2 = dir / "stage2.ckpt";
  for (const auto& p : {p1, p2}) {
    if (!fs::exists(p)) throw ConfigError(fmt::format("missing checkpoint {}", p.string()));
  }
  CascadeCheckpoints m{load_checkpoint(p1), load_checkpoint(p2)};
  if (m.stage1.meta.stage != 1 || m.stage2.meta.stage != 2) {
    throw ConfigError(fmt::format("{} does not hold a stage-1/stage-2 checkpoint pair", dir.string()));
  }
  if (!(m.stage1.meta.config == m.stage2.meta.config)) {
    throw ConfigError(fmt::format("stage checkpoints in {} disagree on the network config ({} vs {})", dir.string(),
                                  to_string(m.stage1.meta.config), to_string(m.stage2.meta.config)));
  }
  if (expected && !(m.stage1.meta.config == *expected)) {
    throw ConfigError(fmt::format("checkpoints in {} are {}, the run config asks for {}", dir.string(),
                                  to_string(m.stage1.meta.config), to_string(*expected)));
  }
  return m;
}

// Creates <runs_dir>/<subcommand>-<config hash>-<seed>, snapshots the
// config and mirrors the log into it.
fs::path open_run(const std::string& subcommand, const RunConfig& cfg) {
  const fs::path dir = cfg.runs_dir / fmt::format("{}-{}-{}", subcommand, config_hash(cfg), cfg.seed);
  fs::create_directories(dir);
  std::ofstream(dir / "config.json") << run_config_json(cfg) << '\n';
  auto file = std::make_shared<spdlog::sinks::basic_file_sink_mt>((dir / "log.txt").string(), true);
  spdlog::default_logger()->sinks().push_back(file);
  spdlog::info("run directory {}", dir.string());
  return dir;
}

// Argument-level domain checks count as validation errors.
MixConfig checked_alpha(double alpha) {
  try {
    return MixConfig(alpha);
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
}

void save_model(const CascadeCheckpoints& m, const fs::path& dir) {
  save_checkpoint(m.stage1, dir / "stage1.ckpt");
  save_checkpoint(m.stage2, dir / "stage2.ckpt");
}

void write_fold(const Fold& f, const fs::path& path) {
  nlohmann::ordered_json j;
  j["index"] = f.index;
  j["train"] = f.train;
  j["validation"] = f.validation;
  j["test"] = f.test;
  std::ofstream(path) << j.dump(2) << '\n';
}

const Fold& pick_fold(const FoldPlan& plan, int fold) {
  if (fold < 0 || fold >= static_cast<int>(plan.folds.size())) {
    throw ConfigError(fmt::format("--fold {} outside 0..{}", fold, plan.folds.size() - 1));
  }
  return plan.folds[static_cast<std::size_t>(fold)];
}

void print_report(const ReportFiles& f) {
  std::cout << f.table.string() << '\n';
  if (!f.grid.empty()) std::cout << f.grid.string() << '\n';
}

// Pretraining for crossval / alpha-study: reuse --init when given.
std::optional<CascadeCheckpoints> initial_model(const ExperimentContext& ctx, const std::string& init_dir) {
  if (!init_dir.empty()) return require_model(init_dir, &ctx.config.network);
  if (!ctx.config.pretrain) return std::nullopt;
  return pretrain(ctx, require_manifest(ctx.config.data.sect_dir(), "SECT-like"));
}

int cmd_phantom(const Common& o, int n, int sect_n, const std::string& out) {
  const RunConfig cfg = resolve_config(o);
  const int dect_n = n > 0 ? n : cfg.data.dect_cases;
  const int sect_count = sect_n >= 0 ? sect_n : cfg.data.sect_cases;
  if (n == 0 || dect_n < 1) throw ConfigError("--n must be >= 1");
  const fs::path root = out.empty() ? cfg.data.dir : fs::path(out);
  const auto dect = generate_dataset(dect_n, cfg.data.dect_base_seed, root / "dect", cfg.phantom);
  std::cout << (dect.root / kManifestFile).string() << '\n';
  if (sect_count > 0) {
    const auto sect =
        sect_like_dataset(sect_count, cfg.data.sect_base_seed, root / "sect", cfg.phantom, cfg.data.sect_noise_hu);
    std::cout << (sect.root / kManifestFile).string() << '\n';
  }
  return 0;
}

int cmd_mix(const std::string& low, const std::string& high, double alpha, const std::string& out) {
  const MixConfig mc = checked_alpha(alpha);
  const DectPair pair(read_volume(low), read_volume(high));
  write_metaimage(mix(pair, mc), out);
  std::cout << out << '\n';
  return 0;
}

int cmd_pretrain(const Common& o) {
  const RunConfig cfg = resolve_config(o);
  const auto sect = require_manifest(cfg.data.sect_dir(), "SECT-like");
  const fs::path run = open_run("pretrain", cfg);
  const ExperimentContext ctx{cfg, run / "checkpoints", o.jobs};
  save_model(pretrain(ctx, sect), run);
  std::cout << run.string() << '\n';
  return 0;
}

int cmd_train(const Common& o, const std::string& subcommand, int fold, const std::string& init_dir) {
  const RunConfig cfg = resolve_config(o);
  const auto dect = require_manifest(cfg.data.dect_dir(), "DECT");
  const FoldPlan plan = make_folds(dect.ids(), cfg.folds, cfg.seed);
  const Fold& f = pick_fold(plan, fold);
  std::optional<CascadeCheckpoints> init;
  if (!init_dir.empty()) init = require_model(init_dir, &cfg.network);
  const fs::path run = open_run(subcommand, cfg);
  const ExperimentContext ctx{cfg, run / "checkpoints", o.jobs};
  write_fold(f, run / "fold.json");
  save_model(train_fold(ctx, dect, f, cfg.alpha_training, init ? &*init : nullptr), run);
  std::cout << run.string() << '\n';
  return 0;
}

int cmd_predict(const Common& o, const std::string& model_dir, const std::string& low, const std::string& high,
                std::optional<double> alpha) {
  const RunConfig cfg = resolve_config(o);
  const CascadeCheckpoints m = require_model(model_dir, nullptr);
  const double a = alpha.value_or(cfg.alpha_test);
  checked_alpha(a);
  const DectPair pair(read_volume(low), read_volume(high));
  const fs::path run = open_run("predict", cfg);
  const LabelVolume pred = predict_cascade(pair, a, m.stage1, m.stage2, cfg.cascade_options());
  std::string stem = fs::path(low).stem().string();
  if (stem.size() > 4 && stem.ends_with("_low")) stem.resize(stem.size() - 4);
  const fs::path out = run / (stem + "_pred.mhd");
  write_metaimage(pred, out);
  std::cout << out.string() << '\n';
  return 0;
}

int cmd_evaluate(const Common& o, const std::string& model_dir, int fold) {
  const RunConfig cfg = resolve_config(o);
  const CascadeCheckpoints m = require_model(model_dir, &cfg.network);
  const auto dect = require_manifest(cfg.data.dect_dir(), "DECT");
  const FoldPlan plan = make_folds(dect.ids(), cfg.folds, cfg.seed);
  const Fold& f = pick_fold(plan, fold);
  const fs::path run = open_run("evaluate", cfg);
  const ExperimentContext ctx{cfg, {}, o.jobs};
  MetricsReport r;
  r.records = evaluate_fold(ctx, dect, f, m, m.stage2.meta.alpha_training, cfg.alpha_test);
  print_report(emit_report(r, run, "evaluate"));
  return 0;
}

int cmd_crossval(const Common& o, const std::string& init_dir) {
  const RunConfig cfg = resolve_config(o);
  const auto dect = require_manifest(cfg.data.dect_dir(), "DECT");
  if (init_dir.empty() && cfg.pretrain) require_manifest(cfg.data.sect_dir(), "SECT-like");
  const FoldPlan plan = make_folds(dect.ids(), cfg.folds, cfg.seed);
  const fs::path run = open_run("crossval", cfg);
  const ExperimentContext ctx{cfg, run / "checkpoints", o.jobs};
  const auto init = initial_model(ctx, init_dir);
  for (const Fold& f : plan.folds) write_fold(f, run / fmt::format("fold{}.json", f.index));
  const MetricsReport r = run_crossval(ctx, dect, plan, cfg.alpha_training, cfg.alpha_test, init ? &*init : nullptr,
                                       run / "partial_records.csv");
  print_report(emit_report(r, run, "crossval"));
  return 0;
}

int cmd_alpha_study(const Common& o, const std::string& init_dir) {
  const RunConfig cfg = resolve_config(o);
  const auto dect = require_manifest(cfg.data.dect_dir(), "DECT");
  if (init_dir.empty() && cfg.pretrain) require_manifest(cfg.data.sect_dir(), "SECT-like");
  const FoldPlan plan = make_folds(dect.ids(), cfg.folds, cfg.seed);
  pick_fold(plan, cfg.alpha_study_fold);
  const fs::path run = open_run("alpha-study", cfg);
  const ExperimentContext ctx{cfg, run / "checkpoints", o.jobs};
  const auto init = initial_model(ctx, init_dir);
  write_fold(plan.folds[static_cast<std::size_t>(cfg.alpha_study_fold)], run / "fold.json");
  const AlphaStudy s = run_alpha_study(ctx, dect, plan, cfg.alpha_study_fold, cfg.alpha_study_training,
                                       cfg.alpha_study_test, init ? &*init : nullptr);
  print_report(emit_report(s.report, run, "alpha-study", &s.grid));
  return 0;
}

// Rebuilds the report files from a records CSV. Records spanning several
// alpha pairs also get the grid.
int cmd_report(const std::string& records, const std::string& out) {
  const auto rows = read_records_csv(records);
  MetricsReport r;
  r.records = rows;
  std::set<double> at, as;
  for (const auto& x : rows) {
    at.insert(x.alpha_train);
    as.insert(x.alpha_test);
  }
  const fs::path dir = out.empty() ? fs::path(records).parent_path() / "report" : fs::path(out);
  const std::string id = fs::path(records).stem().string();
  std::vector<AlphaGridRow> grid;
  if (at.size() * as.size() > 1) {
    grid = alpha_grid(r, {at.begin(), at.end()}, {as.begin(), as.end()});
  }
  print_report(emit_report(r, dir, id, grid.empty() ? nullptr : &grid));
  return 0;
}

void add_common(CLI::App* sub, Common& o) {
  sub->add_option("-c,--config", o.config, "Run config (JSON)")->check(CLI::ExistingFile);
  sub->add_option("--seed", o.seed, "Override the run seed");
  sub->add_option("--runs-dir", o.runs_dir, "Override runs_dir");
  sub->add_option("--data-dir", o.data_dir, "Override data.dir");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-energy CT multi-organ segmentation toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version",
                       fmt::format("dectseg {} (checkpoint format {})", DECTSEG_VERSION, kCheckpointVersion));
  Common o;
  app.add_option("-j,--jobs", o.jobs, "Worker threads for independent folds / grid cells")
      ->check(CLI::PositiveNumber);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  int n = -1, sect_n = -1, fold = 0;
  std::string out, low, high, model, init, records;
  double mix_alpha = 0.6;
  std::optional<double> alpha;

  auto* phantom = app.add_subcommand("phantom", "Generate DECT and SECT-like phantom datasets");
  add_common(phantom, o);
  phantom->add_option("-n,--n", n, "Number of DECT cases (default: data.dect_cases)");
  phantom->add_option("--sect-n", sect_n, "Number of SECT-like cases (default: data.sect_cases, 0 skips)");
  phantom->add_option("-o,--out", out, "Output directory (default: data.dir)");

  auto* mixc = app.add_subcommand("mix", "Blend a low/high-energy pair into one volume");
  mixc->add_option("--low", low, "Low-energy volume (.mhd)")->required()->check(CLI::ExistingFile);
  mixc->add_option("--high", high, "High-energy volume (.mhd)")->required()->check(CLI::ExistingFile);
  mixc->add_option("-a,--alpha", mix_alpha, "Weight of the low-energy image")->required();
  mixc->add_option("-o,--out", out, "Output volume (.mhd)")->required();

  auto* pre = app.add_subcommand("pretrain", "Train the general model on the SECT-like corpus");
  add_common(pre, o);

  auto* train = app.add_subcommand("train", "Train one fold from scratch");
  add_common(train, o);
  train->add_option("--fold", fold, "Fold index");

  auto* fine = app.add_subcommand("finetune", "Fine-tune a pretrained model on one fold");
  add_common(fine, o);
  fine->add_option("--fold", fold, "Fold index");
  fine->add_option("--init", init, "Run directory holding stage1.ckpt and stage2.ckpt")
      ->required()
      ->check(CLI::ExistingDirectory);

  auto* predict = app.add_subcommand("predict", "Segment one low/high-energy pair");
  add_common(predict, o);
  predict->add_option("--model", model, "Directory holding stage1.ckpt and stage2.ckpt")
      ->required()
      ->check(CLI::ExistingDirectory);
  predict->add_option("--low", low, "Low-energy volume (.mhd)")->required()->check(CLI::ExistingFile);
  predict->add_option("--high", high, "High-energy volume (.mhd)")->required()->check(CLI::ExistingFile);
  predict->add_option("-a,--alpha", alpha, "Mixing weight (default: alpha_test)");

  auto* evaluate = app.add_subcommand("evaluate", "Dice of a trained model on one fold's test cases");
  add_common(evaluate, o);
  evaluate->add_option("--model", model, "Directory holding stage1.ckpt and stage2.ckpt")
      ->required()
      ->check(CLI::ExistingDirectory);
  evaluate->add_option("--fold", fold, "Fold index");

  auto* cv = app.add_subcommand("crossval", "Cross-validation with optional pretraining");
  add_common(cv, o);
  cv->add_option("--init", init, "Pretrain run directory to start from")->check(CLI::ExistingDirectory);

  auto* study = app.add_subcommand("alpha-study", "Training x test alpha grid on one fold");
  add_common(study, o);
  study->add_option("--init", init, "Pretrain run directory to start from")->check(CLI::ExistingDirectory);

  auto* report = app.add_subcommand("report", "Rebuild report files from a records CSV");
  report->add_option("--records", records, "Records CSV")->required()->check(CLI::ExistingFile);
  report->add_option("-o,--out", out, "Output directory (default: <csv dir>/report)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }
  // Logs go to stderr so stdout only carries output paths.
  spdlog::set_default_logger(spdlog::stderr_color_mt("dectseg"));
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    if (phantom->parsed()) return cmd_phantom(o, n, sect_n, out);
    if (mixc->parsed()) return cmd_mix(low, high, mix_alpha, out);
    if (pre->parsed()) return cmd_pretrain(o);
    if (train->parsed()) return cmd_train(o, "train", fold, "");
    if (fine->parsed()) return cmd_train(o, "finetune", fold, init);
    if (predict->parsed()) return cmd_predict(o, model, low, high, alpha);
    if (evaluate->parsed()) return cmd_evaluate(o, model, fold);
    if (cv->parsed()) return cmd_crossval(o, init);
    if (study->parsed()) return cmd_alpha_study(o, init);
    if (report->parsed()) return cmd_report(records, out);
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return kExitValidation;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitRuntime;
  }
  return kExitRuntime;
}
