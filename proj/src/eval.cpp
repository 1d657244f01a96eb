#include "dectseg/eval.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

namespace dectseg {

FoldPlan make_folds(std::vector<std::string> ids, int k, std::uint64_t seed) {
  const auto n = static_cast<Index>(ids.size());
  if (k < 1) throw ConfigError("number of folds must be >= 1");
  if (n < 7) throw ConfigError(fmt::format("{} cases cannot be split 5:1:1 (need at least 7)", n));
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);

  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  plan.window = std::max<Index>(1, std::llround(static_cast<double>(n) / 7.0));
  const Index w = plan.window;
  for (int i = 0; i < k; ++i) {
    Fold f;
    f.index = i;
    std::vector<char> used(static_cast<std::size_t>(n), 0);
    for (Index j = 0; j < w; ++j) {
      const auto t = static_cast<std::size_t>((i * w + j) % n);
      const auto v = static_cast<std::size_t>(((i + 1) * w + j) % n);
      f.test.push_back(ids[t]);
      f.validation.push_back(ids[v]);
      used[t] = used[v] = 1;
    }
    for (Index j = 0; j < n; ++j) {
      if (!used[static_cast<std::size_t>(j)]) f.train.push_back(ids[static_cast<std::size_t>(j)]);
    }
    plan.folds.push_back(std::move(f));
  }
  if (k * w > n) {
    plan.warnings.push_back(fmt::format(
        "{} folds x {} test cases exceed the {} available cases: test windows wrap around, so some cases are "
        "tested in more than one fold",
        k, w, n));
    spdlog::warn("fold plan: {}", plan.warnings.back());
  }
  return plan;
}

Aggregate aggregate(const std::vector<double>& values) {
  if (values.empty()) throw DomainError("aggregate of an empty set");
  Aggregate a;
  a.count = static_cast<Index>(values.size());
  a.min = *std::min_element(values.begin(), values.end());
  a.max = *std::max_element(values.begin(), values.end());
  double sum = 0.0;
  for (double v : values) sum += v;
  a.avg = sum / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - a.avg) * (v - a.avg);
  a.sd = std::sqrt(sq / static_cast<double>(values.size()));
  return a;
}

Aggregate MetricsReport::aggregate(Organ organ) const {
  std::vector<double> v;
  for (const auto& r : records) {
    if (r.organ == organ) v.push_back(r.dice);
  }
  if (v.empty()) throw DomainError(fmt::format("no records for {}", organ_name(organ)));
  return dectseg::aggregate(v);
}

std::vector<AlphaGridRow> alpha_grid(const MetricsReport& report, const std::vector<double>& alpha_train,
                                     const std::vector<double>& alpha_test) {
  std::vector<AlphaGridRow> rows;
  for (double at : alpha_train) {
    const std::size_t group = rows.size();
    for (double as : alpha_test) {
      AlphaGridRow row{at, as, {}, {}};
      for (std::size_t k = 0; k < kOrgans.size(); ++k) {
        double sum = 0.0;
        int n = 0;
        for (const auto& r : report.records) {
          if (r.alpha_train == at && r.alpha_test == as && r.organ == kOrgans[k]) {
            sum += r.dice;
            ++n;
          }
        }
        if (n == 0) throw DomainError(fmt::format("alpha grid cell {}-{} has no {} records", at, as,
                                                  organ_name(kOrgans[k])));
        row.mean[k] = sum / n;
      }
      rows.push_back(row);
    }
    for (std::size_t k = 0; k < kOrgans.size(); ++k) {
      std::size_t best = group;
      for (std::size_t r = group + 1; r < rows.size(); ++r) {
        if (rows[r].mean[k] > rows[best].mean[k]) best = r;
      }
      rows[best].best[k] = true;
    }
  }
  return rows;
}

std::uint64_t fold_seed(std::uint64_t seed, int fold) {
  return seed + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(fold + 1);
}

TwoStagePlan plans_for(const TwoStagePlan& plans, double alpha_training) {
  TwoStagePlan p = plans;
  p.stage1.alpha_training = alpha_training;
  p.stage2.alpha_training = alpha_training;
  return p;
}

namespace {

std::vector<CaseInput> load_cases(const DatasetManifest& m, const std::vector<std::string>& ids, double alpha) {
  std::vector<CaseInput> out;
  for (const auto& id : ids) {
    const LoadedCase c = load_case(m, m.find(id));
    out.push_back(prepare_case(c.pair, alpha, &c.labels));
  }
  return out;
}

// Everything a trained model depends on except the data split and alpha.
std::string model_key(const RunConfig& cfg, bool include_training) {
  RunConfig k = cfg;
  const RunConfig defaults;
  k.data.dir = defaults.data.dir;
  k.runs_dir = defaults.runs_dir;
  k.folds = defaults.folds;
  k.alpha_training = defaults.alpha_training;
  k.alpha_test = defaults.alpha_test;
  k.alpha_study_fold = defaults.alpha_study_fold;
  k.alpha_study_training = defaults.alpha_study_training;
  k.alpha_study_test = defaults.alpha_study_test;
  if (!include_training) {
    k.training = defaults.training;
    k.data.dect_cases = defaults.data.dect_cases;
    k.data.dect_base_seed = defaults.data.dect_base_seed;
  }
  return run_config_json(k);
}

std::optional<CascadeCheckpoints> load_cached(const std::filesystem::path& dir, const std::string& stem,
                                              const UNetConfig& net) {
  if (dir.empty()) return std::nullopt;
  const auto p1 = dir / (stem + "-stage1.ckpt");
  const auto p2 = dir / (stem + "-stage2.ckpt");
  if (!std::filesystem::exists(p1) || !std::filesystem::exists(p2)) return std::nullopt;
  spdlog::info("using cached checkpoints {}", stem);
  return CascadeCheckpoints{load_checkpoint(p1, net), load_checkpoint(p2, net)};
}

void store(const std::filesystem::path& dir, const std::string& stem, const CascadeTraining& t) {
  if (dir.empty()) return;
  std::filesystem::create_directories(dir);
  // Write under temporary names first so an interrupted run leaves no
  // half-written cache entry behind.
  for (int s = 1; s <= 2; ++s) {
    const auto& ck = s == 1 ? t.checkpoints.stage1 : t.checkpoints.stage2;
    const auto& log = s == 1 ? t.stage1.log : t.stage2.log;
    const std::string base = fmt::format("{}-stage{}", stem, s);
    write_training_log(log, dir / (base + ".log.csv"));
    save_checkpoint(ck, dir / (base + ".ckpt.tmp"));
  }
  for (int s = 1; s <= 2; ++s) {
    const std::string base = fmt::format("{}-stage{}", stem, s);
    std::filesystem::rename(dir / (base + ".ckpt.tmp"), dir / (base + ".ckpt"));
  }
}

std::string alpha_tag(double a) { return format_double(a); }

std::uint64_t checkpoint_digest(const Checkpoint& ck) {
  std::uint64_t h = fnv1a(metadata_json(ck.meta));
  for (const auto& t : ck.tensors) {
    h = fnv1a(t.name, h);
    h = fnv1a({reinterpret_cast<const char*>(t.values.data()), t.values.size() * sizeof(float)}, h);
  }
  return h;
}

// Runs f(0..n-1) on up to `jobs` threads; rethrows the first failure in
// index order.
template <typename F>
void parallel_for(int n, int jobs, F&& f) {
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  if (jobs <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) f(i);
    return;
  }
  std::mutex mu;
  int next = 0;
  auto worker = [&] {
    for (;;) {
      int i;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= n) return;
        i = next++;
      }
      try {
        f(i);
      } catch (...) {
        errors[static_cast<std::size_t>(i)] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < std::min(jobs, n); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

CascadeCheckpoints pretrain(const ExperimentContext& ctx, const DatasetManifest& sect) {
  const RunConfig& cfg = ctx.config;
  std::string key = model_key(cfg, false);
  for (const auto& c : sect.cases) key += fmt::format("|{}:{}", c.id, c.seed);
  const std::string stem = "pretrain-" + hex64(fnv1a(key));
  if (auto cached = load_cached(ctx.cache_dir, stem, cfg.network)) return *cached;
  spdlog::info("pretraining on {} SECT-like cases", sect.cases.size());
  // SECT pairs have low == high, so alpha does not change the input.
  const auto cases = load_cases(sect, sect.ids(), 1.0);
  const TwoStagePlan p = plans_for(cfg.pretraining, 1.0);
  const CascadeTraining t = train_cascade(cases, {}, p.stage1, p.stage2, cfg.network, cfg.seed);
  store(ctx.cache_dir, stem, t);
  return t.checkpoints;
}

CascadeCheckpoints train_fold(const ExperimentContext& ctx, const DatasetManifest& dect, const Fold& fold,
                              double alpha_training, const CascadeCheckpoints* init) {
  const RunConfig& cfg = ctx.config;
  std::string key = model_key(cfg, true);
  key += fmt::format("|fold {}|alpha {}", fold.index, alpha_tag(alpha_training));
  if (init) key += fmt::format("|init {} {}", hex64(checkpoint_digest(init->stage1)), hex64(checkpoint_digest(init->stage2)));
  for (const auto& id : fold.train) key += "|t:" + id + ":" + std::to_string(dect.find(id).seed);
  for (const auto& id : fold.validation) key += "|v:" + id + ":" + std::to_string(dect.find(id).seed);
  const std::string stem = fmt::format("fold{}-alpha{}-{}", fold.index, alpha_tag(alpha_training), hex64(fnv1a(key)));
  if (auto cached = load_cached(ctx.cache_dir, stem, cfg.network)) return *cached;
  spdlog::info("fold {}: training at alpha {} on {} cases ({} validation)", fold.index, alpha_training,
               fold.train.size(), fold.validation.size());
  const auto train = load_cases(dect, fold.train, alpha_training);
  const auto val = load_cases(dect, fold.validation, alpha_training);
  const TwoStagePlan p = plans_for(cfg.training, alpha_training);
  const CascadeTraining t =
      train_cascade(train, val, p.stage1, p.stage2, cfg.network, fold_seed(cfg.seed, fold.index), init);
  store(ctx.cache_dir, stem, t);
  return t.checkpoints;
}

std::vector<DiceRecord> evaluate_fold(const ExperimentContext& ctx, const DatasetManifest& dect, const Fold& fold,
                                      const CascadeCheckpoints& model, double alpha_training, double alpha_test) {
  UNet<float> n1 = restore_network(model.stage1);
  UNet<float> n2 = restore_network(model.stage2);
  const CascadeOptions opts = ctx.config.cascade_options();
  std::vector<DiceRecord> out;
  for (const auto& id : fold.test) {
    const LoadedCase c = load_case(dect, dect.find(id));
    const LabelVolume pred = predict_cascade(prepare_case(c.pair, alpha_test), n1, n2, opts);
    for (Organ o : kOrgans) out.push_back({id, fold.index, alpha_training, alpha_test, o, dice(pred, c.labels, o)});
  }
  return out;
}

MetricsReport run_crossval(const ExperimentContext& ctx, const DatasetManifest& dect, const FoldPlan& plan,
                           double alpha_training, double alpha_test, const CascadeCheckpoints* init,
                           const std::filesystem::path& partial_csv) {
  std::vector<std::vector<DiceRecord>> per_fold(plan.folds.size());
  std::vector<char> done(plan.folds.size(), 0);
  try {
    parallel_for(static_cast<int>(plan.folds.size()), ctx.jobs, [&](int i) {
      const Fold& f = plan.folds[static_cast<std::size_t>(i)];
      const CascadeCheckpoints model = train_fold(ctx, dect, f, alpha_training, init);
      per_fold[static_cast<std::size_t>(i)] = evaluate_fold(ctx, dect, f, model, alpha_training, alpha_test);
      done[static_cast<std::size_t>(i)] = 1;
    });
  } catch (...) {
    if (!partial_csv.empty()) {
      std::vector<DiceRecord> partial;
      for (std::size_t i = 0; i < per_fold.size(); ++i) {
        if (done[i]) partial.insert(partial.end(), per_fold[i].begin(), per_fold[i].end());
      }
      write_records_csv(partial, partial_csv);
      spdlog::error("cross-validation failed; {} records written to {}", partial.size(), partial_csv.string());
    }
    throw;
  }
  MetricsReport report;
  for (auto& r : per_fold) report.records.insert(report.records.end(), r.begin(), r.end());
  report.notes = plan.warnings;
  return report;
}

AlphaStudy run_alpha_study(const ExperimentContext& ctx, const DatasetManifest& dect, const FoldPlan& plan, int fold,
                           const std::vector<double>& alpha_train, const std::vector<double>& alpha_test,
                           const CascadeCheckpoints* init) {
  if (fold < 0 || fold >= static_cast<int>(plan.folds.size())) {
    throw ConfigError(fmt::format("alpha study fold {} outside the plan's {} folds", fold, plan.folds.size()));
  }
  if (alpha_train.empty() || alpha_test.empty()) throw ConfigError("alpha study grids must not be empty");
  const Fold& f = plan.folds[static_cast<std::size_t>(fold)];
  std::vector<std::vector<DiceRecord>> per_alpha(alpha_train.size());
  parallel_for(static_cast<int>(alpha_train.size()), ctx.jobs, [&](int i) {
    const double at = alpha_train[static_cast<std::size_t>(i)];
    const CascadeCheckpoints model = train_fold(ctx, dect, f, at, init);
    for (double as : alpha_test) {
      auto r = evaluate_fold(ctx, dect, f, model, at, as);
      per_alpha[static_cast<std::size_t>(i)].insert(per_alpha[static_cast<std::size_t>(i)].end(), r.begin(), r.end());
    }
  });
  AlphaStudy s;
  s.fold = fold;
  s.alpha_train = alpha_train;
  s.alpha_test = alpha_test;
  for (auto& r : per_alpha) s.report.records.insert(s.report.records.end(), r.begin(), r.end());
  s.grid = alpha_grid(s.report, alpha_train, alpha_test);
  return s;
}

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

void write_records_csv(const std::vector<DiceRecord>& records, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << "case_id,fold,alpha_train,alpha_test,organ,dice\n";
  for (const auto& r : records) {
    f << r.case_id << ',' << r.fold << ',' << format_double(r.alpha_train) << ',' << format_double(r.alpha_test)
      << ',' << organ_name(r.organ) << ',' << format_double(r.dice) << '\n';
  }
  if (!f) throw IoError("write failed: " + path.string());
}

std::vector<DiceRecord> read_records_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(f, line) || line != "case_id,fold,alpha_train,alpha_test,organ,dice") {
    throw FormatError(path.string() + ": unexpected header");
  }
  auto number = [&](const std::string& s, auto& out, int row) {
    const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
      throw FormatError(fmt::format("{}:{}: bad number '{}'", path.string(), row, s));
    }
  };
  std::vector<DiceRecord> out;
  int row = 1;
  while (std::getline(f, line)) {
    ++row;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 6) throw FormatError(fmt::format("{}:{}: expected 6 columns", path.string(), row));
    DiceRecord r;
    r.case_id = cells[0];
    number(cells[1], r.fold, row);
    number(cells[2], r.alpha_train, row);
    number(cells[3], r.alpha_test, row);
    r.organ = organ_from_name(cells[4]);
    number(cells[5], r.dice, row);
    if (!(r.dice >= 0.0 && r.dice <= 1.0)) throw FormatError(fmt::format("{}:{}: dice outside [0, 1]", path.string(), row));
    out.push_back(std::move(r));
  }
  return out;
}

namespace {

constexpr const char* kOrganTitles[4] = {"Liver", "Spleen", "R. kidney", "L. kidney"};

std::string table_markdown(const MetricsReport& report) {
  std::array<Aggregate, 4> agg;
  for (std::size_t k = 0; k < 4; ++k) agg[k] = report.aggregate(kOrgans[k]);
  std::vector<int> folds;
  std::vector<std::string> cases;
  std::vector<double> at, as;
  for (const auto& r : report.records) {
    if (std::find(folds.begin(), folds.end(), r.fold) == folds.end()) folds.push_back(r.fold);
    if (std::find(cases.begin(), cases.end(), r.case_id) == cases.end()) cases.push_back(r.case_id);
    if (std::find(at.begin(), at.end(), r.alpha_train) == at.end()) at.push_back(r.alpha_train);
    if (std::find(as.begin(), as.end(), r.alpha_test) == as.end()) as.push_back(r.alpha_test);
  }
  auto join = [](const std::vector<double>& v) {
    std::string s;
    for (double x : v) s += (s.empty() ? "" : ", ") + format_double(x);
    return s;
  };
  std::string out = "# Dice coefficients of cross-validation\n\n";
  out += fmt::format("{} folds, {} test cases, {} records. alpha_training: {}. alpha_test: {}.\n\n", folds.size(),
                     cases.size(), report.records.size(), join(at), join(as));
  auto table = [&](auto&& fmt_value) {
    std::string t = "| |";
    for (const char* name : kOrganTitles) t += fmt::format(" {} |", name);
    t += "\n|---|---|---|---|---|\n";
    const std::pair<const char*, double Aggregate::*> rows[] = {
        {"Avg.", &Aggregate::avg}, {"SD", &Aggregate::sd}, {"Min.", &Aggregate::min}, {"Max.", &Aggregate::max}};
    for (const auto& [label, field] : rows) {
      t += fmt::format("| {} |", label);
      for (const auto& a : agg) t += " " + fmt_value(a.*field) + " |";
      t += "\n";
    }
    return t;
  };
  out += table([](double v) { return fmt::format("{:.4f}", v); });
  out += "\nSD is the population standard deviation over per-case values.\n\n";
  out += "## Exact values\n\n";
  out += table([](double v) { return format_double(v); });
  if (!report.notes.empty()) {
    out += "\n## Notes\n\n";
    for (const auto& n : report.notes) out += "- " + n + "\n";
  }
  return out;
}

std::string grid_markdown(const std::vector<AlphaGridRow>& grid) {
  std::string out = "# Dice coefficients of different alpha\n\n";
  out += "Rows are alpha_training-alpha_test. Bold marks the best alpha_test per organ within each "
         "alpha_training group.\n\n";
  out += "| alpha |";
  for (const char* name : kOrganTitles) out += fmt::format(" {} |", name);
  out += "\n|---|---|---|---|---|\n";
  int matched_best = 0, groups = 0;
  for (const auto& r : grid) {
    out += fmt::format("| {}-{} |", format_double(r.alpha_train), format_double(r.alpha_test));
    for (std::size_t k = 0; k < 4; ++k) {
      const std::string v = fmt::format("{:.4f}", r.mean[k]);
      out += r.best[k] ? fmt::format(" **{}** |", v) : fmt::format(" {} |", v);
      if (r.best[k]) {
        ++groups;
        matched_best += r.alpha_train == r.alpha_test;
      }
    }
    out += "\n";
  }
  out += fmt::format("\nMatched alpha (alpha_training == alpha_test) is best in {} of {} organ groups.\n",
                     matched_best, groups);
  return out;
}

std::string svg_plot(const MetricsReport& report) {
  constexpr double W = 720, H = 400, left = 60, right = 20, top = 40, bottom = 50;
  const double plot_w = W - left - right, plot_h = H - top - bottom;
  const double col = plot_w / 4.0;
  auto ypos = [&](double d) { return top + (1.0 - d) * plot_h; };
  std::vector<int> folds;
  for (const auto& r : report.records) {
    if (std::find(folds.begin(), folds.end(), r.fold) == folds.end()) folds.push_back(r.fold);
  }
  std::sort(folds.begin(), folds.end());
  constexpr const char* palette[] = {"#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"};

  std::string s = fmt::format(
      "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\">\n"
      "<rect x=\"0\" y=\"0\" width=\"{0}\" height=\"{1}\" fill=\"white\"/>\n"
      "<text x=\"{2}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">Dice "
      "coefficients of the target organs</text>\n",
      W, H, W / 2);
  s += "<g id=\"axis\" font-family=\"sans-serif\" font-size=\"11\">\n";
  for (int t = 0; t <= 10; t += 2) {
    const double y = ypos(t / 10.0);
    s += fmt::format("<line x1=\"{:.1f}\" y1=\"{:.1f}\" x2=\"{:.1f}\" y2=\"{:.1f}\" stroke=\"#dddddd\"/>\n", left, y,
                     W - right, y);
    s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"end\">{:.1f}</text>\n", left - 6, y + 4, t / 10.0);
  }
  s += fmt::format("<text x=\"16\" y=\"{:.1f}\" transform=\"rotate(-90 16 {:.1f})\" text-anchor=\"middle\">Dice</text>\n",
                   top + plot_h / 2, top + plot_h / 2);
  s += "</g>\n";
  for (std::size_t k = 0; k < 4; ++k) {
    std::vector<double> v;
    std::vector<const DiceRecord*> recs;
    for (const auto& r : report.records) {
      if (r.organ == kOrgans[k]) {
        v.push_back(r.dice);
        recs.push_back(&r);
      }
    }
    const double cx = left + col * (static_cast<double>(k) + 0.5);
    s += fmt::format("<g class=\"organ\" id=\"organ-{}\" font-family=\"sans-serif\" font-size=\"12\">\n",
                     organ_name(kOrgans[k]));
    s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\">{}</text>\n", cx, H - bottom + 20,
                     kOrganTitles[k]);
    if (!v.empty()) {
      std::vector<double> sorted = v;
      std::sort(sorted.begin(), sorted.end());
      auto quantile = [&](double q) {
        const double pos = q * static_cast<double>(sorted.size() - 1);
        const auto i = static_cast<std::size_t>(pos);
        const double frac = pos - static_cast<double>(i);
        return i + 1 < sorted.size() ? sorted[i] * (1 - frac) + sorted[i + 1] * frac : sorted[i];
      };
      const double q1 = quantile(0.25), med = quantile(0.5), q3 = quantile(0.75);
      const double bw = col * 0.35;
      s += fmt::format("<line x1=\"{0:.1f}\" y1=\"{1:.1f}\" x2=\"{0:.1f}\" y2=\"{2:.1f}\" stroke=\"black\"/>\n", cx,
                       ypos(sorted.front()), ypos(sorted.back()));
      s += fmt::format(
          "<rect x=\"{:.1f}\" y=\"{:.1f}\" width=\"{:.1f}\" height=\"{:.1f}\" fill=\"#f0f0f0\" stroke=\"black\"/>\n",
          cx - bw / 2, ypos(q3), bw, ypos(q1) - ypos(q3));
      s += fmt::format("<line x1=\"{:.1f}\" y1=\"{:.1f}\" x2=\"{:.1f}\" y2=\"{:.1f}\" stroke=\"black\" "
                       "stroke-width=\"2\"/>\n",
                       cx - bw / 2, ypos(med), cx + bw / 2, ypos(med));
      for (std::size_t i = 0; i < recs.size(); ++i) {
        const auto fi = static_cast<std::size_t>(std::find(folds.begin(), folds.end(), recs[i]->fold) - folds.begin());
        // Spread folds side by side; cases within a fold by a small fixed offset.
        const double fx = cx - bw / 2 + bw * (static_cast<double>(fi) + 0.5) / static_cast<double>(folds.size());
        const double jitter = (static_cast<double>(i % 5) - 2.0) * 1.5;
        s += fmt::format("<circle cx=\"{:.1f}\" cy=\"{:.1f}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.8\"/>\n",
                         fx + jitter, ypos(recs[i]->dice), palette[fi % 8]);
      }
    }
    s += "</g>\n";
  }
  s += "<g id=\"legend\" font-family=\"sans-serif\" font-size=\"11\">\n";
  for (std::size_t i = 0; i < folds.size(); ++i) {
    const double x = left + 70.0 * static_cast<double>(i);
    s += fmt::format("<circle cx=\"{:.1f}\" cy=\"{:.1f}\" r=\"4\" fill=\"{}\"/>\n", x, H - 12, palette[i % 8]);
    s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\">fold {}</text>\n", x + 8, H - 8, folds[i]);
  }
  s += "</g>\n</svg>\n";
  return s;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

}  // namespace

ReportFiles emit_report(const MetricsReport& report, const std::filesystem::path& out_dir, const std::string& run_id,
                        const std::vector<AlphaGridRow>* grid) {
  if (report.records.empty()) throw DomainError("cannot emit an empty report");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  ReportFiles files;
  files.csv = out_dir / (run_id + "_records.csv");
  files.table = out_dir / (run_id + "_table1.md");
  files.svg = out_dir / (run_id + "_dice.svg");
  write_records_csv(report.records, files.csv);
  write_text(files.table, table_markdown(report));
  write_text(files.svg, svg_plot(report));
  if (grid) {
    files.grid = out_dir / (run_id + "_alpha_grid.md");
    write_text(files.grid, grid_markdown(*grid));
  }
  return files;
}

}  // namespace dectseg
