#include <doctest.h>

#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "dectseg/eval.hpp"
#include "oracles.hpp"
#include "scratch_dir.hpp"

using namespace dectseg;
using dectseg::testing::ScratchDir;

namespace {

LabelVolume labels_from(const std::vector<std::uint8_t>& v, Dims d) {
  std::vector<Organ> o(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) o[i] = static_cast<Organ>(v[i]);
  return LabelVolume(d, {}, std::move(o));
}

std::vector<std::string> make_ids(int n) {
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) ids.push_back("c" + std::to_string(i));
  return ids;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

RunConfig tiny_config() {
  RunConfig c;
  c.seed = 3;
  c.phantom.dims = {40, 40, 40};
  c.data.dect_cases = 7;
  c.data.sect_cases = 2;
  c.network = UNetConfig{2, 4, 2, 5};
  for (TwoStagePlan* p : {&c.pretraining, &c.training}) {
    p->stage1.patch = p->stage2.patch = 16;
    p->stage1.iterations = p->stage2.iterations = 3;
    p->stage1.validate_every = p->stage2.validate_every = 0;
  }
  c.folds = 2;
  c.alpha_study_fold = 1;
  c.alpha_study_training = {0.3, 0.6};
  c.alpha_study_test = {0.3, 0.6, 0.9};
  return c;
}

}  // namespace

TEST_CASE("dice hand values") {
  const Dims d{4, 2, 1};
  // |A| = 4, |B| = 4, |A n B| = 2.
  const auto a = labels_from({1, 1, 1, 1, 0, 0, 0, 0}, d);
  const auto b = labels_from({0, 0, 1, 1, 1, 1, 0, 0}, d);
  CHECK(dice(a, b, Organ::liver) == 0.5);
  CHECK(dice(a, a, Organ::liver) == 1.0);
  const auto c = labels_from({0, 0, 0, 0, 1, 1, 1, 1}, d);
  CHECK(dice(a, c, Organ::liver) == 0.0);
  CHECK(dice(a, b, Organ::spleen) == 1.0);  // both empty
  CHECK(dice(a, labels_from({0, 0, 0, 0, 0, 0, 0, 2}, d), Organ::spleen) == 0.0);  // one empty
  CHECK_THROWS_AS(dice(a, LabelVolume({2, 2, 2}, {}, Organ::background), Organ::liver), ShapeError);
}

TEST_CASE("dice properties against the counting oracle") {
  std::mt19937_64 rng(1);
  const Dims d{8, 8, 8};
  for (int trial = 0; trial < 200; ++trial) {
    // Sparse label sets so that empty organs occur.
    std::uniform_int_distribution<int> pick(0, trial % 3 == 0 ? 40 : 6);
    std::vector<std::uint8_t> a(512), b(512);
    for (auto& x : a) x = static_cast<std::uint8_t>(std::min(pick(rng), 4) * (pick(rng) < 5));
    for (auto& x : b) x = static_cast<std::uint8_t>(std::min(pick(rng), 4) * (pick(rng) < 5));
    const auto la = labels_from(a, d), lb = labels_from(b, d);
    std::vector<std::size_t> perm(512);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::uint8_t> pa(512), pb(512);
    for (std::size_t i = 0; i < 512; ++i) {
      pa[i] = a[perm[i]];
      pb[i] = b[perm[i]];
    }
    for (Organ o : kOrgans) {
      const double v = dice(la, lb, o);
      CHECK(v == oracle::dice_by_counting(a, b, static_cast<std::uint8_t>(o)));
      CHECK(v == dice(lb, la, o));
      CHECK(v == dice(labels_from(pa, d), labels_from(pb, d), o));
      CHECK((v >= 0.0 && v <= 1.0));
    }
  }
}

TEST_CASE("fold plans") {
  SUBCASE("n = 14, k = 2 by hand") {
    const FoldPlan p = make_folds(make_ids(14), 2, 5);
    CHECK(p.window == 2);
    CHECK_FALSE(p.overlapping());
    for (const Fold& f : p.folds) {
      CHECK(f.test.size() == 2);
      CHECK(f.validation.size() == 2);
      CHECK(f.train.size() == 10);
    }
    // Fold 0 validates on fold 1's test window.
    CHECK(p.folds[0].validation == p.folds[1].test);
  }
  SUBCASE("n = 42, k = 7 partitions the test sets") {
    const FoldPlan p = make_folds(make_ids(42), 7, 9);
    std::multiset<std::string> tested;
    for (const Fold& f : p.folds) tested.insert(f.test.begin(), f.test.end());
    CHECK(tested.size() == 42);
    CHECK(std::set<std::string>(tested.begin(), tested.end()).size() == 42);
    CHECK_FALSE(p.overlapping());
  }
  SUBCASE("n = 42, k = 8 wraps with a warning") {
    const FoldPlan p = make_folds(make_ids(42), 8, 9);
    CHECK(p.overlapping());
    CHECK(p.folds[7].test == p.folds[0].test);
    for (const Fold& f : p.folds) {
      CHECK(f.train.size() == 30);
      CHECK(f.validation.size() == 6);
      CHECK(f.test.size() == 6);
    }
  }
  CHECK(make_folds(make_ids(20), 3, 4) == make_folds(make_ids(20), 3, 4));
  CHECK_FALSE(make_folds(make_ids(20), 3, 4) == make_folds(make_ids(20), 3, 5));
  CHECK_THROWS_AS(make_folds(make_ids(6), 2, 1), ConfigError);
  CHECK_THROWS_AS(make_folds(make_ids(10), 0, 1), ConfigError);
}

TEST_CASE("aggregates") {
  const Aggregate a = aggregate({0.5, 0.7, 0.9});
  CHECK(a.avg == doctest::Approx(0.7));
  CHECK(a.sd == doctest::Approx(std::sqrt(0.08 / 3.0)));
  CHECK(a.min == 0.5);
  CHECK(a.max == 0.9);
  CHECK(a.count == 3);
  CHECK_THROWS_AS(aggregate({}), DomainError);

  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  MetricsReport r;
  for (int i = 0; i < 40; ++i) r.records.push_back({"c" + std::to_string(i % 10), i / 10, 0.6, 0.6, kOrgans[i % 4], u(rng)});
  for (Organ o : kOrgans) {
    const Aggregate g = r.aggregate(o);
    CHECK(g.min <= g.avg);
    CHECK(g.avg <= g.max);
    CHECK(g.sd >= 0.0);
  }
}

TEST_CASE("alpha grid flags") {
  MetricsReport r;
  // liver: ties within the 0.3 group resolve to the first row.
  const double liver[2][3] = {{0.8, 0.9, 0.9}, {0.7, 0.6, 0.5}};
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j) {
      const double at = i == 0 ? 0.3 : 0.6, as = j == 0 ? 0.3 : (j == 1 ? 0.6 : 0.9);
      for (Organ o : kOrgans) r.records.push_back({"x", 0, at, as, o, o == Organ::liver ? liver[i][j] : 0.5});
    }
  const auto g = alpha_grid(r, {0.3, 0.6}, {0.3, 0.6, 0.9});
  REQUIRE(g.size() == 6);
  CHECK(g[1].best[0]);
  CHECK_FALSE(g[2].best[0]);
  CHECK(g[3].best[0]);
  for (int grp = 0; grp < 2; ++grp)
    for (std::size_t k = 0; k < 4; ++k) {
      int marks = 0;
      for (int j = 0; j < 3; ++j) marks += g[static_cast<std::size_t>(grp * 3 + j)].best[k];
      CHECK(marks == 1);
    }
  CHECK(g[0].best[1]);  // all equal: first wins
  CHECK_THROWS_AS(alpha_grid(r, {0.9}, {0.3}), DomainError);
}

TEST_CASE("report files") {
  ScratchDir dir("report");
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  MetricsReport r;
  for (int f = 0; f < 3; ++f)
    for (int c = 0; c < 2; ++c)
      for (Organ o : kOrgans) r.records.push_back({"case_" + std::to_string(f * 2 + c), f, 0.6, 0.6, o, u(rng)});
  r.notes.push_back("a note");
  const auto files = emit_report(r, dir / "out", "run1");

  // CSV: header + one row per record, exact round trip.
  const auto back = read_records_csv(files.csv);
  CHECK(back == r.records);
  std::istringstream csv(slurp(files.csv));
  int lines = 0;
  for (std::string l; std::getline(csv, l);) ++lines;
  CHECK(lines == static_cast<int>(r.records.size()) + 1);

  // Exact markdown values match recomputation from the CSV.
  const std::string md = slurp(files.table);
  const auto exact = md.substr(md.find("## Exact values"));
  MetricsReport from_csv;
  from_csv.records = back;
  const std::pair<const char*, double Aggregate::*> rows[] = {
      {"| Avg. |", &Aggregate::avg}, {"| SD |", &Aggregate::sd}, {"| Min. |", &Aggregate::min}, {"| Max. |", &Aggregate::max}};
  for (const auto& [label, field] : rows) {
    const auto at = exact.find(label);
    REQUIRE(at != std::string::npos);
    std::istringstream line(exact.substr(at + std::strlen(label), exact.find('\n', at) - at - std::strlen(label)));
    for (Organ o : kOrgans) {
      std::string cell, bar;
      line >> cell >> bar;
      CHECK(std::abs(std::stod(cell) - from_csv.aggregate(o).*field) <= 1e-9);
    }
  }
  CHECK(md.find("- a note") != std::string::npos);

  // SVG: one plot group per organ, balanced tags.
  const std::string svg = slurp(files.svg);
  CHECK(svg.rfind("<?xml", 0) == 0);
  std::size_t groups = 0;
  for (std::size_t p = 0; (p = svg.find("<g class=\"organ\"", p)) != std::string::npos; ++p) ++groups;
  CHECK(groups == 4);
  auto count = [&](const std::string& s) {
    std::size_t n = 0;
    for (std::size_t p = 0; (p = svg.find(s, p)) != std::string::npos; ++p) ++n;
    return n;
  };
  CHECK(count("<g") == count("</g>"));
  CHECK(count("<svg") == count("</svg>"));
  CHECK(count("<text") == count("</text>"));

  // Same report, same bytes.
  const auto again = emit_report(r, dir / "again", "run1");
  CHECK(slurp(again.csv) == slurp(files.csv));
  CHECK(slurp(again.table) == slurp(files.table));
  CHECK(slurp(again.svg) == slurp(files.svg));
  CHECK(files.grid.empty());

  CHECK_THROWS_AS(emit_report(MetricsReport{}, dir / "x", "r"), DomainError);
  {
    std::ofstream f(dir / "bad.csv");
    f << "case_id,fold,alpha_train,alpha_test,organ,dice\nc,0,0.6,0.6,liver,1.5\n";
  }
  CHECK_THROWS_AS(read_records_csv(dir / "bad.csv"), FormatError);
}

TEST_CASE("format_double round trips") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1e3, 1e3);
  for (int i = 0; i < 1000; ++i) {
    const double v = u(rng);
    CHECK(std::stod(format_double(v)) == v);
  }
  CHECK(format_double(0.6) == "0.6");
  CHECK(format_double(1.0) == "1");
}

TEST_CASE("run config") {
  const RunConfig d;
  CHECK(d.problems().empty());
  const RunConfig back = run_config_from_json(run_config_json(d));
  CHECK(run_config_json(back) == run_config_json(d));
  CHECK(config_hash(back) == config_hash(d));

  const RunConfig c = run_config_from_json(R"({"seed": 9, "crossval": {"folds": 4}, "training": {"stage2": {"guide": "truth"}}})");
  CHECK(c.seed == 9);
  CHECK(c.folds == 4);
  CHECK(c.training.stage2.guide == GuideSource::truth);
  CHECK(c.training.stage1.iterations == d.training.stage1.iterations);
  CHECK(config_hash(c) != config_hash(d));
  RunConfig moved = d;
  moved.runs_dir = "elsewhere";
  moved.data.dir = "other-data";
  CHECK(config_hash(moved) == config_hash(d));

  CHECK_THROWS_AS(run_config_from_json(R"({"sed": 9})"), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(R"({"seed": "x"})"), ConfigError);
  CHECK_THROWS_AS(run_config_from_json("{"), ConfigError);
  // All problems are reported together.
  try {
    run_config_from_json(R"({"overlap": 1.5, "crossval": {"alpha_test": 2}, "training": {"stage1": {"patch": 30}}})");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("overlap") != std::string::npos);
    CHECK(msg.find("alpha_test") != std::string::npos);
    CHECK(msg.find("training.stage1") != std::string::npos);
  }
  CHECK(fnv1a("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("cross-validation and alpha study wiring") {
  ScratchDir dir("crossval");
  const RunConfig cfg = tiny_config();
  PhantomSpec spec = cfg.phantom;
  const DatasetManifest dect = generate_dataset(cfg.data.dect_cases, 0, dir / "dect", spec);
  const DatasetManifest sect = sect_like_dataset(cfg.data.sect_cases, 100, dir / "sect", spec);
  ExperimentContext ctx{cfg, dir / "cache", 1};

  const CascadeCheckpoints pre = pretrain(ctx, sect);
  CHECK(pretrain(ctx, sect).stage2 == pre.stage2);  // cache hit

  const FoldPlan plan = make_folds(dect.ids(), cfg.folds, cfg.seed);
  const MetricsReport r = run_crossval(ctx, dect, plan, 0.6, 0.6, &pre);
  CHECK(r.records.size() == plan.folds.size() * plan.folds[0].test.size() * 4);
  for (const auto& rec : r.records) CHECK((rec.dice >= 0.0 && rec.dice <= 1.0));

  // A fresh cache reproduces the records exactly, in parallel too.
  ExperimentContext fresh{cfg, dir / "cache2", 2};
  CHECK(run_crossval(fresh, dect, plan, 0.6, 0.6, &pre).records == r.records);

  const AlphaStudy s = run_alpha_study(ctx, dect, plan, 1, {0.3, 0.6}, {0.3, 0.6, 0.9}, &pre);
  CHECK(s.grid.size() == 6);
  CHECK(s.report.records.size() == 6 * plan.folds[1].test.size() * 4);

  // {0.6} x {0.6} equals the cross-validation result of that fold.
  const AlphaStudy one = run_alpha_study(ctx, dect, plan, 1, {0.6}, {0.6}, &pre);
  std::vector<DiceRecord> fold1;
  for (const auto& rec : r.records)
    if (rec.fold == 1) fold1.push_back(rec);
  CHECK(one.report.records == fold1);

  const auto files = emit_report(s.report, dir / "report", "alpha", &s.grid);
  const std::string grid = slurp(files.grid);
  CHECK(grid.find("| 0.3-0.9 |") != std::string::npos);
  CHECK(grid.find("| 0.6-0.6 |") != std::string::npos);

  CHECK_THROWS_AS(run_alpha_study(ctx, dect, plan, 5, {0.6}, {0.6}, &pre), ConfigError);
}

TEST_CASE("a failing fold leaves partial records") {
  ScratchDir dir("partial");
  RunConfig cfg = tiny_config();
  const DatasetManifest dect = generate_dataset(cfg.data.dect_cases, 0, dir / "dect", cfg.phantom);
  FoldPlan plan = make_folds(dect.ids(), 2, cfg.seed);
  plan.folds[1].test.push_back("missing-case");
  ExperimentContext ctx{cfg, {}, 1};
  CHECK_THROWS_AS(run_crossval(ctx, dect, plan, 0.6, 0.6, nullptr, dir / "partial.csv"), ConfigError);
  const auto partial = read_records_csv(dir / "partial.csv");
  CHECK(partial.size() == plan.folds[0].test.size() * 4);
}
