#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dectseg/config.hpp"
#include "dectseg/metrics.hpp"

namespace dectseg {

struct Fold {
  int index = 0;
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;
  friend bool operator==(const Fold&, const Fold&) = default;
};

struct FoldPlan {
  int k = 0;
  std::uint64_t seed = 0;
  Index window = 0;  // test and validation size
  std::vector<Fold> folds;
  std::vector<std::string> warnings;  // test-window overlap across folds

  bool overlapping() const { return !warnings.empty(); }
  friend bool operator==(const FoldPlan&, const FoldPlan&) = default;
};

/// Shuffles the ids once by `seed`; fold i tests on the circular window
/// [i w, (i + 1) w) with w = round(n / 7), validates on the next window and
/// trains on the rest. Throws ConfigError for k < 1 or n < 7.
FoldPlan make_folds(std::vector<std::string> ids, int k, std::uint64_t seed);

struct DiceRecord {
  std::string case_id;
  int fold = 0;
  double alpha_train = 0.0;
  double alpha_test = 0.0;
  Organ organ = Organ::liver;
  double dice = 0.0;
  friend bool operator==(const DiceRecord&, const DiceRecord&) = default;
};

struct Aggregate {
  double avg = 0.0;
  double sd = 0.0;  // population
  double min = 0.0;
  double max = 0.0;
  Index count = 0;
};

struct MetricsReport {
  std::vector<DiceRecord> records;
  std::vector<std::string> notes;

  /// Over all records of `organ`; throws DomainError when there are none.
  Aggregate aggregate(Organ organ) const;
};

Aggregate aggregate(const std::vector<double>& values);

struct AlphaGridRow {
  double alpha_train = 0.0;
  double alpha_test = 0.0;
  std::array<double, 4> mean{};  // indexed like kOrgans
  std::array<bool, 4> best{};    // first maximum per organ within the alpha_train group
};

/// One row per (alpha_train, alpha_test) pair, in the given order.
std::vector<AlphaGridRow> alpha_grid(const MetricsReport& report, const std::vector<double>& alpha_train,
                                     const std::vector<double>& alpha_test);

/// Trained checkpoints are cached under `cache_dir` keyed by what they
/// depend on; an empty path disables caching.
struct ExperimentContext {
  RunConfig config;
  std::filesystem::path cache_dir;
  int jobs = 1;
};

/// Per-fold seed derived from the run seed.
std::uint64_t fold_seed(std::uint64_t seed, int fold);

/// Stage plans with alpha_training set.
TwoStagePlan plans_for(const TwoStagePlan& plans, double alpha_training);

/// Trains (or loads from cache) the general model on the SECT-like corpus.
CascadeCheckpoints pretrain(const ExperimentContext& ctx, const DatasetManifest& sect);

/// Trains (or loads) one fold's cascade.
CascadeCheckpoints train_fold(const ExperimentContext& ctx, const DatasetManifest& dect, const Fold& fold,
                              double alpha_training, const CascadeCheckpoints* init);

/// Dice records of one fold's test cases.
std::vector<DiceRecord> evaluate_fold(const ExperimentContext& ctx, const DatasetManifest& dect, const Fold& fold,
                                      const CascadeCheckpoints& model, double alpha_training, double alpha_test);

/// Trains and evaluates every fold. A failing fold aborts the run; records
/// gathered so far are written to `partial_csv` (when non-empty) first.
MetricsReport run_crossval(const ExperimentContext& ctx, const DatasetManifest& dect, const FoldPlan& plan,
                           double alpha_training, double alpha_test, const CascadeCheckpoints* init,
                           const std::filesystem::path& partial_csv = {});

struct AlphaStudy {
  int fold = 0;
  std::vector<double> alpha_train;
  std::vector<double> alpha_test;
  MetricsReport report;
  std::vector<AlphaGridRow> grid;
};

/// One cascade per alpha_train on `fold`, each tested at every alpha_test.
AlphaStudy run_alpha_study(const ExperimentContext& ctx, const DatasetManifest& dect, const FoldPlan& plan, int fold,
                           const std::vector<double>& alpha_train, const std::vector<double>& alpha_test,
                           const CascadeCheckpoints* init);

/// Files written by emit_report, all prefixed with the run id.
struct ReportFiles {
  std::filesystem::path csv;
  std::filesystem::path table;
  std::filesystem::path grid;  // empty without an alpha study
  std::filesystem::path svg;
};

/// Records CSV, Table-1-style markdown, optional alpha-grid markdown and an
/// SVG strip plot. Output bytes depend only on the inputs.
ReportFiles emit_report(const MetricsReport& report, const std::filesystem::path& out_dir, const std::string& run_id,
                        const std::vector<AlphaGridRow>* grid = nullptr);

void write_records_csv(const std::vector<DiceRecord>& records, const std::filesystem::path& path);
std::vector<DiceRecord> read_records_csv(const std::filesystem::path& path);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

}  // namespace dectseg
