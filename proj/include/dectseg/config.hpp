#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dectseg/cascade.hpp"
#include "dectseg/phantom.hpp"

namespace dectseg {

struct DataConfig {
  std::filesystem::path dir = "data";
  int dect_cases = 12;
  std::uint64_t dect_base_seed = 0;
  int sect_cases = 48;
  std::uint64_t sect_base_seed = 1000;
  double sect_noise_hu = kDefaultSectNoiseHu;

  std::filesystem::path dect_dir() const { return dir / "dect"; }
  std::filesystem::path sect_dir() const { return dir / "sect"; }
};

struct TwoStagePlan {
  StagePlan stage1;
  StagePlan stage2;
};

/// One experiment definition. Every seed is explicit.
struct RunConfig {
  std::uint64_t seed = 0;
  DataConfig data;
  PhantomSpec phantom;  // phantom.seed is ignored; datasets use the data seeds
  UNetConfig network;
  bool pretrain = true;
  TwoStagePlan pretraining;  // on the SECT-like corpus
  TwoStagePlan training;     // per fold; fine-tunes when pretrain is set
  double overlap = 0.5;
  int folds = 3;
  double alpha_training = 0.6;
  double alpha_test = 0.6;
  int alpha_study_fold = 0;
  std::vector<double> alpha_study_training{0.3, 0.6, 0.9};
  std::vector<double> alpha_study_test{0.3, 0.6, 0.9};
  std::filesystem::path runs_dir = "runs";

  RunConfig();

  /// Every problem found, one message each; empty when valid.
  std::vector<std::string> problems() const;
  /// Throws ConfigError listing all problems.
  void validate() const;

  CascadeOptions cascade_options() const;
};

/// Strict reader: unknown keys and type mismatches are ConfigErrors,
/// missing keys keep their defaults.
RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
/// Canonical JSON with every field spelled out.
std::string run_config_json(const RunConfig& cfg);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);
/// Hash of the canonical JSON.
std::string config_hash(const RunConfig& cfg);

}  // namespace dectseg
