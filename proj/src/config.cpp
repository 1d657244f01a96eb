#include "dectseg/config.hpp"

#include <fmt/format.h>

#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

namespace dectseg {

using nlohmann::ordered_json;

namespace {

// Reads known keys of one JSON object and collects every problem.
class Reader {
 public:
  Reader(const ordered_json& j, std::string path, std::vector<std::string>& errors)
      : j_(j), path_(std::move(path)), errors_(errors) {
    if (!j_.is_object()) errors_.push_back(path_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return;
    try {
      out = j_.at(key).template get<T>();
    } catch (const nlohmann::json::exception&) {
      errors_.push_back(fmt::format("{}.{}: wrong type ({})", path_, key, j_.at(key).dump()));
    }
  }

  void get_path(const char* key, std::filesystem::path& out) {
    std::string s = out.string();
    get(key, s);
    out = s;
  }

  template <typename F>
  void object(const char* key, F&& f) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return;
    Reader sub(j_.at(key), path_ + "." + key, errors_);
    f(sub);
    sub.finish();
  }

  void finish() {
    if (!j_.is_object()) return;
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) errors_.push_back(fmt::format("{}: unknown key '{}'", path_, k));
    }
  }

  std::vector<std::string>& errors() { return errors_; }
  const std::string& path() const { return path_; }

 private:
  const ordered_json& j_;
  std::string path_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
};

const char* guide_name(GuideSource g) { return g == GuideSource::stage1 ? "stage1" : "truth"; }

ordered_json plan_json(const StagePlan& p) {
  ordered_json j;
  if (p.stage == 1) j["downsample"] = p.downsample;
  j["patch"] = p.patch;
  j["batch"] = p.batch;
  j["iterations"] = p.iterations;
  j["learning_rate"] = p.learning_rate;
  j["foreground_fraction"] = p.foreground_fraction;
  j["class_weight_power"] = p.class_weight_power;
  j["validate_every"] = p.validate_every;
  if (p.stage == 2) {
    j["roi_margin"] = p.roi_margin;
    j["guide"] = guide_name(p.guide);
  }
  return j;
}

void read_plan(Reader& r, StagePlan& p) {
  if (p.stage == 1) r.get("downsample", p.downsample);
  r.get("patch", p.patch);
  r.get("batch", p.batch);
  r.get("iterations", p.iterations);
  r.get("learning_rate", p.learning_rate);
  r.get("foreground_fraction", p.foreground_fraction);
  r.get("class_weight_power", p.class_weight_power);
  r.get("validate_every", p.validate_every);
  if (p.stage == 2) {
    r.get("roi_margin", p.roi_margin);
    std::string g = guide_name(p.guide);
    r.get("guide", g);
    if (g == "stage1") {
      p.guide = GuideSource::stage1;
    } else if (g == "truth") {
      p.guide = GuideSource::truth;
    } else {
      r.errors().push_back(r.path() + ".guide: expected 'stage1' or 'truth', got '" + g + "'");
    }
  }
}

ordered_json two_stage_json(const TwoStagePlan& p) {
  return ordered_json{{"stage1", plan_json(p.stage1)}, {"stage2", plan_json(p.stage2)}};
}

void read_two_stage(Reader& r, const char* key, TwoStagePlan& p) {
  r.object(key, [&](Reader& s) {
    s.object("stage1", [&](Reader& x) { read_plan(x, p.stage1); });
    s.object("stage2", [&](Reader& x) { read_plan(x, p.stage2); });
  });
}

ordered_json material_json(const Material& m) { return ordered_json::array({m.low_hu, m.high_hu}); }

void read_material(Reader& r, const char* key, Material& m) {
  std::vector<double> v{m.low_hu, m.high_hu};
  r.get(key, v);
  if (v.size() != 2) {
    r.errors().push_back(fmt::format("{}.{}: expected [low_hu, high_hu]", r.path(), key));
    return;
  }
  m = {v[0], v[1]};
}

}  // namespace

RunConfig::RunConfig() {
  // Desk-scale recipe: about 20 min of pretraining and 5 min per fold on one
  // core. Square-root class weights trade less recall for fewer false
  // positives at organ borders than plain inverse frequency.
  pretraining.stage1 = StagePlan{};
  pretraining.stage1.stage = 1;
  pretraining.stage1.iterations = 800;
  pretraining.stage1.class_weight_power = 0.5;
  pretraining.stage2 = StagePlan{};
  pretraining.stage2.stage = 2;
  pretraining.stage2.iterations = 3000;
  pretraining.stage2.class_weight_power = 0.5;
  training.stage1 = pretraining.stage1;
  training.stage1.iterations = 300;
  training.stage1.learning_rate = 3e-4;
  training.stage1.validate_every = 100;
  training.stage2 = pretraining.stage2;
  training.stage2.iterations = 800;
  training.stage2.learning_rate = 3e-4;
  training.stage2.validate_every = 100;
}

std::vector<std::string> RunConfig::problems() const {
  std::vector<std::string> out;
  auto check = [&](bool ok, std::string msg) {
    if (!ok) out.push_back(std::move(msg));
  };
  auto check_call = [&](const std::string& where, auto&& f) {
    try {
      f();
    } catch (const Error& e) {
      out.push_back(where + ": " + e.what());
    }
  };
  check(data.dect_cases >= 1, "data.dect_cases must be >= 1");
  check(data.sect_cases >= 1 || !pretrain, "data.sect_cases must be >= 1 when pretraining");
  check(data.sect_noise_hu >= 0, "data.sect_noise_hu must be >= 0");
  check(!data.dir.empty(), "data.dir must not be empty");
  check(!runs_dir.empty(), "runs_dir must not be empty");
  check_call("phantom", [&] { phantom.validate(); });
  check_call("network", [&] { network.validate(); });
  if (network.in_channels != 2) out.push_back("network.in_channels must be 2 (image and mask)");
  if (network.out_channels != kNumClasses) out.push_back("network.out_channels must be 5");
  check_call("pretraining.stage1", [&] { pretraining.stage1.validate(network); });
  check_call("pretraining.stage2", [&] { pretraining.stage2.validate(network); });
  check_call("training.stage1", [&] { training.stage1.validate(network); });
  check_call("training.stage2", [&] { training.stage2.validate(network); });
  check(pretraining.stage1.downsample == training.stage1.downsample,
        "pretraining and training stage-1 downsample factors differ");
  check(overlap >= 0.0 && overlap < 1.0, "overlap must lie in [0, 1)");
  check(folds >= 1, "folds must be >= 1");
  check(data.dect_cases >= 7, "cross-validation needs at least 7 DECT cases (5:1:1 split)");
  check(alpha_training >= 0 && alpha_training <= 1, "alpha_training must lie in [0, 1]");
  check(alpha_test >= 0 && alpha_test <= 1, "alpha_test must lie in [0, 1]");
  check(alpha_study_fold >= 0 && alpha_study_fold < folds, "alpha_study.fold must be a valid fold index");
  check(!alpha_study_training.empty() && !alpha_study_test.empty(), "alpha_study grids must not be empty");
  for (double a : alpha_study_training) check(a >= 0 && a <= 1, fmt::format("alpha_study training value {} outside [0, 1]", a));
  for (double a : alpha_study_test) check(a >= 0 && a <= 1, fmt::format("alpha_study test value {} outside [0, 1]", a));
  return out;
}

void RunConfig::validate() const {
  const auto p = problems();
  if (p.empty()) return;
  std::string msg = "invalid run config:";
  for (const auto& s : p) msg += "\n  - " + s;
  throw ConfigError(msg);
}

CascadeOptions RunConfig::cascade_options() const {
  CascadeOptions o = CascadeOptions::from_plans(training.stage1, training.stage2);
  o.overlap = overlap;
  return o;
}

RunConfig run_config_from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  std::vector<std::string> errors;
  Reader r(j, "config", errors);
  r.get("seed", c.seed);
  r.object("data", [&](Reader& d) {
    d.get_path("dir", c.data.dir);
    d.get("dect_cases", c.data.dect_cases);
    d.get("dect_base_seed", c.data.dect_base_seed);
    d.get("sect_cases", c.data.sect_cases);
    d.get("sect_base_seed", c.data.sect_base_seed);
    d.get("sect_noise_hu", c.data.sect_noise_hu);
  });
  r.object("phantom", [&](Reader& p) {
    std::vector<Index> dims{c.phantom.dims.x, c.phantom.dims.y, c.phantom.dims.z};
    p.get("dims", dims);
    if (dims.size() == 3) {
      c.phantom.dims = {dims[0], dims[1], dims[2]};
    } else {
      errors.push_back("config.phantom.dims: expected [x, y, z]");
    }
    std::vector<double> sp{c.phantom.spacing.x, c.phantom.spacing.y, c.phantom.spacing.z};
    p.get("spacing", sp);
    if (sp.size() == 3) {
      c.phantom.spacing = {sp[0], sp[1], sp[2]};
    } else {
      errors.push_back("config.phantom.spacing: expected [x, y, z]");
    }
    p.get("noise_low_hu", c.phantom.noise_low_hu);
    p.get("noise_high_hu", c.phantom.noise_high_hu);
    p.get("blur_sigma", c.phantom.blur_sigma);
    p.get("organ_gap", c.phantom.organ_gap);
    p.get("max_attempts", c.phantom.max_attempts);
    p.object("materials", [&](Reader& m) {
      read_material(m, "soft_tissue", c.phantom.materials.soft_tissue);
      read_material(m, "liver", c.phantom.materials.liver);
      read_material(m, "spleen", c.phantom.materials.spleen);
      read_material(m, "kidney", c.phantom.materials.kidney);
    });
  });
  r.object("network", [&](Reader& n) {
    n.get("levels", c.network.levels);
    n.get("base_channels", c.network.base_channels);
  });
  r.get("pretrain", c.pretrain);
  read_two_stage(r, "pretraining", c.pretraining);
  read_two_stage(r, "training", c.training);
  r.get("overlap", c.overlap);
  r.object("crossval", [&](Reader& x) {
    x.get("folds", c.folds);
    x.get("alpha_training", c.alpha_training);
    x.get("alpha_test", c.alpha_test);
  });
  r.object("alpha_study", [&](Reader& a) {
    a.get("fold", c.alpha_study_fold);
    a.get("alpha_training", c.alpha_study_training);
    a.get("alpha_test", c.alpha_study_test);
  });
  r.get_path("runs_dir", c.runs_dir);
  r.finish();
  // Report parse and range problems in one pass.
  for (auto& s : c.problems()) errors.push_back(std::move(s));
  if (!errors.empty()) {
    std::string msg = "invalid run config:";
    for (const auto& s : errors) msg += "\n  - " + s;
    throw ConfigError(msg);
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open run config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return run_config_from_json(ss.str());
}

std::string run_config_json(const RunConfig& c) {
  const MaterialTable& m = c.phantom.materials;
  ordered_json j;
  j["seed"] = c.seed;
  j["data"] = {{"dir", c.data.dir.generic_string()},     {"dect_cases", c.data.dect_cases},
               {"dect_base_seed", c.data.dect_base_seed}, {"sect_cases", c.data.sect_cases},
               {"sect_base_seed", c.data.sect_base_seed}, {"sect_noise_hu", c.data.sect_noise_hu}};
  j["phantom"] = {{"dims", {c.phantom.dims.x, c.phantom.dims.y, c.phantom.dims.z}},
                  {"spacing", {c.phantom.spacing.x, c.phantom.spacing.y, c.phantom.spacing.z}},
                  {"noise_low_hu", c.phantom.noise_low_hu},
                  {"noise_high_hu", c.phantom.noise_high_hu},
                  {"blur_sigma", c.phantom.blur_sigma},
                  {"organ_gap", c.phantom.organ_gap},
                  {"max_attempts", c.phantom.max_attempts},
                  {"materials",
                   {{"soft_tissue", material_json(m.soft_tissue)},
                    {"liver", material_json(m.liver)},
                    {"spleen", material_json(m.spleen)},
                    {"kidney", material_json(m.kidney)}}}};
  j["network"] = {{"levels", c.network.levels}, {"base_channels", c.network.base_channels}};
  j["pretrain"] = c.pretrain;
  j["pretraining"] = two_stage_json(c.pretraining);
  j["training"] = two_stage_json(c.training);
  j["overlap"] = c.overlap;
  j["crossval"] = {{"folds", c.folds}, {"alpha_training", c.alpha_training}, {"alpha_test", c.alpha_test}};
  j["alpha_study"] = {{"fold", c.alpha_study_fold},
                      {"alpha_training", c.alpha_study_training},
                      {"alpha_test", c.alpha_study_test}};
  j["runs_dir"] = c.runs_dir.generic_string();
  return j.dump(2);
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) { return fmt::format("{:016x}", v); }

// Paths are left out: moving the data or runs directory does not change the
// experiment.
std::string config_hash(const RunConfig& cfg) {
  RunConfig c = cfg;
  c.data.dir.clear();
  c.runs_dir.clear();
  return hex64(fnv1a(run_config_json(c)));
}

}  // namespace dectseg
