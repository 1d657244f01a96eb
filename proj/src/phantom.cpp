#include "dectseg/phantom.hpp"

#include <fmt/format.h>

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <random>

#include "dectseg/metaimage.hpp"

namespace dectseg {

const Material& MaterialTable::organ(Organ o) const {
  switch (o) {
    case Organ::background: return soft_tissue;
    case Organ::liver: return liver;
    case Organ::spleen: return spleen;
    case Organ::right_kidney:
    case Organ::left_kidney: return kidney;
  }
  throw DomainError("unknown organ");
}

MaterialTable dect_materials() { return MaterialTable{}; }

MaterialTable sect_materials() {
  MaterialTable t;
  t.soft_tissue = {52.0, 52.0};
  t.liver = {98.0, 98.0};
  t.spleen = {90.0, 90.0};
  t.kidney = {112.0, 112.0};
  return t;
}

double Ellipsoid::level(double x, double y, double z) const {
  const double dx = (x - center[0]) / radius[0];
  const double dy = (y - center[1]) / radius[1];
  const double dz = (z - center[2]) / radius[2];
  return dx * dx + dy * dy + dz * dz;
}

std::array<OrganRange, 4> PhantomSpec::default_organ_ranges() {
  return {{
      // liver: large, patient right, anterior-superior
      {{-0.50, -0.18, 0.00}, {-0.38, 0.02, 0.20}, {0.30, 0.38, 0.34}, {0.36, 0.46, 0.42}},
      // spleen: medium, patient left, posterior-superior
      {{0.42, 0.02, 0.10}, {0.55, 0.22, 0.30}, {0.14, 0.19, 0.20}, {0.18, 0.25, 0.27}},
      // right kidney: small, posterior, inferior
      {{-0.42, 0.42, -0.40}, {-0.30, 0.55, -0.18}, {0.11, 0.15, 0.19}, {0.14, 0.19, 0.25}},
      // left kidney
      {{0.30, 0.42, -0.36}, {0.42, 0.55, -0.14}, {0.11, 0.15, 0.19}, {0.14, 0.19, 0.25}},
  }};
}

void PhantomSpec::validate() const {
  if (dims.x < 8 || dims.y < 8 || dims.z < 8) throw ConfigError("phantom dims must be at least 8 per axis");
  if (!(spacing.x > 0 && spacing.y > 0 && spacing.z > 0)) throw ConfigError("phantom spacing must be positive");
  if (noise_low_hu < 0 || noise_high_hu < 0) throw ConfigError("phantom noise must be non-negative");
  if (blur_sigma < 0) throw ConfigError("phantom blur sigma must be non-negative");
  if (organ_gap < 0) throw ConfigError("phantom organ gap must be non-negative");
  if (max_attempts < 1) throw ConfigError("phantom max_attempts must be >= 1");
  for (int a = 0; a < 3; ++a) {
    if (!(body_radius_lo[a] > 0 && body_radius_lo[a] <= body_radius_hi[a] && body_radius_hi[a] < 1.0)) {
      throw ConfigError("phantom body radius range must satisfy 0 < lo <= hi < 1");
    }
    for (const OrganRange& r : organs) {
      if (r.center_lo[a] > r.center_hi[a] || !(r.radius_lo[a] > 0) || r.radius_lo[a] > r.radius_hi[a]) {
        throw ConfigError("phantom organ range has lo > hi or non-positive radius");
      }
    }
  }
}

namespace {

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) {
  return lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng);
}

struct Geometry {
  Ellipsoid body;
  std::array<Ellipsoid, 4> organs;
};

// Calls f(x, y, z) for every voxel centre inside `e` grown by `grow` voxels.
template <typename F>
void for_each_voxel_in(const Ellipsoid& e, double grow, const Dims& dims, F&& f) {
  Ellipsoid g = e;
  for (double& r : g.radius) r += grow;
  Index lo[3], hi[3];
  for (int a = 0; a < 3; ++a) {
    lo[a] = std::max<Index>(0, static_cast<Index>(std::floor(g.center[a] - g.radius[a])));
    hi[a] = std::min<Index>(dims[a] - 1, static_cast<Index>(std::ceil(g.center[a] + g.radius[a])));
  }
  for (Index z = lo[2]; z <= hi[2]; ++z)
    for (Index y = lo[1]; y <= hi[1]; ++y)
      for (Index x = lo[0]; x <= hi[0]; ++x)
        if (g.contains(double(x), double(y), double(z))) f(x, y, z);
}

bool placement_ok(const Geometry& g, double gap, const Dims& dims) {
  for (std::size_t i = 0; i < g.organs.size(); ++i) {
    const Ellipsoid& e = g.organs[i];
    // The grown organ must not leave the grid either.
    for (int a = 0; a < 3; ++a) {
      if (e.center[a] - e.radius[a] - gap < 0 || e.center[a] + e.radius[a] + gap > double(dims[a] - 1)) return false;
    }
    bool ok = true;
    for_each_voxel_in(e, gap, dims, [&](Index x, Index y, Index z) {
      if (!ok) return;
      if (g.body.level(double(x), double(y), double(z)) >= 1.0) ok = false;
      for (std::size_t j = 0; j < g.organs.size() && ok; ++j) {
        if (j != i && g.organs[j].contains(double(x), double(y), double(z))) ok = false;
      }
    });
    if (!ok) return false;
  }
  return true;
}

Geometry draw_geometry(const PhantomSpec& spec, Rng& rng) {
  const std::array<double, 3> centre{(spec.dims.x - 1) / 2.0, (spec.dims.y - 1) / 2.0, (spec.dims.z - 1) / 2.0};
  const std::array<double, 3> half{spec.dims.x / 2.0, spec.dims.y / 2.0, spec.dims.z / 2.0};
  for (int attempt = 0; attempt < spec.max_attempts; ++attempt) {
    Geometry g;
    g.body.center = centre;
    for (int a = 0; a < 3; ++a) g.body.radius[a] = half[a] * uniform(rng, spec.body_radius_lo[a], spec.body_radius_hi[a]);
    for (std::size_t k = 0; k < 4; ++k) {
      const OrganRange& r = spec.organs[k];
      for (int a = 0; a < 3; ++a) {
        g.organs[k].center[a] = centre[a] + g.body.radius[a] * uniform(rng, r.center_lo[a], r.center_hi[a]);
        g.organs[k].radius[a] = g.body.radius[a] * uniform(rng, r.radius_lo[a], r.radius_hi[a]);
      }
    }
    if (placement_ok(g, spec.organ_gap, spec.dims)) return g;
  }
  throw DomainError(fmt::format("phantom seed {}: no collision-free organ placement in {} attempts", spec.seed,
                                spec.max_attempts));
}

std::vector<Organ> rasterize(const Geometry& g, const Dims& dims) {
  std::vector<Organ> labels(static_cast<std::size_t>(dims.count()), Organ::background);
  for (std::size_t k = 0; k < 4; ++k) {
    for_each_voxel_in(g.organs[k], 0.0, dims, [&](Index x, Index y, Index z) {
      labels[static_cast<std::size_t>(x + dims.x * (y + dims.y * z))] = kOrgans[k];
    });
  }
  return labels;
}

std::vector<double> tissue_image(const Geometry& g, const std::vector<Organ>& labels, const Dims& dims,
                                 const MaterialTable& table, bool low) {
  std::vector<double> img(labels.size());
  auto hu = [low](const Material& m) { return low ? m.low_hu : m.high_hu; };
  for (Index z = 0; z < dims.z; ++z)
    for (Index y = 0; y < dims.y; ++y)
      for (Index x = 0; x < dims.x; ++x) {
        const auto i = static_cast<std::size_t>(x + dims.x * (y + dims.y * z));
        if (labels[i] != Organ::background) {
          img[i] = hu(table.organ(labels[i]));
        } else if (g.body.contains(double(x), double(y), double(z))) {
          img[i] = hu(table.soft_tissue);
        } else {
          img[i] = hu(table.air);
        }
      }
  return img;
}

// Separable Gaussian, radius ceil(3 sigma), edges replicated.
void blur(std::vector<double>& img, const Dims& dims, double sigma) {
  if (sigma <= 0.0) return;
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double total = 0.0;
  for (int i = -r; i <= r; ++i) total += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& w : k) w /= total;
  const Index stride[3] = {1, dims.x, dims.x * dims.y};
  std::vector<double> tmp(img.size());
  for (int a = 0; a < 3; ++a) {
    const Index n = dims[a];
    for (Index i = 0; i < dims.count(); ++i) {
      const Index pos = (i / stride[a]) % n;
      double acc = 0.0;
      for (int t = -r; t <= r; ++t) {
        const Index p = std::clamp<Index>(pos + t, 0, n - 1);
        acc += k[static_cast<std::size_t>(t + r)] * img[static_cast<std::size_t>(i + (p - pos) * stride[a])];
      }
      tmp[static_cast<std::size_t>(i)] = acc;
    }
    img.swap(tmp);
  }
}

Volume noisy_volume(const std::vector<double>& clean, double sigma, Rng& rng, const PhantomSpec& spec) {
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<float> out(clean.size());
  for (std::size_t i = 0; i < clean.size(); ++i) out[i] = static_cast<float>(clean[i] + sigma * noise(rng));
  return Volume(spec.dims, spec.spacing, std::move(out));
}

Rng stream(std::uint64_t seed, std::uint64_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(purpose)};
  return Rng(seq);
}

}  // namespace

Phantom generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  Rng geometry_rng = stream(spec.seed, 0);
  const Geometry g = draw_geometry(spec, geometry_rng);
  std::vector<Organ> labels = rasterize(g, spec.dims);
  std::vector<double> low = tissue_image(g, labels, spec.dims, spec.materials, true);
  std::vector<double> high = tissue_image(g, labels, spec.dims, spec.materials, false);
  blur(low, spec.dims, spec.blur_sigma);
  blur(high, spec.dims, spec.blur_sigma);
  Rng low_rng = stream(spec.seed, 1);
  Rng high_rng = stream(spec.seed, 2);
  return Phantom{noisy_volume(low, spec.noise_low_hu, low_rng, spec),
                 noisy_volume(high, spec.noise_high_hu, high_rng, spec),
                 LabelVolume(spec.dims, spec.spacing, std::move(labels)), g.body, g.organs};
}

Phantom generate_sect_phantom(const PhantomSpec& spec, double noise_hu) {
  spec.validate();
  if (noise_hu < 0) throw ConfigError("SECT noise must be non-negative");
  Rng geometry_rng = stream(spec.seed, 0);
  const Geometry g = draw_geometry(spec, geometry_rng);
  std::vector<Organ> labels = rasterize(g, spec.dims);
  // A single-spectrum table has low == high, so either column works.
  std::vector<double> img = tissue_image(g, labels, spec.dims, spec.materials, true);
  blur(img, spec.dims, spec.blur_sigma);
  Rng rng = stream(spec.seed, 3);
  Volume v = noisy_volume(img, noise_hu, rng, spec);
  return Phantom{v, v, LabelVolume(spec.dims, spec.spacing, std::move(labels)), g.body, g.organs};
}

std::vector<std::string> DatasetManifest::ids() const {
  std::vector<std::string> out;
  for (const auto& c : cases) out.push_back(c.id);
  return out;
}

const ManifestCase& DatasetManifest::find(const std::string& id) const {
  for (const auto& c : cases)
    if (c.id == id) return c;
  throw ConfigError("manifest has no case '" + id + "'");
}

namespace {

DatasetManifest write_dataset(int n, std::uint64_t base_seed, const std::filesystem::path& out_dir,
                              const PhantomSpec& spec, const std::string& kind, double sect_noise) {
  if (n < 1) throw ConfigError("dataset size must be >= 1");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  DatasetManifest m;
  m.kind = kind;
  m.root = out_dir;
  for (int i = 0; i < n; ++i) {
    PhantomSpec s = spec;
    s.seed = base_seed + static_cast<std::uint64_t>(i);
    const Phantom p = kind == "sect" ? generate_sect_phantom(s, sect_noise) : generate_phantom(s);
    ManifestCase c;
    c.id = fmt::format("{}_{:03d}", kind, i);
    c.low = c.id + "_low.mhd";
    c.high = c.id + "_high.mhd";
    c.labels = c.id + "_labels.mhd";
    c.seed = s.seed;
    write_metaimage(p.low, out_dir / c.low);
    write_metaimage(p.high, out_dir / c.high);
    write_metaimage(p.labels, out_dir / c.labels);
    m.cases.push_back(std::move(c));
  }
  save_manifest(m);
  return m;
}

}  // namespace

DatasetManifest generate_dataset(int n, std::uint64_t base_seed, const std::filesystem::path& out_dir,
                                 PhantomSpec spec) {
  return write_dataset(n, base_seed, out_dir, spec, "dect", 0.0);
}

DatasetManifest sect_like_dataset(int n, std::uint64_t base_seed, const std::filesystem::path& out_dir,
                                  PhantomSpec spec, double noise_hu) {
  spec.materials = sect_materials();
  return write_dataset(n, base_seed, out_dir, spec, "sect", noise_hu);
}

void save_manifest(const DatasetManifest& manifest) {
  nlohmann::ordered_json j;
  j["kind"] = manifest.kind;
  j["cases"] = nlohmann::ordered_json::array();
  for (const auto& c : manifest.cases) {
    j["cases"].push_back({{"id", c.id},
                          {"low", c.low.generic_string()},
                          {"high", c.high.generic_string()},
                          {"labels", c.labels.generic_string()},
                          {"seed", c.seed}});
  }
  std::ofstream f(manifest.root / kManifestFile, std::ios::binary);
  if (!f) throw IoError("cannot write manifest in " + manifest.root.string());
  f << j.dump(2) << '\n';
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  const auto file = std::filesystem::is_directory(path) ? path / kManifestFile : path;
  std::ifstream f(file);
  if (!f) throw IoError("cannot open manifest " + file.string());
  DatasetManifest m;
  m.root = file.parent_path();
  try {
    const auto j = nlohmann::json::parse(f);
    m.kind = j.at("kind").get<std::string>();
    for (const auto& c : j.at("cases")) {
      m.cases.push_back({c.at("id").get<std::string>(), c.at("low").get<std::string>(),
                         c.at("high").get<std::string>(), c.at("labels").get<std::string>(),
                         c.at("seed").get<std::uint64_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest " + file.string() + ": " + e.what());
  }
  std::vector<std::uint64_t> seeds;
  for (const auto& c : m.cases) {
    if (std::find(seeds.begin(), seeds.end(), c.seed) != seeds.end()) {
      throw FormatError("manifest " + file.string() + ": duplicate seed " + std::to_string(c.seed));
    }
    seeds.push_back(c.seed);
  }
  return m;
}

LoadedCase load_case(const DatasetManifest& manifest, const ManifestCase& entry) {
  DectPair pair(read_volume(manifest.root / entry.low), read_volume(manifest.root / entry.high), entry.id);
  LabelVolume labels = read_labels(manifest.root / entry.labels);
  if (!same_geometry(labels, pair.low())) throw ShapeError("case " + entry.id + ": labels do not match the images");
  return LoadedCase{std::move(pair), std::move(labels)};
}

}  // namespace dectseg
