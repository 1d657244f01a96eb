#include <doctest.h>

#include <fstream>

#include "dectseg/metaimage.hpp"
#include "dectseg/phantom.hpp"
#include "dectseg/preproc.hpp"
#include "scratch_dir.hpp"

using namespace dectseg;
using dectseg::testing::ScratchDir;

namespace {

PhantomSpec small_spec(std::uint64_t seed) {
  PhantomSpec s;
  s.seed = seed;
  s.dims = {48, 48, 48};
  return s;
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// Ellipsoid shrunk or grown by `d` voxels along every semi-axis.
Ellipsoid offset(Ellipsoid e, double d) {
  for (double& r : e.radius) r += d;
  return e;
}

}  // namespace

TEST_CASE("same seed gives a bit-identical phantom") {
  const Phantom a = generate_phantom(small_spec(5));
  const Phantom b = generate_phantom(small_spec(5));
  CHECK(a.low == b.low);
  CHECK(a.high == b.high);
  CHECK(a.labels == b.labels);
  const Phantom c = generate_phantom(small_spec(6));
  CHECK_FALSE(a.labels == c.labels);
  // Independent noise per spectrum.
  CHECK_FALSE(a.low == a.high);
}

TEST_CASE("organ layout") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    CAPTURE(seed);
    const Phantom p = generate_phantom(small_spec(seed));
    const Dims d = p.labels.dims();
    double sum_x[kNumClasses] = {};
    Index count[kNumClasses] = {};
    for (Index z = 0; z < d.z; ++z)
      for (Index y = 0; y < d.y; ++y)
        for (Index x = 0; x < d.x; ++x) {
          const auto l = static_cast<int>(p.labels(x, y, z));
          sum_x[l] += double(x);
          ++count[l];
          // Labels lie strictly inside the body.
          if (l != 0) CHECK(p.body.level(double(x), double(y), double(z)) < 1.0);
          // Labels are the rasterised geometry of exactly one organ.
          int inside = 0;
          for (std::size_t k = 0; k < 4; ++k) inside += p.organs[k].contains(double(x), double(y), double(z));
          CHECK(inside <= 1);
          CHECK((inside == 1) == (l != 0));
        }
    for (int l = 1; l < kNumClasses; ++l) CHECK(count[l] > 0);
    CHECK(count[1] > count[2]);
    CHECK(count[2] > count[3]);
    CHECK(sum_x[3] / count[3] < sum_x[4] / count[4]);
  }
}

TEST_CASE("liver mean HU matches the material table") {
  PhantomSpec s = small_spec(11);
  const Phantom p = generate_phantom(s);
  // Interior voxels only: blur mixes in neighbouring tissue within ~3 sigma.
  const Ellipsoid core = offset(p.organs[0], -3.0);
  double sum_low = 0.0, sum_high = 0.0;
  Index n = 0;
  const Dims d = p.low.dims();
  for (Index z = 0; z < d.z; ++z)
    for (Index y = 0; y < d.y; ++y)
      for (Index x = 0; x < d.x; ++x)
        if (core.contains(double(x), double(y), double(z))) {
          sum_low += p.low(x, y, z);
          sum_high += p.high(x, y, z);
          ++n;
        }
  REQUIRE(n > 100);
  CHECK(std::abs(sum_low / n - s.materials.liver.low_hu) <= 3.0 * s.noise_low_hu / std::sqrt(double(n)));
  CHECK(std::abs(sum_high / n - s.materials.liver.high_hu) <= 3.0 * s.noise_high_hu / std::sqrt(double(n)));
}

TEST_CASE("low-kV contrast exceeds high-kV contrast") {
  const MaterialTable t = dect_materials();
  const Material organs[] = {t.liver, t.spleen, t.kidney};
  for (const Material& a : organs) {
    CHECK(std::abs(a.low_hu - t.soft_tissue.low_hu) >= std::abs(a.high_hu - t.soft_tissue.high_hu));
    for (const Material& b : organs) CHECK(std::abs(a.low_hu - b.low_hu) >= std::abs(a.high_hu - b.high_hu));
  }
}

TEST_CASE("body mask recovers the generator ellipsoid") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const Phantom p = generate_phantom(small_spec(seed));
    const MaskVolume m = body_mask(mix(DectPair(p.low, p.high), MixConfig(0.6)));
    const Ellipsoid inner = offset(p.body, -1.0);
    const Ellipsoid outer = offset(p.body, 1.0);
    const Dims d = m.dims();
    Index wrong = 0;
    for (Index z = 0; z < d.z; ++z)
      for (Index y = 0; y < d.y; ++y)
        for (Index x = 0; x < d.x; ++x) {
          const bool in = m(x, y, z) != 0;
          if (inner.contains(double(x), double(y), double(z)) && !in) ++wrong;
          if (!outer.contains(double(x), double(y), double(z)) && in) ++wrong;
        }
    CHECK(wrong == 0);
  }
}

TEST_CASE("SECT phantoms") {
  const PhantomSpec s = [] {
    PhantomSpec x = small_spec(4);
    x.materials = sect_materials();
    return x;
  }();
  const Phantom p = generate_sect_phantom(s, kDefaultSectNoiseHu);
  CHECK(p.low == p.high);
  for (double a : {0.0, 0.3, 0.6, 1.0}) CHECK(mix(DectPair(p.low, p.high), MixConfig(a)) == p.low);
  const MaterialTable sect = sect_materials(), dect = dect_materials();
  CHECK(sect.liver.low_hu == sect.liver.high_hu);
  CHECK(sect.liver.low_hu != dect.liver.low_hu);
  CHECK(sect.spleen.low_hu != dect.spleen.low_hu);
  CHECK(sect.kidney.low_hu != dect.kidney.low_hu);
  // Geometry follows the seed, not the material table.
  CHECK(p.labels == generate_phantom(small_spec(4)).labels);
}

TEST_CASE("mixed phantom stays between the spectra") {
  const Phantom p = generate_phantom(small_spec(8));
  const DectPair pair(p.low, p.high);
  for (double a : {0.0, 0.25, 0.6, 0.9, 1.0}) {
    const Volume m = mix(pair, MixConfig(a));
    for (Index i = 0; i < m.size(); ++i) {
      const double lo = std::min(p.low[i], p.high[i]), hi = std::max(p.low[i], p.high[i]);
      const double tol = 1e-5 * std::max({1.0, std::abs(lo), std::abs(hi)});
      CHECK_MESSAGE((m[i] >= lo - tol && m[i] <= hi + tol), "voxel ", i);
    }
  }
}

TEST_CASE("dataset on disk") {
  ScratchDir dir("phantom");
  const PhantomSpec s = small_spec(0);
  const DatasetManifest m = generate_dataset(3, 100, dir / "a", s);
  CHECK(m.cases.size() == 3);
  int mhd = 0, raw = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir / "a")) {
    mhd += e.path().extension() == ".mhd";
    raw += e.path().extension() == ".raw";
  }
  CHECK(mhd == 9);
  CHECK(raw == 9);
  CHECK(std::filesystem::exists(dir / "a" / kManifestFile));

  generate_dataset(3, 100, dir / "b", s);
  for (const auto& e : std::filesystem::directory_iterator(dir / "a")) {
    CHECK_MESSAGE(file_bytes(e.path()) == file_bytes(dir / "b" / e.path().filename()), e.path().filename());
  }

  const DatasetManifest back = load_manifest(dir / "a");
  CHECK(back.kind == "dect");
  CHECK(back.cases == m.cases);
  CHECK(load_manifest(dir / "a" / kManifestFile).cases == m.cases);
  for (std::size_t i = 0; i < back.cases.size(); ++i) {
    const auto& c = back.cases[i];
    CHECK(c.seed == 100 + i);
    const LoadedCase lc = load_case(back, c);
    CHECK(lc.pair.id() == c.id);
    PhantomSpec si = s;
    si.seed = c.seed;
    const Phantom p = generate_phantom(si);
    CHECK(lc.pair.low() == p.low);
    CHECK(lc.pair.high() == p.high);
    CHECK(lc.labels == p.labels);
  }
  CHECK(back.find(back.cases[1].id) == back.cases[1]);
  CHECK_THROWS_AS(back.find("nope"), ConfigError);
  CHECK_THROWS_AS(generate_dataset(0, 0, dir / "c", s), ConfigError);
}

TEST_CASE("SECT dataset and manifest validation") {
  ScratchDir dir("sect");
  const DatasetManifest m = sect_like_dataset(2, 7, dir.path(), small_spec(0));
  CHECK(m.kind == "sect");
  for (const auto& c : m.cases) {
    CHECK(file_bytes(dir / c.low.string().replace(c.low.string().size() - 3, 3, "raw")) ==
          file_bytes(dir / c.high.string().replace(c.high.string().size() - 3, 3, "raw")));
  }

  {
    std::ofstream f(dir / "dup.json");
    f << R"({"kind":"dect","cases":[{"id":"a","low":"x","high":"y","labels":"z","seed":1},)"
         R"({"id":"b","low":"x","high":"y","labels":"z","seed":1}]})";
  }
  CHECK_THROWS_AS(load_manifest(dir / "dup.json"), FormatError);
  {
    std::ofstream f(dir / "bad.json");
    f << R"({"kind":"dect","cases":[{"id":"a"}]})";
  }
  CHECK_THROWS_AS(load_manifest(dir / "bad.json"), FormatError);
  CHECK_THROWS_AS(load_manifest(dir / "missing.json"), IoError);
}

TEST_CASE("spec validation and placement failure") {
  PhantomSpec s = small_spec(0);
  s.noise_low_hu = -1;
  CHECK_THROWS_AS(generate_phantom(s), ConfigError);
  s = small_spec(0);
  s.organs[0].radius_lo = {0.9, 0.9, 0.9};
  s.organs[0].radius_hi = {0.95, 0.95, 0.95};
  s.max_attempts = 5;
  CHECK_THROWS_AS(generate_phantom(s), DomainError);
}
