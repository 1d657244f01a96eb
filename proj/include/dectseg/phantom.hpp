#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dectseg/volume.hpp"

namespace dectseg {

/// Attenuation of one tissue at the two simulated spectra.
struct Material {
  double low_hu = 0.0;   // 70 kV
  double high_hu = 0.0;  // Sn 150 kV
  friend bool operator==(const Material&, const Material&) = default;
};

struct MaterialTable {
  Material air{-1000.0, -1000.0};
  Material soft_tissue{60.0, 45.0};
  Material liver{120.0, 70.0};
  Material spleen{110.0, 65.0};
  Material kidney{140.0, 75.0};

  const Material& organ(Organ o) const;
  friend bool operator==(const MaterialTable&, const MaterialTable&) = default;
};

/// Dual-energy defaults: low-kV soft-tissue contrast exceeds high-kV.
MaterialTable dect_materials();
/// Single 120 kV-like spectrum: low == high for every tissue.
MaterialTable sect_materials();

/// Axis-aligned ellipsoid in voxel coordinates (voxel centres at integers).
struct Ellipsoid {
  std::array<double, 3> center{};
  std::array<double, 3> radius{};

  /// Normalised squared distance; <= 1 inside.
  double level(double x, double y, double z) const;
  bool contains(double x, double y, double z) const { return level(x, y, z) <= 1.0; }
};

/// Sampling box for one organ. Centres are in body-normalised coordinates
/// ([-1, 1] spans the body semi-axis), radii are fractions of the body
/// semi-axes. Patient right is low x, posterior is high y.
struct OrganRange {
  std::array<double, 3> center_lo{};
  std::array<double, 3> center_hi{};
  std::array<double, 3> radius_lo{};
  std::array<double, 3> radius_hi{};
};

struct PhantomSpec {
  std::uint64_t seed = 0;
  Dims dims{64, 64, 64};
  Spacing spacing{0.9, 0.9, 0.6};
  MaterialTable materials = dect_materials();
  double noise_low_hu = 25.0;
  double noise_high_hu = 12.0;
  double blur_sigma = 0.7;  // voxels
  // Body semi-axes as fractions of the half extents.
  std::array<double, 3> body_radius_lo{0.80, 0.62, 0.86};
  std::array<double, 3> body_radius_hi{0.88, 0.72, 0.94};
  std::array<OrganRange, 4> organs = default_organ_ranges();  // indexed like kOrgans
  double organ_gap = 1.5;  // voxels between organs and inside the body surface
  int max_attempts = 200;

  static std::array<OrganRange, 4> default_organ_ranges();
  void validate() const;
};

struct Phantom {
  Volume low;
  Volume high;
  LabelVolume labels;
  Ellipsoid body;
  std::array<Ellipsoid, 4> organs;  // indexed like kOrgans
};

/// Deterministic per spec.seed. Throws DomainError when no collision-free
/// placement is found within spec.max_attempts.
Phantom generate_phantom(const PhantomSpec& spec);

/// Same geometry draw as generate_phantom, but one noise field shared by
/// both spectra so low and high are bit-identical.
Phantom generate_sect_phantom(const PhantomSpec& spec, double noise_hu);

inline constexpr double kDefaultSectNoiseHu = 18.0;

struct ManifestCase {
  std::string id;
  std::filesystem::path low;  // relative to the manifest directory
  std::filesystem::path high;
  std::filesystem::path labels;
  std::uint64_t seed = 0;
  friend bool operator==(const ManifestCase&, const ManifestCase&) = default;
};

struct DatasetManifest {
  std::string kind;  // "dect" or "sect"
  std::filesystem::path root;  // directory holding the manifest; not serialised
  std::vector<ManifestCase> cases;

  std::vector<std::string> ids() const;
  const ManifestCase& find(const std::string& id) const;
};

inline constexpr const char* kManifestFile = "manifest.json";

/// Writes n phantoms with seeds base_seed + i plus manifest.json into
/// out_dir (created if missing).
DatasetManifest generate_dataset(int n, std::uint64_t base_seed, const std::filesystem::path& out_dir,
                                 PhantomSpec spec = {});
DatasetManifest sect_like_dataset(int n, std::uint64_t base_seed, const std::filesystem::path& out_dir,
                                  PhantomSpec spec = {}, double noise_hu = kDefaultSectNoiseHu);

void save_manifest(const DatasetManifest& manifest);
/// Accepts the manifest file or the directory containing it.
DatasetManifest load_manifest(const std::filesystem::path& path);

struct LoadedCase {
  DectPair pair;
  LabelVolume labels;
};
LoadedCase load_case(const DatasetManifest& manifest, const ManifestCase& entry);

}  // namespace dectseg
