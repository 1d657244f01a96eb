#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dectseg/errors.hpp"

namespace dectseg {

using Index = std::int64_t;

/// Voxel counts along x, y, z.
struct Dims {
  Index x = 0;
  Index y = 0;
  Index z = 0;

  constexpr Index count() const { return x * y * z; }
  constexpr Index operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
  friend constexpr bool operator==(const Dims&, const Dims&) = default;
};

/// Voxel size in millimetres.
struct Spacing {
  double x = 1.0;
  double y = 1.0;
  double z = 1.0;

  constexpr double operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
  friend constexpr bool operator==(const Spacing&, const Spacing&) = default;
};

/// Organ label set. The integer codes are the on-disk encoding.
enum class Organ : std::uint8_t {
  background = 0,
  liver = 1,
  spleen = 2,
  right_kidney = 3,
  left_kidney = 4,
};

inline constexpr int kNumClasses = 5;
inline constexpr std::array<Organ, 4> kOrgans{Organ::liver, Organ::spleen, Organ::right_kidney,
                                              Organ::left_kidney};

std::string_view organ_name(Organ organ);
Organ organ_from_name(std::string_view name);

/// Per-element-type validation and on-disk element type.
template <typename T>
struct GridTraits;

template <>
struct GridTraits<float> {
  static constexpr std::string_view element_type = "MET_FLOAT";
  static bool valid(float v) { return std::isfinite(v); }
};

template <>
struct GridTraits<Organ> {
  static constexpr std::string_view element_type = "MET_UCHAR";
  static bool valid(Organ v) { return static_cast<std::uint8_t>(v) < kNumClasses; }
};

template <>
struct GridTraits<std::uint8_t> {
  static constexpr std::string_view element_type = "MET_UCHAR";
  static bool valid(std::uint8_t v) { return v <= 1; }
};

/// Immutable voxel grid, x-fastest linear layout.
template <typename T>
class Grid {
 public:
  using value_type = T;

  Grid() = default;

  Grid(Dims dims, Spacing spacing, T fill) : Grid(dims, spacing, std::vector<T>(checked_count(dims), fill)) {}

  Grid(Dims dims, Spacing spacing, std::vector<T> values)
      : dims_(dims), spacing_(spacing), values_(std::move(values)) {
    const Index n = checked_count(dims);
    if (static_cast<Index>(values_.size()) != n) {
      throw ShapeError("grid value count " + std::to_string(values_.size()) + " != " + std::to_string(n));
    }
    if (!(spacing.x > 0.0 && spacing.y > 0.0 && spacing.z > 0.0) || !std::isfinite(spacing.x) ||
        !std::isfinite(spacing.y) || !std::isfinite(spacing.z)) {
      throw DomainError("grid spacing must be strictly positive");
    }
    for (const T& v : values_) {
      if (!GridTraits<T>::valid(v)) throw DomainError("grid value outside admissible domain");
    }
  }

  const Dims& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  Index size() const { return static_cast<Index>(values_.size()); }
  bool empty() const { return values_.empty(); }

  Index index(Index x, Index y, Index z) const { return x + dims_.x * (y + dims_.y * z); }

  const T& operator[](Index i) const { return values_[static_cast<std::size_t>(i)]; }
  const T& operator()(Index x, Index y, Index z) const { return (*this)[index(x, y, z)]; }

  std::span<const T> values() const { return values_; }

  /// Moves the storage out; leaves the grid empty.
  std::vector<T> release() && { return std::move(values_); }

  friend bool operator==(const Grid&, const Grid&) = default;

 private:
  static Index checked_count(Dims dims) {
    if (dims.x <= 0 || dims.y <= 0 || dims.z <= 0) throw ShapeError("grid dims must be positive");
    return dims.count();
  }

  Dims dims_{};
  Spacing spacing_{};
  std::vector<T> values_;
};

using Volume = Grid<float>;
using LabelVolume = Grid<Organ>;
using MaskVolume = Grid<std::uint8_t>;

/// Co-registered low-kV / high-kV acquisition.
class DectPair {
 public:
  DectPair(Volume low, Volume high, std::string id = {});

  const Volume& low() const { return low_; }
  const Volume& high() const { return high_; }
  const std::string& id() const { return id_; }

 private:
  Volume low_;
  Volume high_;
  std::string id_;
};

struct VolumeStats {
  double min = 0.0;
  double max = 0.0;
  double mean = 0.0;
  Index voxel_count = 0;
};

VolumeStats volume_stats(const Volume& volume);

template <typename A, typename B>
bool same_geometry(const Grid<A>& a, const Grid<B>& b) {
  return a.dims() == b.dims() && a.spacing() == b.spacing();
}

}  // namespace dectseg
