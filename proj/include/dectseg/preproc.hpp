#pragma once

#include <array>

#include "dectseg/volume.hpp"

namespace dectseg {

/// Blending weight of the dual-energy composition, validated to [0, 1].
class MixConfig {
 public:
  explicit MixConfig(double alpha);
  double alpha() const { return alpha_; }

 private:
  double alpha_;
};

/// Axis-aligned voxel box: lo inclusive, hi exclusive.
struct BoundingBox {
  std::array<Index, 3> lo{};
  std::array<Index, 3> hi{};

  Dims extent() const { return Dims{hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]}; }
  bool contains(Index x, Index y, Index z) const {
    return x >= lo[0] && x < hi[0] && y >= lo[1] && y < hi[1] && z >= lo[2] && z < hi[2];
  }
  bool fits(const Dims& dims) const;
  static BoundingBox whole(const Dims& dims) { return {{0, 0, 0}, {dims.x, dims.y, dims.z}}; }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

inline constexpr double kDefaultSkinThresholdHu = -500.0;
inline constexpr Index kDefaultRoiMargin = 8;

/// alpha * low + (1 - alpha) * high, voxel by voxel.
Volume mix(const DectPair& pair, const MixConfig& cfg);

/// Largest 6-connected component of {v >= threshold} with enclosed cavities
/// filled. Throws DomainError("empty body") when nothing passes the threshold.
MaskVolume body_mask(const Volume& mixed, double threshold_hu = kDefaultSkinThresholdHu);

/// Clamp to [-1024, 1024] HU, map affinely to [-1, 1], set outside-mask
/// voxels to -1.
Volume normalize(const Volume& volume, const MaskVolume& mask);

/// Block reduction by an integer factor per axis; edges are padded by
/// replication up to the next multiple. Scalars use the block mean, labels
/// and masks the majority value (smallest value wins ties).
Volume downsample(const Volume& volume, const std::array<Index, 3>& factor);
LabelVolume downsample(const LabelVolume& labels, const std::array<Index, 3>& factor);
MaskVolume downsample(const MaskVolume& mask, const std::array<Index, 3>& factor);

/// Nearest-neighbour replication back onto a finer grid of `target` dims
/// (voxel i maps to coarse voxel i / factor).
Volume upsample_nearest(const Volume& coarse, const std::array<Index, 3>& factor, const Dims& target);
LabelVolume upsample_nearest(const LabelVolume& coarse, const std::array<Index, 3>& factor, const Dims& target);
MaskVolume upsample_nearest(const MaskVolume& coarse, const std::array<Index, 3>& factor, const Dims& target);

inline std::array<Index, 3> uniform_factor(Index f) { return {f, f, f}; }

/// Tight box around true voxels, dilated by `margin` per face, clipped to
/// the volume. Throws DomainError on an empty mask.
BoundingBox roi_from_mask(const MaskVolume& mask, Index margin);

/// Grows `box` to at least `min_extent` per axis, keeping it centred where
/// possible and inside `dims`. Axes where dims < min_extent stay at dims.
BoundingBox expand_box(const BoundingBox& box, Index min_extent, const Dims& dims);

template <typename T>
Grid<T> crop(const Grid<T>& grid, const BoundingBox& box);

/// Writes `cropped` into a `full_dims` grid at `box`, filling the rest.
template <typename T>
Grid<T> embed(const Grid<T>& cropped, const BoundingBox& box, const Dims& full_dims, T fill_value);

/// Elementwise mask of voxels whose label is not background.
MaskVolume foreground(const LabelVolume& labels);

}  // namespace dectseg
