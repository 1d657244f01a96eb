#include "dectseg/preproc.hpp"

#include <algorithm>
#include <deque>
#include <map>

namespace dectseg {

MixConfig::MixConfig(double alpha) : alpha_(alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw DomainError("alpha must lie in [0, 1], got " + std::to_string(alpha));
}

bool BoundingBox::fits(const Dims& dims) const {
  for (int a = 0; a < 3; ++a) {
    if (lo[a] < 0 || lo[a] >= hi[a] || hi[a] > dims[a]) return false;
  }
  return true;
}

Volume mix(const DectPair& pair, const MixConfig& cfg) {
  const Volume& low = pair.low();
  const Volume& high = pair.high();
  if (!same_geometry(low, high)) throw ShapeError("mix: low/high geometry differs");
  const double a = cfg.alpha();
  std::vector<float> out(static_cast<std::size_t>(low.size()));
  for (Index i = 0; i < low.size(); ++i) {
    out[static_cast<std::size_t>(i)] = static_cast<float>(a * low[i] + (1.0 - a) * high[i]);
  }
  return Volume(low.dims(), low.spacing(), std::move(out));
}

namespace {

// Visits the 6-neighbours of linear index i.
template <typename F>
void for_each_neighbour(const Dims& d, Index i, F&& f) {
  const Index x = i % d.x;
  const Index y = (i / d.x) % d.y;
  const Index z = i / (d.x * d.y);
  if (x > 0) f(i - 1);
  if (x + 1 < d.x) f(i + 1);
  if (y > 0) f(i - d.x);
  if (y + 1 < d.y) f(i + d.x);
  if (z > 0) f(i - d.x * d.y);
  if (z + 1 < d.z) f(i + d.x * d.y);
}

bool on_border(const Dims& d, Index i) {
  const Index x = i % d.x;
  const Index y = (i / d.x) % d.y;
  const Index z = i / (d.x * d.y);
  return x == 0 || y == 0 || z == 0 || x == d.x - 1 || y == d.y - 1 || z == d.z - 1;
}

}  // namespace

MaskVolume body_mask(const Volume& mixed, double threshold_hu) {
  const Dims d = mixed.dims();
  const Index n = mixed.size();
  std::vector<std::int32_t> component(static_cast<std::size_t>(n), -1);
  std::int32_t best = -1;
  Index best_size = 0;
  std::int32_t next = 0;
  std::vector<Index> stack;

  for (Index seed = 0; seed < n; ++seed) {
    if (mixed[seed] < threshold_hu || component[seed] >= 0) continue;
    Index size = 0;
    component[seed] = next;
    stack.push_back(seed);
    while (!stack.empty()) {
      const Index i = stack.back();
      stack.pop_back();
      ++size;
      for_each_neighbour(d, i, [&](Index j) {
        if (component[j] < 0 && mixed[j] >= threshold_hu) {
          component[j] = next;
          stack.push_back(j);
        }
      });
    }
    if (size > best_size) {
      best_size = size;
      best = next;
    }
    ++next;
  }
  if (best < 0) throw DomainError("empty body: no voxel at or above the skin threshold");

  // Exterior = everything outside the body reachable from the grid border.
  std::vector<std::uint8_t> exterior(static_cast<std::size_t>(n), 0);
  for (Index i = 0; i < n; ++i) {
    if (component[i] != best && on_border(d, i)) {
      exterior[i] = 1;
      stack.push_back(i);
    }
  }
  while (!stack.empty()) {
    const Index i = stack.back();
    stack.pop_back();
    for_each_neighbour(d, i, [&](Index j) {
      if (!exterior[j] && component[j] != best) {
        exterior[j] = 1;
        stack.push_back(j);
      }
    });
  }
  std::vector<std::uint8_t> out(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) out[i] = exterior[i] ? 0 : 1;
  return MaskVolume(d, mixed.spacing(), std::move(out));
}

Volume normalize(const Volume& volume, const MaskVolume& mask) {
  if (volume.dims() != mask.dims()) throw ShapeError("normalize: mask dims differ");
  std::vector<float> out(static_cast<std::size_t>(volume.size()));
  for (Index i = 0; i < volume.size(); ++i) {
    if (!mask[i]) {
      out[i] = -1.0f;
      continue;
    }
    const double hu = std::clamp(static_cast<double>(volume[i]), -1024.0, 1024.0);
    out[i] = static_cast<float>(hu / 1024.0);
  }
  return Volume(volume.dims(), volume.spacing(), std::move(out));
}

namespace {

void check_factor(const std::array<Index, 3>& f) {
  if (f[0] <= 0 || f[1] <= 0 || f[2] <= 0) throw DomainError("downsample factor must be positive");
}

Dims coarse_dims(const Dims& d, const std::array<Index, 3>& f) {
  return Dims{(d.x + f[0] - 1) / f[0], (d.y + f[1] - 1) / f[1], (d.z + f[2] - 1) / f[2]};
}

// Calls visit(value) for every voxel of coarse block (cx, cy, cz), with edge
// replication past the fine grid.
template <typename T, typename F>
void for_each_in_block(const Grid<T>& g, const std::array<Index, 3>& f, Index cx, Index cy, Index cz, F&& visit) {
  const Dims& d = g.dims();
  for (Index k = 0; k < f[2]; ++k) {
    const Index z = std::min(cz * f[2] + k, d.z - 1);
    for (Index j = 0; j < f[1]; ++j) {
      const Index y = std::min(cy * f[1] + j, d.y - 1);
      for (Index i = 0; i < f[0]; ++i) {
        const Index x = std::min(cx * f[0] + i, d.x - 1);
        visit(g(x, y, z));
      }
    }
  }
}

template <typename T, typename Reduce>
Grid<T> block_reduce(const Grid<T>& g, const std::array<Index, 3>& f, Reduce&& reduce) {
  check_factor(f);
  if (f == std::array<Index, 3>{1, 1, 1}) return g;
  const Dims cd = coarse_dims(g.dims(), f);
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(cd.count()));
  for (Index z = 0; z < cd.z; ++z)
    for (Index y = 0; y < cd.y; ++y)
      for (Index x = 0; x < cd.x; ++x) out.push_back(reduce(x, y, z));
  const Spacing s = g.spacing();
  return Grid<T>(cd, Spacing{s.x * f[0], s.y * f[1], s.z * f[2]}, std::move(out));
}

template <typename T>
Grid<T> majority_downsample(const Grid<T>& g, const std::array<Index, 3>& f) {
  return block_reduce(g, f, [&](Index x, Index y, Index z) {
    std::array<int, 256> counts{};
    for_each_in_block(g, f, x, y, z, [&](T v) { ++counts[static_cast<std::uint8_t>(v)]; });
    int best = 0;
    for (int v = 1; v < 256; ++v) {
      if (counts[v] > counts[best]) best = v;
    }
    return static_cast<T>(best);
  });
}

template <typename T>
Grid<T> upsample_impl(const Grid<T>& coarse, const std::array<Index, 3>& f, const Dims& target) {
  check_factor(f);
  const Dims cd = coarse.dims();
  if (coarse_dims(target, f) != cd) throw ShapeError("upsample: target dims incompatible with coarse grid");
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(target.count()));
  for (Index z = 0; z < target.z; ++z)
    for (Index y = 0; y < target.y; ++y)
      for (Index x = 0; x < target.x; ++x) out.push_back(coarse(x / f[0], y / f[1], z / f[2]));
  const Spacing s = coarse.spacing();
  return Grid<T>(target, Spacing{s.x / f[0], s.y / f[1], s.z / f[2]}, std::move(out));
}

}  // namespace

Volume downsample(const Volume& volume, const std::array<Index, 3>& factor) {
  const double n = static_cast<double>(factor[0] * factor[1] * factor[2]);
  return block_reduce(volume, factor, [&](Index x, Index y, Index z) {
    double sum = 0.0;
    for_each_in_block(volume, factor, x, y, z, [&](float v) { sum += v; });
    return static_cast<float>(sum / n);
  });
}

LabelVolume downsample(const LabelVolume& labels, const std::array<Index, 3>& factor) {
  return majority_downsample(labels, factor);
}

MaskVolume downsample(const MaskVolume& mask, const std::array<Index, 3>& factor) {
  return majority_downsample(mask, factor);
}

Volume upsample_nearest(const Volume& coarse, const std::array<Index, 3>& factor, const Dims& target) {
  return upsample_impl(coarse, factor, target);
}
LabelVolume upsample_nearest(const LabelVolume& coarse, const std::array<Index, 3>& factor, const Dims& target) {
  return upsample_impl(coarse, factor, target);
}
MaskVolume upsample_nearest(const MaskVolume& coarse, const std::array<Index, 3>& factor, const Dims& target) {
  return upsample_impl(coarse, factor, target);
}

BoundingBox roi_from_mask(const MaskVolume& mask, Index margin) {
  if (margin < 0) throw DomainError("ROI margin must be non-negative");
  const Dims d = mask.dims();
  BoundingBox box{{d.x, d.y, d.z}, {-1, -1, -1}};
  bool any = false;
  for (Index z = 0; z < d.z; ++z)
    for (Index y = 0; y < d.y; ++y)
      for (Index x = 0; x < d.x; ++x) {
        if (!mask(x, y, z)) continue;
        any = true;
        const std::array<Index, 3> p{x, y, z};
        for (int a = 0; a < 3; ++a) {
          box.lo[a] = std::min(box.lo[a], p[a]);
          box.hi[a] = std::max(box.hi[a], p[a] + 1);
        }
      }
  if (!any) throw DomainError("ROI requested from an empty mask");
  for (int a = 0; a < 3; ++a) {
    box.lo[a] = std::max<Index>(0, box.lo[a] - margin);
    box.hi[a] = std::min<Index>(d[a], box.hi[a] + margin);
  }
  return box;
}

BoundingBox expand_box(const BoundingBox& box, Index min_extent, const Dims& dims) {
  BoundingBox out = box;
  for (int a = 0; a < 3; ++a) {
    const Index want = std::min(min_extent, dims[a]);
    const Index have = out.hi[a] - out.lo[a];
    if (have >= want) continue;
    const Index grow = want - have;
    Index lo = out.lo[a] - grow / 2;
    lo = std::clamp<Index>(lo, 0, dims[a] - want);
    out.lo[a] = lo;
    out.hi[a] = lo + want;
  }
  return out;
}

template <typename T>
Grid<T> crop(const Grid<T>& grid, const BoundingBox& box) {
  if (!box.fits(grid.dims())) throw ShapeError("crop: box outside the grid");
  const Dims e = box.extent();
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(e.count()));
  for (Index z = box.lo[2]; z < box.hi[2]; ++z)
    for (Index y = box.lo[1]; y < box.hi[1]; ++y)
      for (Index x = box.lo[0]; x < box.hi[0]; ++x) out.push_back(grid(x, y, z));
  return Grid<T>(e, grid.spacing(), std::move(out));
}

template <typename T>
Grid<T> embed(const Grid<T>& cropped, const BoundingBox& box, const Dims& full_dims, T fill_value) {
  if (!box.fits(full_dims) || box.extent() != cropped.dims()) throw ShapeError("embed: box does not match");
  std::vector<T> out(static_cast<std::size_t>(full_dims.count()), fill_value);
  for (Index z = 0; z < cropped.dims().z; ++z)
    for (Index y = 0; y < cropped.dims().y; ++y)
      for (Index x = 0; x < cropped.dims().x; ++x) {
        const Index fx = x + box.lo[0], fy = y + box.lo[1], fz = z + box.lo[2];
        out[static_cast<std::size_t>(fx + full_dims.x * (fy + full_dims.y * fz))] = cropped(x, y, z);
      }
  return Grid<T>(full_dims, cropped.spacing(), std::move(out));
}

template Grid<float> crop(const Grid<float>&, const BoundingBox&);
template Grid<Organ> crop(const Grid<Organ>&, const BoundingBox&);
template Grid<std::uint8_t> crop(const Grid<std::uint8_t>&, const BoundingBox&);
template Grid<float> embed(const Grid<float>&, const BoundingBox&, const Dims&, float);
template Grid<Organ> embed(const Grid<Organ>&, const BoundingBox&, const Dims&, Organ);
template Grid<std::uint8_t> embed(const Grid<std::uint8_t>&, const BoundingBox&, const Dims&, std::uint8_t);

MaskVolume foreground(const LabelVolume& labels) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(labels.size()));
  for (Index i = 0; i < labels.size(); ++i) out[i] = labels[i] != Organ::background ? 1 : 0;
  return MaskVolume(labels.dims(), labels.spacing(), std::move(out));
}

}  // namespace dectseg
