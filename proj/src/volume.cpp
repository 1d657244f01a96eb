#include "dectseg/volume.hpp"

#include <algorithm>
#include <limits>

namespace dectseg {

std::string_view organ_name(Organ organ) {
  switch (organ) {
    case Organ::background: return "background";
    case Organ::liver: return "liver";
    case Organ::spleen: return "spleen";
    case Organ::right_kidney: return "r.kidney";
    case Organ::left_kidney: return "l.kidney";
  }
  return "unknown";
}

Organ organ_from_name(std::string_view name) {
  for (int c = 0; c < kNumClasses; ++c) {
    const auto organ = static_cast<Organ>(c);
    if (organ_name(organ) == name) return organ;
  }
  throw DomainError("unknown organ name '" + std::string(name) + "'");
}

DectPair::DectPair(Volume low, Volume high, std::string id)
    : low_(std::move(low)), high_(std::move(high)), id_(std::move(id)) {
  if (low_.dims() != high_.dims()) throw ShapeError("DECT pair: low/high dims differ");
  if (low_.spacing() != high_.spacing()) throw ShapeError("DECT pair: low/high spacing differ");
}

VolumeStats volume_stats(const Volume& volume) {
  VolumeStats stats;
  stats.min = std::numeric_limits<double>::infinity();
  stats.max = -std::numeric_limits<double>::infinity();
  double sum = 0.0;
  for (float v : volume.values()) {
    stats.min = std::min(stats.min, static_cast<double>(v));
    stats.max = std::max(stats.max, static_cast<double>(v));
    sum += v;
  }
  stats.voxel_count = volume.size();
  stats.mean = sum / static_cast<double>(stats.voxel_count);
  return stats;
}

}  // namespace dectseg
