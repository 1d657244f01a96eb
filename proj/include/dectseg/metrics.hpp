#pragma once

#include "dectseg/volume.hpp"

namespace dectseg {

/// 2 |A ∩ B| / (|A| + |B|) over the voxels labelled `organ`. Both empty
/// gives 1, exactly one empty gives 0. Throws ShapeError on a dims mismatch.
double dice(const LabelVolume& pred, const LabelVolume& truth, Organ organ);

/// Mean of dice() over the four organs.
double mean_organ_dice(const LabelVolume& pred, const LabelVolume& truth);

}  // namespace dectseg
