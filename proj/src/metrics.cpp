#include "dectseg/metrics.hpp"

namespace dectseg {

double dice(const LabelVolume& pred, const LabelVolume& truth, Organ organ) {
  if (pred.dims() != truth.dims()) throw ShapeError("dice: label volumes differ in dims");
  Index in_pred = 0, in_truth = 0, in_both = 0;
  const auto p = pred.values();
  const auto t = truth.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool a = p[i] == organ;
    const bool b = t[i] == organ;
    in_pred += a;
    in_truth += b;
    in_both += a && b;
  }
  if (in_pred + in_truth == 0) return 1.0;
  return 2.0 * static_cast<double>(in_both) / static_cast<double>(in_pred + in_truth);
}

double mean_organ_dice(const LabelVolume& pred, const LabelVolume& truth) {
  double total = 0.0;
  for (Organ o : kOrgans) total += dice(pred, truth, o);
  return total / static_cast<double>(kOrgans.size());
}

}  // namespace dectseg
