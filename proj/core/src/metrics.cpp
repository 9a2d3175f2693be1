#include "tap/metrics.hpp"

#include "tap/errors.hpp"

namespace tap {

double class_iou(const Tensor& pred, const Tensor& truth, int cls) {
  if (pred.shape() != truth.shape()) {
    throw DimensionError("IoU: prediction " + to_string(pred.shape()) + " and truth " + to_string(truth.shape()) +
                         " differ in shape");
  }
  const double c = static_cast<double>(cls);
  std::size_t inter = 0, uni = 0;
  const auto pv = pred.data();
  const auto tv = truth.data();
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const bool p = pv[i] == c, t = tv[i] == c;
    inter += (p && t) ? 1 : 0;
    uni += (p || t) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double miou(const Tensor& pred, const Tensor& truth, std::span<const int> classes) {
  if (classes.empty()) throw ContractError("miou: empty class list");
  double total = 0.0;
  for (int c : classes) total += class_iou(pred, truth, c);
  return total / static_cast<double>(classes.size());
}

}  // namespace tap
