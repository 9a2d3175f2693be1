#pragma once

#include <span>

#include "tap/tensor.hpp"

namespace tap {

/// |pred ∩ truth| / |pred ∪ truth| for one class; 1 when the class is
/// absent from both masks.
double class_iou(const Tensor& pred, const Tensor& truth, int cls);

/// Mean IoU over `classes` (the foreground classes of an episode).
/// Background is not averaged unless listed.
double miou(const Tensor& pred, const Tensor& truth, std::span<const int> classes);

}  // namespace tap
