#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "tap/tensor.hpp"

namespace tap {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const;
};

// Adam with bias correction. Holds first/second moment buffers for a fixed
// list of parameters and updates them in place from their .grad buffers.
class Adam {
 public:
  Adam(std::vector<Tensor> params, std::vector<std::string> names, AdamConfig cfg = {});

  /// One update. A parameter without a gradient is treated as having a zero
  /// gradient. Throws NumericalError naming the parameter on NaN/Inf.
  void step();
  void zero_grad();

  std::size_t steps() const { return step_; }
  const AdamConfig& config() const { return cfg_; }
  std::size_t size() const { return params_.size(); }
  const std::vector<double>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<double>& second_moment(std::size_t i) const { return v_[i]; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  AdamConfig cfg_;
  std::size_t step_ = 0;
};

}  // namespace tap
