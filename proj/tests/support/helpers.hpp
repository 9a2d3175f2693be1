#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "tap/random.hpp"
#include "tap/tensor.hpp"

namespace testing {

inline tap::Tensor random_tensor(const tap::Shape& shape, tap::Rng& rng, double lo = -1.0, double hi = 1.0,
                                 bool requires_grad = false) {
  std::vector<double> v(tap::numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return tap::Tensor(shape, std::move(v), requires_grad);
}

inline double max_abs_diff(const tap::Tensor& a, const tap::Tensor& b) {
  double m = 0.0;
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < av.size(); ++i) m = std::max(m, std::abs(av[i] - bv[i]));
  return m;
}

inline bool bit_equal(const tap::Tensor& a, const tap::Tensor& b) {
  if (a.shape() != b.shape()) return false;
  const auto av = a.data(), bv = b.data();
  return std::equal(av.begin(), av.end(), bv.begin());
}

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

struct GradCheck {
  double max_rel = 0.0;
  std::size_t checked = 0;
};

// Central finite differences on `samples` randomly chosen entries of
// `params` (all entries when samples == 0). `loss` must rebuild the graph
// from the current parameter values.
inline GradCheck grad_check(const std::function<tap::Tensor()>& loss, const std::vector<tap::Tensor>& params,
                            std::size_t samples, tap::Rng& rng, double h = 1e-5) {
  for (auto p : params) p.zero_grad();
  tap::backward(loss());
  std::vector<std::pair<std::size_t, std::size_t>> picks;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::size_t j = 0; j < params[i].size(); ++j) picks.emplace_back(i, j);
  }
  if (samples > 0 && samples < picks.size()) {
    rng.shuffle(picks);
    picks.resize(samples);
  }
  GradCheck out;
  tap::NoGradGuard guard;
  for (auto [i, j] : picks) {
    tap::Tensor p = params[i];
    const double analytic = p.has_grad() ? p.grad()[j] : 0.0;
    const double v = p.data()[j];
    p.mutable_data()[j] = v + h;
    const double up = loss().item();
    p.mutable_data()[j] = v - h;
    const double down = loss().item();
    p.mutable_data()[j] = v;
    out.max_rel = std::max(out.max_rel, relative_error(analytic, (up - down) / (2 * h)));
    ++out.checked;
  }
  return out;
}

}  // namespace testing
