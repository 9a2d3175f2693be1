#include "tap/losses.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "tap/errors.hpp"
#include "tap/ops.hpp"

namespace tap {

namespace {

constexpr double kProbFloor = 1e-12;

std::size_t class_at(double v, std::size_t num_classes) {
  if (!(v >= 0.0) || v != std::floor(v) || v >= static_cast<double>(num_classes)) {
    throw DataError("mask value " + std::to_string(v) + " is not a class index in [0, " +
                    std::to_string(num_classes) + ")");
  }
  return static_cast<std::size_t>(v);
}

}  // namespace

std::string_view to_string(WeightMode m) {
  return m == WeightMode::kUniform ? "uniform" : "inverse_log_frequency";
}

WeightMode parse_weight_mode(std::string_view s) {
  if (s == "inverse_log_frequency") return WeightMode::kInverseLogFrequency;
  if (s == "uniform") return WeightMode::kUniform;
  throw ConfigError("unknown weight mode '" + std::string(s) + "' (expected inverse_log_frequency|uniform)");
}

void FocalConfig::validate() const {
  if (!std::isfinite(gamma) || gamma < 0.0) throw ConfigError("focal gamma must be finite and non-negative");
}

double min_class_weight() { return 1.0 / std::log(2.1); }
double max_class_weight() { return 1.0 / std::log(1.1); }

std::vector<double> ClassFrequencyTable::fractions() const {
  const double total = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
  std::vector<double> out(counts.size(), 0.0);
  if (total == 0.0) return out;
  for (std::size_t t = 0; t < counts.size(); ++t) out[t] = static_cast<double>(counts[t]) / total;
  return out;
}

ClassFrequencyTable class_frequencies(const Tensor& mask, std::size_t num_classes, WeightMode mode) {
  if (num_classes == 0) throw ContractError("class_frequencies: need at least one class");
  ClassFrequencyTable table;
  table.counts.assign(num_classes, 0);
  for (double v : mask.data()) ++table.counts[class_at(v, num_classes)];
  const auto frac = table.fractions();
  table.weights.resize(num_classes);
  for (std::size_t t = 0; t < num_classes; ++t) {
    table.weights[t] = mode == WeightMode::kUniform ? 1.0 : 1.0 / std::log(1.1 + frac[t]);
  }
  return table;
}

std::vector<double> class_weights(const Tensor& mask, std::size_t num_classes) {
  return class_frequencies(mask, num_classes, WeightMode::kInverseLogFrequency).weights;
}

Tensor focal_loss(const Tensor& logits, const Tensor& mask, const FocalConfig& cfg) {
  if (logits.rank() != 3) throw DimensionError("focal_loss: logits must be [C x H x W], got " + to_string(logits.shape()));
  std::vector<int> identity(logits.dim(0));
  std::iota(identity.begin(), identity.end(), 0);
  return focal_loss(logits, mask, cfg, identity);
}

Tensor focal_loss(const Tensor& logits, const Tensor& mask, const FocalConfig& cfg,
                  std::span<const int> channel_of_class) {
  cfg.validate();
  if (logits.rank() != 3 || mask.rank() != 2 || logits.dim(1) != mask.dim(0) || logits.dim(2) != mask.dim(1)) {
    throw DimensionError("focal_loss: logits " + to_string(logits.shape()) + " and mask " + to_string(mask.shape()) +
                         " are not spatially aligned");
  }
  const std::size_t channels = logits.dim(0);
  for (int c : channel_of_class) {
    if (c >= static_cast<int>(channels)) throw DimensionError("focal_loss: class maps to a missing logit channel");
  }
  const auto table = class_frequencies(mask, channel_of_class.size(), cfg.weight_mode);
  const std::size_t hw = mask.size();
  std::vector<std::size_t> index;
  std::vector<double> weight;
  index.reserve(hw);
  weight.reserve(hw);
  const auto mv = mask.data();
  for (std::size_t p = 0; p < hw; ++p) {
    const auto t = static_cast<std::size_t>(mv[p]);
    const int c = channel_of_class[t];
    if (c < 0) continue;
    index.push_back(static_cast<std::size_t>(c) * hw + p);
    weight.push_back(table.weights[t]);
  }
  if (index.empty()) throw DataError("focal_loss: no supervised pixel left in the mask");

  const Tensor probs = ops::softmax_channels(logits);
  const Tensor pt = ops::clamp(ops::gather(probs, index), kProbFloor, 1.0);
  const Tensor modulating = ops::pow(ops::add_scalar(ops::neg(pt), 1.0), cfg.gamma);
  const Tensor nll = ops::neg(ops::log(pt));
  const std::size_t n = weight.size();
  const Tensor w({n}, std::move(weight));
  return ops::mean(ops::mul(ops::mul(modulating, nll), w));
}

}  // namespace tap
