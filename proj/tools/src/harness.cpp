#include "tapcli/harness.hpp"

#include <chrono>

#include "tap/metrics.hpp"

namespace tapcli {

std::size_t resolve_threads(std::size_t requested) {
  if (requested > 0) return requested;
  return std::max(1u, std::thread::hardware_concurrency());
}

MethodOutcome run_method(const tap::ModelState& model, const tap::Episode& episode, const tap::AdaptConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  auto result = tap::adapt(model, episode, cfg);
  const auto pred = tap::predict_query(result.adapted, episode);
  MethodOutcome out;
  out.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  out.method = cfg.method;
  const auto fg = episode.foreground_labels();
  out.miou = tap::miou(pred.mask, episode.query.mask, fg);
  out.background_iou = tap::class_iou(pred.mask, episode.query.mask, 0);
  out.trace = std::move(result.trace);
  return out;
}

}  // namespace tapcli
