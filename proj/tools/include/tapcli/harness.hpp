#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <functional>
#include <optional>
#include <thread>
#include <vector>

#include "tap/adapt.hpp"

namespace tapcli {

std::size_t resolve_threads(std::size_t requested);

/// Calls f(0..n-1) on up to `threads` workers and returns results in index
/// order. If any call throws, the exception of the lowest failing index is
/// rethrown after all workers finish.
template <class R>
std::vector<R> parallel_map(std::size_t n, std::size_t threads, const std::function<R(std::size_t)>& f) {
  std::vector<std::optional<R>> slots(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        slots[i].emplace(f(i));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t count = std::max<std::size_t>(1, std::min(resolve_threads(threads), n));
  if (count == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < count; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  std::vector<R> out;
  out.reserve(n);
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

struct MethodOutcome {
  tap::Method method = tap::Method::kVanilla;
  double miou = 0.0;
  double background_iou = 0.0;
  double ms = 0.0;  // adaptation plus prediction
  tap::AdaptTrace trace;
};

/// Adapts with cfg.method (fresh state every call) and scores the query.
MethodOutcome run_method(const tap::ModelState& model, const tap::Episode& episode, const tap::AdaptConfig& cfg);

}  // namespace tapcli
