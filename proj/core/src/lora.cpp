#include "tap/lora.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"

#include "tap/errors.hpp"
#include "tap/ops.hpp"
#include "tap/random.hpp"
#include "tap/tensor_io.hpp"

namespace tap {

namespace {

bool targeted(TargetingPolicy policy, std::string_view name) {
  const bool attention = name.find(".attn.") != std::string_view::npos;
  const bool pointwise = name.find(".pw.") != std::string_view::npos || name.rfind("head.", 0) == 0;
  return policy == TargetingPolicy::kAttentionProjections ? attention : pointwise;
}

std::vector<std::string> matched_layers(const ModelState& model, TargetingPolicy policy) {
  std::vector<std::string> out;
  for (const auto& name : model.adapter_targets()) {
    if (targeted(policy, name)) out.push_back(name);
  }
  if (out.empty()) {
    throw ConfigError("targeting policy '" + std::string(to_string(policy)) + "' matches no layer of the " +
                      std::string(to_string(model.config().variant)) + " encoder");
  }
  return out;
}

void check_adapter_shape(const Tensor& W, const LoraAdapter& adapter) {
  if (W.rank() != 2 || W.dim(0) != adapter.rows() || W.dim(1) != adapter.cols()) {
    throw DimensionError("adapter for " + adapter.target_id + " expects a " + std::to_string(adapter.rows()) + "x" +
                         std::to_string(adapter.cols()) + " weight, got " + to_string(W.shape()));
  }
}

}  // namespace

Tensor LoraAdapter::delta() const {
  NoGradGuard guard;
  return ops::mul_scalar(ops::matmul(A, B), alpha);
}

std::string_view to_string(TargetingPolicy p) {
  return p == TargetingPolicy::kAttentionProjections ? "attention_projections" : "pointwise_convs";
}

TargetingPolicy policy_for(EncoderVariant v) {
  return v == EncoderVariant::kConv ? TargetingPolicy::kPointwiseConvs : TargetingPolicy::kAttentionProjections;
}

AdapterSet::AdapterSet(TargetingPolicy policy, Map adapters) : policy_(policy), adapters_(std::move(adapters)) {}

const LoraAdapter* AdapterSet::find(std::string_view target_id) const {
  auto it = adapters_.find(target_id);
  return it == adapters_.end() ? nullptr : &it->second;
}

std::vector<Tensor> AdapterSet::trainable() const {
  std::vector<Tensor> out;
  for (const auto& [name, a] : adapters_) {
    out.push_back(a.A);
    out.push_back(a.B);
  }
  return out;
}

std::vector<std::string> AdapterSet::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& [name, a] : adapters_) {
    out.push_back(name + ".lora_A");
    out.push_back(name + ".lora_B");
  }
  return out;
}

AdapterSet AdapterSet::clone() const {
  Map copy;
  for (const auto& [name, a] : adapters_) copy.emplace(name, LoraAdapter{a.target_id, a.A.clone(), a.B.clone(), a.alpha});
  return AdapterSet(policy_, std::move(copy));
}

std::size_t max_rank(const ModelState& model, TargetingPolicy policy) {
  std::size_t best = 0;
  bool first = true;
  for (const auto& name : matched_layers(model, policy)) {
    const Tensor& W = model.param(name);
    const std::size_t limit = std::min(W.dim(0), W.dim(1));
    best = first ? limit : std::min(best, limit);
    first = false;
  }
  return best;
}

AdapterSet attach(const ModelState& model, TargetingPolicy policy, std::size_t rank, double alpha,
                  std::uint64_t seed) {
  if (rank == 0) throw ConfigError("LoRA rank must be at least 1");
  if (!std::isfinite(alpha)) throw ConfigError("LoRA alpha must be finite");
  const auto layers = matched_layers(model, policy);
  for (const auto& name : layers) {
    const Tensor& W = model.param(name);
    if (rank > std::min(W.dim(0), W.dim(1))) {
      throw ConfigError("LoRA rank " + std::to_string(rank) + " exceeds min(m, n) = " +
                        std::to_string(std::min(W.dim(0), W.dim(1))) + " for layer " + name);
    }
  }
  Rng rng(derive_seed(seed, 0x6C6F7261ULL));
  const double bound = 1.0 / std::sqrt(static_cast<double>(rank));
  AdapterSet::Map adapters;
  for (const auto& name : layers) {
    const Tensor& W = model.param(name);
    const std::size_t m = W.dim(0), n = W.dim(1);
    std::vector<double> a(m * rank);
    for (double& v : a) v = rng.uniform(-bound, bound);
    LoraAdapter adapter{name, Tensor({m, rank}, std::move(a), true), Tensor::zeros({rank, n}, true), alpha};
    adapters.emplace(name, std::move(adapter));
  }
  return AdapterSet(policy, std::move(adapters));
}

Tensor adapted_forward(const Tensor& x, const Tensor& W, const LoraAdapter& adapter) {
  check_adapter_shape(W, adapter);
  const Tensor base = ops::matmul(x, W);
  const Tensor low = ops::matmul(ops::matmul(x, adapter.A), adapter.B);
  return ops::add(base, ops::mul_scalar(low, adapter.alpha));
}

Tensor adapted_pointwise(const Tensor& x, const Tensor& W, const Tensor& bias, const LoraAdapter& adapter) {
  check_adapter_shape(W, adapter);
  if (x.rank() != 3) throw DimensionError("adapted_pointwise: input must be [C x H x W], got " + to_string(x.shape()));
  const Tensor base = ops::pointwise_conv(x, W, bias);
  const Tensor flat = ops::reshape(x, {x.dim(0), x.dim(1) * x.dim(2)});
  const Tensor low = ops::matmul(adapter.A, ops::matmul(adapter.B, flat));
  return ops::add(base, ops::reshape(ops::mul_scalar(low, adapter.alpha), base.shape()));
}

Tensor merge(const Tensor& W, const LoraAdapter& adapter) {
  check_adapter_shape(W, adapter);
  NoGradGuard guard;
  return ops::add(W, adapter.delta());
}

Tensor unmerge(const Tensor& merged, const LoraAdapter& adapter) {
  check_adapter_shape(merged, adapter);
  NoGradGuard guard;
  return ops::sub(merged, adapter.delta());
}

TrainableCount count_trainable(const AdapterSet& adapters, std::size_t model_parameters) {
  TrainableCount c;
  for (const auto& [name, a] : adapters.adapters()) c.parameters += a.rank() * (a.rows() + a.cols());
  c.percent = model_parameters == 0 ? 0.0
                                    : 100.0 * static_cast<double>(c.parameters) / static_cast<double>(model_parameters);
  return c;
}

void AdapterSet::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json list = nlohmann::json::array();
  for (const auto& [name, a] : adapters_) {
    const std::string a_file = name + ".lora_A.tapt";
    const std::string b_file = name + ".lora_B.tapt";
    save_tapt(dir / a_file, a.A);
    save_tapt(dir / b_file, a.B);
    list.push_back({{"target_id", name},
                    {"m", a.rows()},
                    {"n", a.cols()},
                    {"r", a.rank()},
                    {"alpha", a.alpha},
                    {"A", a_file},
                    {"B", b_file}});
  }
  std::ofstream out(dir / "adapters.json");
  if (!out) throw DataError("cannot write adapter manifest in " + dir.string());
  out << nlohmann::json{{"policy", to_string(policy_)}, {"adapters", list}}.dump(2) << '\n';
}

AdapterSet AdapterSet::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "adapters.json");
  if (!in) throw DataError("no adapter manifest in " + dir.string());
  try {
    const auto j = nlohmann::json::parse(in);
    const auto policy_name = j.at("policy").get<std::string>();
    const TargetingPolicy policy = policy_name == "attention_projections" ? TargetingPolicy::kAttentionProjections
                                                                          : TargetingPolicy::kPointwiseConvs;
    Map adapters;
    for (const auto& e : j.at("adapters")) {
      LoraAdapter a{e.at("target_id"), load_tapt(dir / e.at("A").get<std::string>()),
                    load_tapt(dir / e.at("B").get<std::string>()), e.at("alpha")};
      const std::size_t m = e.at("m"), n = e.at("n"), r = e.at("r");
      if (a.A.shape() != Shape{m, r} || a.B.shape() != Shape{r, n}) {
        throw DataError("adapter " + a.target_id + " tensors do not match its manifest dims");
      }
      a.A.set_requires_grad(true);
      a.B.set_requires_grad(true);
      adapters.emplace(a.target_id, std::move(a));
    }
    return AdapterSet(policy, std::move(adapters));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed adapter manifest: " + std::string(e.what()));
  }
}

}  // namespace tap
