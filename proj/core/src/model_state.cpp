#include "tap/model_state.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>

#include "json.hpp"

#include "tap/errors.hpp"
#include "tap/random.hpp"
#include "tap/tensor_io.hpp"

namespace tap {

namespace {

Tensor uniform_tensor(const Shape& shape, double bound, Rng& rng) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor(shape, std::move(v));
}

Tensor identity(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return Tensor({n, n}, std::move(v));
}

std::string_view group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::kFrozen: return "frozen";
    case ParamGroup::kEncoder: return "encoder";
    case ParamGroup::kDecoder: return "decoder";
  }
  return "frozen";
}

ParamGroup parse_group(std::string_view s) {
  if (s == "frozen") return ParamGroup::kFrozen;
  if (s == "encoder") return ParamGroup::kEncoder;
  if (s == "decoder") return ParamGroup::kDecoder;
  throw DataError("unknown parameter group '" + std::string(s) + "'");
}

void fnv_mix(std::uint64_t& h, std::uint64_t word) {
  for (int i = 0; i < 8; ++i) {
    h ^= (word >> (8 * i)) & 0xFF;
    h *= 0x100000001B3ULL;
  }
}

}  // namespace

std::string_view to_string(EncoderVariant v) { return v == EncoderVariant::kConv ? "conv" : "attention"; }

EncoderVariant parse_encoder_variant(std::string_view s) {
  if (s == "conv") return EncoderVariant::kConv;
  if (s == "attention") return EncoderVariant::kAttention;
  throw ConfigError("unknown encoder variant '" + std::string(s) + "' (expected conv|attention)");
}

void ModelConfig::validate() const {
  if (image_size == 0 || channels == 0 || feature_dim == 0 || blocks == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (feature_stride() == 0 || image_size % feature_stride() != 0) {
    throw ConfigError("image size " + std::to_string(image_size) + " is not divisible by the feature stride " +
                      std::to_string(feature_stride()));
  }
  if (!(tau >= 0.0) || !std::isfinite(tau)) throw ConfigError("model.tau must be finite and non-negative");
}

Tensor& ModelState::add_param(std::string name, Tensor value, ParamGroup group) {
  params_.push_back({std::move(name), std::move(value), group});
  return params_.back().value;
}

ModelState ModelState::init(const ModelConfig& config) {
  config.validate();
  ModelState m;
  m.config_ = config;
  Rng rng(derive_seed(config.seed, 0x6D6F64656CULL));
  const std::size_t C = config.channels, D = config.feature_dim;

  if (config.variant == EncoderVariant::kConv) {
    m.add_param("stem.weight", uniform_tensor({C, 3, 3, 3}, std::sqrt(6.0 / 27.0), rng), ParamGroup::kFrozen);
    m.add_param("stem.bias", uniform_tensor({C}, 0.1, rng), ParamGroup::kFrozen);
    for (std::size_t b = 0; b < config.blocks; ++b) {
      const std::string p = "block" + std::to_string(b);
      m.add_param(p + ".dw.weight", uniform_tensor({C, 3, 3}, std::sqrt(6.0 / 9.0), rng), ParamGroup::kFrozen);
      m.add_param(p + ".dw.bias", Tensor::zeros({C}), ParamGroup::kFrozen);
      m.add_param(p + ".pw.weight", uniform_tensor({C, C}, std::sqrt(6.0 / static_cast<double>(C)), rng),
                  ParamGroup::kEncoder);
      m.add_param(p + ".pw.bias", Tensor::zeros({C}), ParamGroup::kEncoder);
      m.adapter_targets_.push_back(p + ".pw.weight");
    }
    m.add_param("head.weight", uniform_tensor({D, C}, std::sqrt(3.0 / static_cast<double>(C)), rng),
                ParamGroup::kEncoder);
    m.add_param("head.bias", Tensor::zeros({D}), ParamGroup::kEncoder);
    m.adapter_targets_.push_back("head.weight");
  } else {
    const std::size_t P = config.patch;
    const std::size_t tokens = config.feature_size() * config.feature_size();
    const std::size_t patch_in = 3 * P * P;
    const double dbound = std::sqrt(3.0 / static_cast<double>(D));
    m.add_param("patch.weight", uniform_tensor({patch_in, D}, std::sqrt(3.0 / static_cast<double>(patch_in)), rng),
                ParamGroup::kEncoder);
    m.add_param("patch.bias", Tensor::zeros({D}), ParamGroup::kEncoder);
    m.add_param("pos", uniform_tensor({tokens, D}, 0.1, rng), ParamGroup::kEncoder);
    for (std::size_t b = 0; b < config.blocks; ++b) {
      const std::string p = "block" + std::to_string(b);
      for (const char* proj : {"q", "k", "v", "o"}) {
        const std::string name = p + ".attn." + proj;
        m.add_param(name, uniform_tensor({D, D}, dbound, rng), ParamGroup::kEncoder);
        m.adapter_targets_.push_back(name);
      }
      m.add_param(p + ".ffn.w1", uniform_tensor({D, D}, std::sqrt(6.0 / static_cast<double>(D)), rng),
                  ParamGroup::kEncoder);
      m.add_param(p + ".ffn.b1", Tensor::zeros({D}), ParamGroup::kEncoder);
      m.add_param(p + ".ffn.w2", uniform_tensor({D, D}, dbound, rng), ParamGroup::kEncoder);
      m.add_param(p + ".ffn.b2", Tensor::zeros({D}), ParamGroup::kEncoder);
    }
  }
  m.add_param("decoder.proj", identity(D), ParamGroup::kDecoder);
  m.add_param("decoder.tau", Tensor::scalar(config.tau), ParamGroup::kDecoder);
  return m;
}

const Tensor& ModelState::param(std::string_view name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.value;
  }
  throw ContractError("model has no parameter named '" + std::string(name) + "'");
}

bool ModelState::has_param(std::string_view name) const {
  return std::any_of(params_.begin(), params_.end(), [&](const Parameter& p) { return p.name == name; });
}

std::vector<Tensor> ModelState::group(ParamGroup g) const {
  std::vector<Tensor> out;
  for (const auto& p : params_) {
    if (p.group == g) out.push_back(p.value);
  }
  return out;
}

std::size_t ModelState::total_parameters() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::size_t ModelState::group_parameters(ParamGroup g) const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (p.group == g) n += p.value.size();
  }
  return n;
}

ModelState ModelState::clone() const {
  ModelState m;
  m.config_ = config_;
  m.adapter_targets_ = adapter_targets_;
  m.meta_train_steps = meta_train_steps;
  m.params_.reserve(params_.size());
  for (const auto& p : params_) m.params_.push_back({p.name, p.value.clone(), p.group});
  return m;
}

void ModelState::set_trainable(ParamGroup g, bool on) {
  for (auto& p : params_) {
    if (p.group == g) p.value.set_requires_grad(on);
  }
}

void ModelState::freeze_all() {
  for (auto& p : params_) p.value.set_requires_grad(false);
}

std::uint64_t ModelState::checksum(std::span<const ParamGroup> groups) const {
  std::vector<Tensor> selected;
  for (const auto& p : params_) {
    if (groups.empty() || std::find(groups.begin(), groups.end(), p.group) != groups.end()) {
      selected.push_back(p.value);
    }
  }
  return tap::checksum(selected);
}

std::uint64_t checksum(std::span<const Tensor> tensors) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const auto& t : tensors) {
    for (auto d : t.shape()) fnv_mix(h, d);
    for (double v : t.data()) fnv_mix(h, std::bit_cast<std::uint64_t>(v));
  }
  return h;
}

void ModelState::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& p : params_) {
    const std::string file = p.name + ".tapt";
    save_tapt(dir / file, p.value);
    layers.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"group", group_name(p.group)}, {"file", file}});
  }
  nlohmann::json manifest = {
      {"format", "tap-checkpoint-v1"},
      {"variant", to_string(config_.variant)},
      {"dims",
       {{"image_size", config_.image_size},
        {"channels", config_.channels},
        {"feature_dim", config_.feature_dim},
        {"blocks", config_.blocks},
        {"stride", config_.stride},
        {"patch", config_.patch},
        {"tau", config_.tau}}},
      {"seed", config_.seed},
      {"meta_train_steps", meta_train_steps},
      {"adapter_targets", adapter_targets_},
      {"layers", layers},
  };
  std::ofstream out(dir / "manifest.json");
  if (!out) throw DataError("cannot write checkpoint manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

ModelState ModelState::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw DataError("no checkpoint manifest in " + dir.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  ModelState m;
  try {
    m.config_.variant = parse_encoder_variant(j.at("variant").get<std::string>());
    const auto& d = j.at("dims");
    m.config_.image_size = d.at("image_size");
    m.config_.channels = d.at("channels");
    m.config_.feature_dim = d.at("feature_dim");
    m.config_.blocks = d.at("blocks");
    m.config_.stride = d.at("stride");
    m.config_.patch = d.at("patch");
    m.config_.tau = d.at("tau");
    m.config_.seed = j.at("seed");
    m.meta_train_steps = j.at("meta_train_steps");
    m.adapter_targets_ = j.at("adapter_targets").get<std::vector<std::string>>();
    for (const auto& layer : j.at("layers")) {
      Tensor t = load_tapt(dir / layer.at("file").get<std::string>());
      if (t.shape() != layer.at("shape").get<Shape>()) {
        throw DataError("checkpoint tensor " + layer.at("name").get<std::string>() + " has unexpected shape");
      }
      m.add_param(layer.at("name"), std::move(t), parse_group(layer.at("group").get<std::string>()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint manifest: " + std::string(e.what()));
  } catch (const ConfigError& e) {
    throw DataError(e.what());
  }
  // The architecture must match what init() would build for these dims.
  const ModelState reference = init(m.config_);
  if (reference.params_.size() != m.params_.size()) throw DataError("checkpoint layer list does not match its dims");
  for (std::size_t i = 0; i < m.params_.size(); ++i) {
    if (reference.params_[i].name != m.params_[i].name ||
        reference.params_[i].value.shape() != m.params_[i].value.shape()) {
      throw DataError("checkpoint layer " + m.params_[i].name + " does not match the architecture");
    }
  }
  return m;
}

}  // namespace tap
