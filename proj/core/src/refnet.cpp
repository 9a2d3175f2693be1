#include "tap/refnet.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "tap/adam.hpp"
#include "tap/errors.hpp"
#include "tap/ops.hpp"

namespace tap {

namespace {

void check_image(const ModelConfig& cfg, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError("encoder input must be [3 x H x W], got " + to_string(image.shape()));
  }
  const std::size_t s = cfg.feature_stride();
  if (image.dim(1) % s != 0 || image.dim(2) % s != 0) {
    throw DimensionError("input " + to_string(image.shape()) + " is not divisible by the feature stride " +
                         std::to_string(s));
  }
}

Tensor pointwise(const ModelState& model, const std::string& prefix, const Tensor& x, const AdapterSet* adapters) {
  const Tensor& w = model.param(prefix + ".weight");
  const Tensor& b = model.param(prefix + ".bias");
  const LoraAdapter* ad = adapters ? adapters->find(prefix + ".weight") : nullptr;
  return ad ? adapted_pointwise(x, w, b, *ad) : ops::pointwise_conv(x, w, b);
}

Tensor projection(const ModelState& model, const std::string& name, const Tensor& x, const AdapterSet* adapters) {
  const Tensor& w = model.param(name);
  const LoraAdapter* ad = adapters ? adapters->find(name) : nullptr;
  return ad ? adapted_forward(x, w, *ad) : ops::matmul(x, w);
}

// [3 x H x W] -> [tokens x 3*P*P], tokens in row-major patch order.
Tensor patchify(const Tensor& image, std::size_t patch) {
  const std::size_t H = image.dim(1), W = image.dim(2);
  const std::size_t th = H / patch, tw = W / patch, width = 3 * patch * patch;
  const auto v = image.data();
  std::vector<double> out(th * tw * width);
  for (std::size_t ti = 0; ti < th; ++ti)
    for (std::size_t tj = 0; tj < tw; ++tj)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t di = 0; di < patch; ++di)
          for (std::size_t dj = 0; dj < patch; ++dj)
            out[(ti * tw + tj) * width + (c * patch + di) * patch + dj] =
                v[(c * H + ti * patch + di) * W + tj * patch + dj];
  return Tensor({th * tw, width}, std::move(out));
}

Tensor conv_suffix(const ModelState& model, const Tensor& prefix, const AdapterSet* adapters) {
  const auto& cfg = model.config();
  Tensor h = prefix;
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const std::string p = "block" + std::to_string(b);
    if (b > 0) h = ops::depthwise_conv3x3(h, model.param(p + ".dw.weight"), model.param(p + ".dw.bias"));
    h = ops::relu(pointwise(model, p + ".pw", h, adapters));
  }
  return pointwise(model, "head", h, adapters);
}

Tensor attention_suffix(const ModelState& model, const Tensor& patches, const AdapterSet* adapters) {
  const auto& cfg = model.config();
  const std::size_t D = cfg.feature_dim, side = cfg.feature_size();
  const double scale = 1.0 / std::sqrt(static_cast<double>(D));
  Tensor x = ops::add(ops::linear(patches, model.param("patch.weight"), model.param("patch.bias")), model.param("pos"));
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const std::string p = "block" + std::to_string(b);
    const Tensor q = projection(model, p + ".attn.q", x, adapters);
    const Tensor k = projection(model, p + ".attn.k", x, adapters);
    const Tensor v = projection(model, p + ".attn.v", x, adapters);
    const Tensor attn = ops::softmax_rows(ops::mul_scalar(ops::matmul(q, ops::transpose(k)), scale));
    x = ops::add(x, projection(model, p + ".attn.o", ops::matmul(attn, v), adapters));
    const Tensor hidden = ops::relu(ops::linear(x, model.param(p + ".ffn.w1"), model.param(p + ".ffn.b1")));
    x = ops::add(x, ops::linear(hidden, model.param(p + ".ffn.w2"), model.param(p + ".ffn.b2")));
  }
  return ops::reshape(ops::transpose(x), {D, side, side});
}

}  // namespace

Tensor encoder_prefix(const ModelState& model, const Tensor& image) {
  const auto& cfg = model.config();
  check_image(cfg, image);
  if (image.dim(1) != cfg.image_size || image.dim(2) != cfg.image_size) {
    throw DimensionError("encoder expects " + std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) +
                         " images, got " + to_string(image.shape()));
  }
  NoGradGuard guard;
  if (cfg.variant == EncoderVariant::kAttention) return patchify(image, cfg.patch);
  const Tensor stem = ops::conv3x3(image.detach(), model.param("stem.weight"), model.param("stem.bias"), cfg.stride);
  return ops::depthwise_conv3x3(ops::relu(stem), model.param("block0.dw.weight"), model.param("block0.dw.bias"));
}

Tensor encoder_suffix(const ModelState& model, const Tensor& prefix, const AdapterSet* adapters) {
  return model.config().variant == EncoderVariant::kConv ? conv_suffix(model, prefix, adapters)
                                                         : attention_suffix(model, prefix, adapters);
}

Tensor encode(const ModelState& model, const Tensor& image, const AdapterSet* adapters) {
  return encoder_suffix(model, encoder_prefix(model, image), adapters);
}

std::vector<Prototype> PrototypeBank::as_list() const {
  std::vector<Prototype> out;
  const std::size_t d = matrix.dim(0), n = matrix.dim(1);
  for (std::size_t c = 0; c < n; ++c) {
    std::vector<double> v(d);
    for (std::size_t i = 0; i < d; ++i) v[i] = matrix[i * n + c];
    out.push_back({class_ids[c], Tensor({d}, std::move(v))});
  }
  return out;
}

Tensor downsample_mask(const Tensor& mask, std::size_t factor) {
  if (mask.rank() != 2) throw DimensionError("mask must be [H x W], got " + to_string(mask.shape()));
  if (factor == 0 || mask.dim(0) % factor != 0 || mask.dim(1) % factor != 0) {
    throw DimensionError("mask " + to_string(mask.shape()) + " is not divisible by factor " + std::to_string(factor));
  }
  if (factor == 1) return mask;
  const std::size_t H = mask.dim(0), W = mask.dim(1), h = H / factor, w = W / factor;
  const auto v = mask.data();
  std::vector<double> out(h * w);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = v[(i * factor + factor / 2) * W + j * factor + factor / 2];
  return Tensor({h, w}, std::move(out));
}

std::vector<int> present_classes(std::span<const Tensor> masks, std::span<const int> classes) {
  std::vector<int> out;
  for (int c : classes) {
    const double label = static_cast<double>(c);
    const bool found = std::any_of(masks.begin(), masks.end(), [&](const Tensor& m) {
      return std::find(m.data().begin(), m.data().end(), label) != m.data().end();
    });
    if (found) out.push_back(c);
  }
  return out;
}

PrototypeBank build_prototypes(std::span<const Tensor> features, std::span<const Tensor> masks,
                               std::span<const int> classes) {
  if (features.empty() || features.size() != masks.size()) {
    throw ContractError("build_prototypes: need one mask per feature map and at least one support");
  }
  if (classes.empty()) throw ContractError("build_prototypes: empty class list");
  const std::size_t n = classes.size();
  std::vector<std::size_t> counts(n, 0);
  for (std::size_t i = 0; i < features.size(); ++i) {
    const Tensor& f = features[i];
    if (f.rank() != 3 || masks[i].rank() != 2 || f.dim(1) != masks[i].dim(0) || f.dim(2) != masks[i].dim(1)) {
      throw DimensionError("build_prototypes: features " + to_string(f.shape()) + " and mask " +
                           to_string(masks[i].shape()) + " are not aligned");
    }
    for (double v : masks[i].data()) {
      for (std::size_t c = 0; c < n; ++c) counts[c] += v == static_cast<double>(classes[c]) ? 1 : 0;
    }
  }
  for (std::size_t c = 0; c < n; ++c) {
    if (counts[c] == 0) {
      throw DataError("build_prototypes: class " + std::to_string(classes[c]) + " has no labelled support pixel");
    }
  }
  const std::size_t d = features.front().dim(0);
  Tensor total;
  bool first = true;
  for (std::size_t i = 0; i < features.size(); ++i) {
    const std::size_t hw = masks[i].size();
    std::vector<double> select(hw * n, 0.0);
    bool any = false;
    const auto mv = masks[i].data();
    for (std::size_t p = 0; p < hw; ++p) {
      for (std::size_t c = 0; c < n; ++c) {
        if (mv[p] == static_cast<double>(classes[c])) {
          select[p * n + c] = 1.0 / static_cast<double>(counts[c]);
          any = true;
        }
      }
    }
    if (!any) continue;
    if (features[i].dim(0) != d) throw DimensionError("build_prototypes: feature depth differs between supports");
    const Tensor part = ops::matmul(ops::reshape(features[i], {d, hw}), Tensor({hw, n}, std::move(select)));
    total = first ? part : ops::add(total, part);
    first = false;
  }
  return PrototypeBank{std::vector<int>(classes.begin(), classes.end()), total};
}

Tensor decode(const ModelState& model, const Tensor& query_features, const PrototypeBank& prototypes) {
  if (prototypes.size() == 0) throw ContractError("decode: empty prototype list");
  if (query_features.rank() != 3) {
    throw DimensionError("decode: query features must be [D x h x w], got " + to_string(query_features.shape()));
  }
  const std::size_t d = query_features.dim(0), h = query_features.dim(1), w = query_features.dim(2);
  if (prototypes.matrix.dim(0) != d) throw DimensionError("decode: prototype depth does not match query features");
  const Tensor& proj = model.param("decoder.proj");
  const Tensor q = ops::normalize_columns(ops::matmul(proj, ops::reshape(query_features, {d, h * w})));
  const Tensor p = ops::normalize_columns(ops::matmul(proj, prototypes.matrix));
  const Tensor cosine = ops::matmul(ops::transpose(p), q);
  return ops::reshape(ops::mul(cosine, model.param("decoder.tau")), {prototypes.size(), h, w});
}

Tensor segment_logits(const ModelState& model, const Tensor& query_features, const PrototypeBank& prototypes) {
  return ops::upsample_nearest(decode(model, query_features, prototypes), model.config().feature_stride());
}

Tensor argmax_labels(const Tensor& logits, std::span<const int> class_ids) {
  if (logits.rank() != 3 || logits.dim(0) != class_ids.size()) {
    throw DimensionError("argmax_labels: logits " + to_string(logits.shape()) + " do not match " +
                         std::to_string(class_ids.size()) + " classes");
  }
  const std::size_t c = logits.dim(0), hw = logits.dim(1) * logits.dim(2);
  const auto v = logits.data();
  std::vector<double> out(hw);
  for (std::size_t p = 0; p < hw; ++p) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k) {
      if (v[k * hw + p] > v[best * hw + p]) best = k;
    }
    out[p] = static_cast<double>(class_ids[best]);
  }
  return Tensor({logits.dim(1), logits.dim(2)}, std::move(out));
}

Tensor episode_loss(const ModelState& model, const Episode& episode, const FocalConfig& focal,
                    const AdapterSet* adapters) {
  const std::size_t stride = model.config().feature_stride();
  std::vector<Tensor> feats, masks;
  for (const auto& s : episode.support) {
    feats.push_back(encode(model, s.image, adapters));
    masks.push_back(downsample_mask(s.mask, stride));
  }
  std::vector<int> labels = {0};
  for (int c : episode.foreground_labels()) labels.push_back(c);
  const auto bank = build_prototypes(feats, masks, labels);
  const Tensor logits = segment_logits(model, encode(model, episode.query.image, adapters), bank);
  return focal_loss(logits, episode.query.mask, focal);
}

std::vector<double> meta_train(ModelState& model, const EpisodeSource& source, const MetaTrainConfig& cfg) {
  std::vector<double> losses;
  if (cfg.steps == 0) return losses;
  model.set_trainable(ParamGroup::kEncoder, true);
  model.set_trainable(ParamGroup::kDecoder, true);
  std::vector<Tensor> params;
  std::vector<std::string> names;
  for (const auto& p : model.parameters()) {
    if (p.group != ParamGroup::kFrozen) {
      params.push_back(p.value);
      names.push_back(p.name);
    }
  }
  Adam opt(params, names, AdamConfig{.learning_rate = cfg.learning_rate});
  losses.reserve(cfg.steps);
  try {
    for (std::size_t step = 0; step < cfg.steps; ++step) {
      const Episode episode = source(step);
      Tape::current().reset();
      Tensor loss;
      try {
        loss = episode_loss(model, episode, cfg.focal);
        backward(loss);
        opt.step();
      } catch (const NumericalError& e) {
        throw NumericalError("meta-training diverged at step " + std::to_string(step) + ": " + e.what());
      }
      opt.zero_grad();
      losses.push_back(loss.item());
    }
  } catch (...) {
    Tape::current().reset();
    model.freeze_all();
    throw;
  }
  model.freeze_all();
  model.meta_train_steps += cfg.steps;
  return losses;
}

}  // namespace tap
