#include <cmath>
#include <filesystem>
#include <limits>

#include "doctest.h"
#include "helpers.hpp"
#include "tap/errors.hpp"
#include "tap/lora.hpp"
#include "tap/ops.hpp"
#include "tap/refnet.hpp"

using namespace tap;
using testing::random_tensor;

namespace {

ModelState make_model(EncoderVariant v = EncoderVariant::kConv, std::uint64_t seed = 1) {
  ModelConfig c;
  c.variant = v;
  c.seed = seed;
  return ModelState::init(c);
}

Tensor random_mask(std::size_t h, std::size_t w, std::size_t classes, Rng& rng) {
  std::vector<double> v(h * w);
  for (auto& x : v) x = static_cast<double>(rng.index(classes));
  return Tensor({h, w}, std::move(v));
}

}  // namespace

TEST_CASE("encode shapes and finiteness") {
  const auto conv = make_model();
  NoGradGuard g;
  const auto f = encode(conv, Tensor::zeros({3, 32, 32}));
  CHECK(f.shape() == Shape{32, 16, 16});
  for (double v : f.data()) CHECK(std::isfinite(v));
  const auto att = make_model(EncoderVariant::kAttention);
  CHECK(encode(att, Tensor::zeros({3, 32, 32})).shape() == Shape{32, 8, 8});
  CHECK_THROWS_AS(encode(conv, Tensor::zeros({3, 31, 31})), DimensionError);
  CHECK_THROWS_AS(encode(conv, Tensor::zeros({1, 32, 32})), DimensionError);
  Rng rng(1);
  const auto img = random_tensor({3, 32, 32}, rng, 0, 1);
  CHECK(testing::bit_equal(encode(conv, img), encode(conv, img)));
  CHECK(testing::bit_equal(encode(att, img), encode(att, img)));
}

TEST_CASE("model init is deterministic and seed dependent") {
  CHECK(make_model(EncoderVariant::kConv, 4).checksum() == make_model(EncoderVariant::kConv, 4).checksum());
  CHECK(make_model(EncoderVariant::kConv, 4).checksum() != make_model(EncoderVariant::kConv, 5).checksum());
  const auto m = make_model();
  CHECK(m.adapter_targets().size() == 4);
  CHECK(m.group_parameters(ParamGroup::kDecoder) == 32 * 32 + 1);
}

TEST_CASE("build_prototypes") {
  Rng rng(2);
  SUBCASE("full mask gives the spatial mean") {
    const auto f = random_tensor({4, 3, 3}, rng);
    const auto bank = build_prototypes(std::vector<Tensor>{f}, std::vector<Tensor>{Tensor::full({3, 3}, 1.0)},
                                       std::vector<int>{1});
    for (std::size_t d = 0; d < 4; ++d) {
      double s = 0;
      for (std::size_t p = 0; p < 9; ++p) s += f.data()[d * 9 + p];
      CHECK(std::abs(bank.matrix.data()[d] - s / 9) < 1e-12);
    }
  }
  SUBCASE("duplicated supports leave prototypes unchanged") {
    const auto f = random_tensor({4, 3, 3}, rng);
    const auto m = random_mask(3, 3, 2, rng);
    const std::vector<int> cls = {0, 1};
    const auto one = build_prototypes(std::vector<Tensor>{f}, std::vector<Tensor>{m}, cls);
    const auto two = build_prototypes(std::vector<Tensor>{f, f}, std::vector<Tensor>{m, m}, cls);
    CHECK(testing::max_abs_diff(one.matrix, two.matrix) < 1e-15);
  }
  SUBCASE("loop oracle") {
    std::vector<Tensor> feats, masks;
    for (int i = 0; i < 3; ++i) {
      feats.push_back(random_tensor({5, 4, 4}, rng));
      masks.push_back(random_mask(4, 4, 3, rng));
    }
    const std::vector<int> cls = {0, 1, 2};
    const auto bank = build_prototypes(feats, masks, cls);
    for (std::size_t c = 0; c < 3; ++c) {
      std::vector<double> acc(5, 0.0);
      double n = 0;
      for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t p = 0; p < 16; ++p) {
          if (masks[i].data()[p] != static_cast<double>(c)) continue;
          for (std::size_t d = 0; d < 5; ++d) acc[d] += feats[i].data()[d * 16 + p];
          n += 1;
        }
      }
      for (std::size_t d = 0; d < 5; ++d) CHECK(std::abs(bank.matrix.data()[d * 3 + c] - acc[d] / n) < 1e-12);
    }
    const auto list = bank.as_list();
    CHECK(list.size() == 3);
    CHECK(list[2].class_id == 2);
  }
  SUBCASE("missing class names the class") {
    try {
      build_prototypes(std::vector<Tensor>{random_tensor({2, 2, 2}, rng)}, std::vector<Tensor>{Tensor::zeros({2, 2})},
                       std::vector<int>{0, 5});
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("class 5") != std::string::npos);
    }
  }
}

TEST_CASE("downsample_mask samples cell centres") {
  const Tensor m({4, 4}, {0, 0, 1, 1, 0, 2, 1, 3, 4, 4, 5, 5, 4, 6, 5, 7});
  CHECK(testing::bit_equal(downsample_mask(m, 2), Tensor({2, 2}, {2, 3, 6, 7})));
}

TEST_CASE("decode") {
  const auto model = make_model();
  Rng rng(3);
  SUBCASE("self match") {
    const auto protos = random_tensor({32, 3}, rng);
    const PrototypeBank bank{{0, 1, 2}, protos};
    // every query pixel equals prototype 1
    std::vector<double> q(32 * 4);
    for (std::size_t d = 0; d < 32; ++d) {
      for (std::size_t p = 0; p < 4; ++p) q[d * 4 + p] = protos.data()[d * 3 + 1];
    }
    const auto logits = decode(model, Tensor({32, 2, 2}, q), bank);
    CHECK(logits.shape() == Shape{3, 2, 2});
    const auto labels = argmax_labels(logits, bank.class_ids);
    for (double v : labels.data()) CHECK(v == 1.0);
  }
  SUBCASE("zero temperature ties break to the lowest class") {
    auto m = model.clone();
    Tensor tau = m.param("decoder.tau");
    tau.mutable_data()[0] = 0.0;
    const PrototypeBank bank{{0, 1}, random_tensor({32, 2}, rng)};
    const auto logits = decode(m, random_tensor({32, 2, 2}, rng), bank);
    for (double v : logits.data()) CHECK(v == 0.0);
    const auto labels = argmax_labels(logits, bank.class_ids);
    for (double v : labels.data()) CHECK(v == 0.0);
  }
  SUBCASE("hand cosine table") {
    // identity projection: logits = tau * cos(f_p, proto_c)
    const Tensor protos({32, 2}, [] {
      std::vector<double> v(64, 0.0);
      v[0 * 2 + 0] = 1.0;  // e0
      v[1 * 2 + 1] = 1.0;  // e1
      return v;
    }());
    std::vector<double> q(32 * 2, 0.0);
    q[0 * 2 + 0] = 3.0;  // pixel 0 = (3, 4)
    q[1 * 2 + 0] = 4.0;
    q[0 * 2 + 1] = -1.0;  // pixel 1 = (-1, 0, ..., 1)
    q[31 * 2 + 1] = 1.0;
    const auto logits = decode(model, Tensor({32, 1, 2}, q), PrototypeBank{{0, 1}, protos});
    const double tau = model.param("decoder.tau").item();
    CHECK(std::abs(logits.data()[0] - tau * 0.6) < 1e-10);
    CHECK(std::abs(logits.data()[2] - tau * 0.8) < 1e-10);
    CHECK(std::abs(logits.data()[1] - tau * -1.0 / std::sqrt(2.0)) < 1e-10);
    CHECK(std::abs(logits.data()[3]) < 1e-10);
  }
  SUBCASE("cosine bound and upsampled shape") {
    const PrototypeBank bank{{0, 1, 2}, random_tensor({32, 3}, rng)};
    const auto logits = segment_logits(model, random_tensor({32, 16, 16}, rng), bank);
    CHECK(logits.shape() == Shape{3, 32, 32});
    const double tau = model.param("decoder.tau").item();
    for (double v : logits.data()) CHECK(std::abs(v) <= tau + 1e-12);
  }
  CHECK_THROWS_AS(decode(model, random_tensor({32, 2, 2}, rng), PrototypeBank{}), ContractError);
}

TEST_CASE("permutation equivariance") {
  const auto model = make_model();
  Rng rng(4);
  const auto protos = random_tensor({32, 3}, rng);
  const auto q = random_tensor({32, 4, 4}, rng);
  std::vector<double> perm(96);
  const std::size_t order[3] = {2, 0, 1};
  for (std::size_t d = 0; d < 32; ++d) {
    for (std::size_t c = 0; c < 3; ++c) perm[d * 3 + c] = protos.data()[d * 3 + order[c]];
  }
  const auto a = decode(model, q, {{0, 1, 2}, protos});
  const auto b = decode(model, q, {{2, 0, 1}, Tensor({32, 3}, perm)});
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t p = 0; p < 16; ++p) CHECK(b.data()[c * 16 + p] == a.data()[order[c] * 16 + p]);
  }
  CHECK(testing::bit_equal(argmax_labels(a, std::vector<int>{0, 1, 2}), argmax_labels(b, std::vector<int>{2, 0, 1})));
}

TEST_CASE("full pipeline gradients") {
  for (auto v : {EncoderVariant::kConv, EncoderVariant::kAttention}) {
    auto model = make_model(v, 2).clone();
    model.set_trainable(ParamGroup::kEncoder, true);
    model.set_trainable(ParamGroup::kDecoder, true);
    auto adapters = attach(model, policy_for(v), 2, 1.0, 3);
    Rng rng(5);
    for (auto t : adapters.trainable()) {
      for (auto& x : t.mutable_data()) x = rng.uniform(-0.3, 0.3);
    }
    const auto ep = sample_episode(synth::FoldSplit::make(0), EpisodeSpec{.n_way = 2, .k_shot = 1}, 8);
    std::vector<Tensor> params = adapters.trainable();
    for (const auto& p : model.parameters()) {
      if (p.group != ParamGroup::kFrozen) params.push_back(p.value);
    }
    const auto r = testing::grad_check([&] { return episode_loss(model, ep, {}, &adapters); }, params, 60, rng);
    CHECK(r.max_rel < 1e-4);
    model.freeze_all();
  }
}

TEST_CASE("meta_train") {
  const auto split = synth::FoldSplit::make(1);
  MetaTrainConfig cfg;
  auto source = [&](std::size_t step) { return sample_training_episode(split, cfg.episode, step); };
  SUBCASE("zero steps leave the model unchanged") {
    auto m = make_model();
    const auto before = m.checksum();
    cfg.steps = 0;
    CHECK(meta_train(m, source, cfg).empty());
    CHECK(m.checksum() == before);
  }
  SUBCASE("same seed, same checkpoint") {
    cfg.steps = 5;
    auto a = make_model(), b = make_model();
    meta_train(a, source, cfg);
    meta_train(b, source, cfg);
    CHECK(a.checksum() == b.checksum());
    CHECK(a.checksum() != make_model().checksum());
    CHECK(a.meta_train_steps == 5);
    const std::vector<ParamGroup> frozen = {ParamGroup::kFrozen};
    CHECK(a.checksum(frozen) == make_model().checksum(frozen));
    for (const auto& p : a.parameters()) CHECK_FALSE(p.value.requires_grad());
  }
  SUBCASE("divergence reports the step") {
    cfg.steps = 4;
    auto m = make_model();
    auto bad = [&](std::size_t step) {
      auto ep = source(step);
      if (step == 2) ep.query.image.mutable_data()[0] = std::numeric_limits<double>::infinity();
      return ep;
    };
    try {
      meta_train(m, bad, cfg);
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      CHECK(std::string(e.what()).find("step 2") != std::string::npos);
    }
    CHECK(Tape::current().size() == 0);
  }
}

TEST_CASE("checkpoint round trip") {
  auto m = make_model(EncoderVariant::kAttention, 9);
  m.meta_train_steps = 17;
  const auto dir = std::filesystem::temp_directory_path() / "tap_ckpt_roundtrip";
  std::filesystem::remove_all(dir);
  m.save(dir);
  const auto back = ModelState::load(dir);
  CHECK(back.checksum() == m.checksum());
  CHECK(back.meta_train_steps == 17);
  CHECK(back.config().variant == EncoderVariant::kAttention);
  std::filesystem::remove(dir / "decoder.tau.tapt");
  CHECK_THROWS_AS(ModelState::load(dir), DataError);
  std::filesystem::remove_all(dir);
}
