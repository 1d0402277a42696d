#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>

#include "dmadapter/adam.hpp"
#include "dmadapter/model.hpp"
#include "dmadapter/objectives.hpp"
#include "test_util.hpp"

using namespace dmadapter;
using dmadapter::testing::random_tensor;

namespace {

BackboneConfig small_backbone() {
  BackboneConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_layers = 2;
  cfg.vocab_size = 12;
  cfg.text_len = 8;
  cfg.init_std = 0.2;
  return cfg;
}

Tensor random_image(const BackboneConfig& cfg, std::mt19937_64& rng) {
  return random_tensor({cfg.image_h, cfg.image_w, cfg.channels}, rng);
}

double row_norm(const Tensor& x, std::size_t r) {
  double s = 0.0;
  for (std::size_t c = 0; c < x.dim(1); ++c) s += x.at(r, c) * x.at(r, c);
  return std::sqrt(s);
}

}  // namespace

TEST(BackboneConfig, DefaultsAndTokenCounts) {
  BackboneConfig cfg;
  EXPECT_EQ(cfg.d_model, 64u);
  EXPECT_EQ(cfg.n_heads, 4u);
  EXPECT_EQ(cfg.n_layers, 4u);
  EXPECT_EQ(cfg.vision_tokens(), 9u);  // 32x16 with patch 8
  BackboneConfig full_scale;
  full_scale.image_h = 384;
  full_scale.image_w = 128;
  full_scale.patch = 16;
  EXPECT_EQ(full_scale.num_patches(), 192u);
  EXPECT_EQ(full_scale.vision_tokens(), 193u);
}

TEST(BackboneConfig, ValidationErrors) {
  BackboneConfig cfg;
  cfg.n_heads = 5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.image_h = 30;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(EmbedImage, TokenCountAndClsPosition) {
  BackboneConfig cfg;
  ParameterStore store;
  DualEncoder enc(cfg, store);
  std::mt19937_64 rng(1);
  const auto seq = enc.vision().embed_image(random_image(cfg, rng));
  EXPECT_EQ(seq.embeddings.shape(), (Shape{9, cfg.d_model}));
  EXPECT_EQ(seq.special_positions, (std::vector<std::size_t>{0}));
}

TEST(EmbedImage, ZeroImageWithZeroPositionsGivesProjectionBias) {
  BackboneConfig cfg = small_backbone();
  ParameterStore store;
  DualEncoder enc(cfg, store);
  std::mt19937_64 rng(2);
  for (auto& v : store.get("backbone.vision.pos_embed").tensor.mutable_data()) v = 0.0;
  auto& bias = store.get("backbone.vision.patch_embed.bias").tensor.mutable_data();
  for (auto& v : bias) v = std::normal_distribution<double>(0.0, 1.0)(rng);
  const auto seq = enc.vision().embed_image(Tensor::zeros({cfg.image_h, cfg.image_w, cfg.channels}));
  for (std::size_t t = 1; t < seq.embeddings.dim(0); ++t)
    for (std::size_t c = 0; c < cfg.d_model; ++c) EXPECT_EQ(seq.embeddings.at(t, c), bias[c]);
}

TEST(EmbedImage, IndivisibleOrMismatchedImageIsConfigError) {
  BackboneConfig cfg;
  ParameterStore store;
  DualEncoder enc(cfg, store);
  EXPECT_THROW(enc.vision().embed_image(Tensor::zeros({30, 16, 3})), ConfigError);
  EXPECT_THROW(enc.vision().embed_image(Tensor::zeros({16, 16, 3})), ConfigError);
  EXPECT_THROW(enc.vision().embed_image(Tensor::zeros({32, 16, 1})), ConfigError);
}

TEST(EmbedText, EmptyCaptionIsBosEos) {
  ParameterStore store;
  DualEncoder enc(BackboneConfig{}, store);
  const auto seq = enc.text().embed_text({});
  EXPECT_EQ(seq.embeddings.dim(0), 2u);
  EXPECT_EQ(seq.special_positions, (std::vector<std::size_t>{0, 1}));
}

TEST(EmbedText, TwoTokensPutEosAtThree) {
  ParameterStore store;
  DualEncoder enc(BackboneConfig{}, store);
  const auto seq = enc.text().embed_text({3, 7});
  EXPECT_EQ(seq.embeddings.dim(0), 4u);
  EXPECT_EQ(seq.special_positions.back(), 3u);
}

TEST(EmbedText, SameIdAtDifferentPositionsDiffers) {
  ParameterStore store;
  DualEncoder enc(BackboneConfig{}, store);
  const auto seq = enc.text().embed_text({5, 5});
  bool differ = false;
  for (std::size_t c = 0; c < seq.embeddings.dim(1); ++c) differ |= seq.embeddings.at(1, c) != seq.embeddings.at(2, c);
  EXPECT_TRUE(differ);
}

TEST(EmbedText, OutOfVocabularyAndOverlongAreDataErrors) {
  BackboneConfig cfg;
  ParameterStore store;
  DualEncoder enc(cfg, store);
  EXPECT_THROW(enc.text().embed_text({static_cast<int>(cfg.vocab_size)}), DataError);
  EXPECT_THROW(enc.text().embed_text({-1}), DataError);
  EXPECT_THROW(enc.text().embed_text(std::vector<int>(cfg.text_len - 1, 0)), DataError);
  EXPECT_NO_THROW(enc.text().embed_text(std::vector<int>(cfg.text_len - 2, 0)));
}

TEST(TransformerBlock, ZeroWeightsPassInputThrough) {
  BackboneConfig cfg = small_backbone();
  ParameterStore store;
  DualEncoder enc(cfg, store);
  for (auto* p : store.all())
    if (p->name.find("block0.") != std::string::npos && p->name.find("gamma") == std::string::npos)
      for (auto& v : p->tensor.mutable_data()) v = 0.0;
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({2 * 5, cfg.d_model}, rng);
  Tensor y = enc.text().block(x, 2, 5, 0);
  EXPECT_EQ(y.data(), x.data());
}

TEST(TransformerBlock, SingleTokenAttentionIsValueProjection) {
  BackboneConfig cfg = small_backbone();
  cfg.d_model = 2;
  cfg.n_heads = 1;
  ParameterStore store;
  DualEncoder enc(cfg, store);
  std::mt19937_64 rng(4);
  for (auto* p : store.all())
    for (auto& v : p->tensor.mutable_data()) v = std::normal_distribution<double>(0.0, 1.0)(rng);
  Tensor x = random_tensor({1, 2}, rng);
  Tensor weights;
  Tensor got = enc.text().attention(x, 1, 1, 0, &weights);
  const auto& p = enc.text().block_params(0);
  // hand computation: out = (x Wv + bv) Wo + bo
  double v[2], expect[2];
  for (int j = 0; j < 2; ++j) v[j] = x[0] * p.wv->tensor.at(0, j) + x[1] * p.wv->tensor.at(1, j) + p.bv->tensor[j];
  for (int j = 0; j < 2; ++j) expect[j] = v[0] * p.wo->tensor.at(0, j) + v[1] * p.wo->tensor.at(1, j) + p.bo->tensor[j];
  EXPECT_EQ(weights.size(), 1u);
  EXPECT_EQ(weights[0], 1.0);
  EXPECT_NEAR(got[0], expect[0], 1e-12);
  EXPECT_NEAR(got[1], expect[1], 1e-12);
}

TEST(TransformerBlock, AttentionRowsSumToOne) {
  BackboneConfig cfg = small_backbone();
  ParameterStore store;
  DualEncoder enc(cfg, store);
  std::mt19937_64 rng(5);
  const std::size_t b = 3, t = 6;
  Tensor weights;
  enc.vision().attention(random_tensor({b * t, cfg.d_model}, rng, 3.0), b, t, 1, &weights);
  ASSERT_EQ(weights.shape(), (Shape{b * cfg.n_heads, t, t}));
  for (std::size_t r = 0; r < b * cfg.n_heads * t; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < t; ++c) s += weights[r * t + c];
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(TransformerBlock, LayerOutOfRangeThrows) {
  BackboneConfig cfg = small_backbone();
  ParameterStore store;
  DualEncoder enc(cfg, store);
  EXPECT_THROW(enc.text().block(Tensor::zeros({2, cfg.d_model}), 1, 2, cfg.n_layers), ArgumentError);
}

TEST(Encode, FeaturesHaveUnitNorm) {
  BackboneConfig cfg = small_backbone();
  ParameterStore store;
  DualEncoder enc(cfg, store);
  std::mt19937_64 rng(6);
  Tensor v = enc.encode_images({random_image(cfg, rng), random_image(cfg, rng)});
  Tensor t = enc.encode_texts({{1, 2, 3}, {4, 5, 6}});
  for (std::size_t r = 0; r < 2; ++r) {
    EXPECT_NEAR(row_norm(v, r), 1.0, 1e-9);
    EXPECT_NEAR(row_norm(t, r), 1.0, 1e-9);
  }
}

TEST(Encode, IdenticalImagesGiveIdenticalFeatures) {
  BackboneConfig cfg = small_backbone();
  ParameterStore store;
  DualEncoder enc(cfg, store);
  std::mt19937_64 rng(7);
  Tensor img = random_image(cfg, rng);
  Tensor batch = enc.encode_images({img, img.clone()});
  for (std::size_t c = 0; c < cfg.d_model; ++c) EXPECT_EQ(batch.at(0, c), batch.at(1, c));
  EXPECT_EQ(enc.encode_image(img).data(), enc.encode_image(img).data());
}

TEST(Encode, SwappingMiddleTokensChangesFeature) {
  BackboneConfig cfg = small_backbone();
  ParameterStore store;
  DualEncoder enc(cfg, store);
  EXPECT_NE(enc.encode_text({1, 2, 3, 4}).data(), enc.encode_text({1, 3, 2, 4}).data());
}

TEST(Encode, SameSeedIsBitIdenticalAcrossInstances) {
  BackboneConfig cfg = small_backbone();
  ParameterStore s1, s2;
  DualEncoder a(cfg, s1), b(cfg, s2);
  std::mt19937_64 r1(8), r2(8);
  EXPECT_EQ(a.encode_image(random_image(cfg, r1)).data(), b.encode_image(random_image(cfg, r2)).data());
  EXPECT_EQ(a.encode_text({0, 1, 2}).data(), b.encode_text({0, 1, 2}).data());
}

TEST(Encode, BatchedCaptionsMustShareLength) {
  ParameterStore store;
  DualEncoder enc(small_backbone(), store);
  EXPECT_THROW(enc.encode_texts({{1, 2}, {3}}), DataError);
}

TEST(Freeze, OnlyAdapterParametersRemainTrainable) {
  MoeConfig moe;
  DmAdapterModel model(small_backbone(), moe, 0);
  model.freeze_backbone();
  const auto trainable = model.params().trainable();
  ASSERT_FALSE(trainable.empty());
  for (auto* p : trainable) EXPECT_EQ(p->name.rfind("dm_adapter.", 0), 0u) << p->name;
  for (auto* p : model.params().all())
    if (p->name.rfind("backbone.", 0) == 0) {
      EXPECT_FALSE(p->trainable) << p->name;
    }
}

TEST(Freeze, BackboneUnchangedAfterHundredAdamSteps) {
  BackboneConfig cfg = small_backbone();
  MoeConfig moe;
  moe.reduction = 4;
  DmAdapterModel model(cfg, moe, 1);
  model.freeze_backbone();
  std::map<std::string, std::vector<double>> snapshot;
  for (auto* p : model.params().all())
    if (!p->trainable) snapshot[p->name] = p->tensor.data();

  std::mt19937_64 rng(9);
  std::vector<Tensor> images = {random_image(cfg, rng), random_image(cfg, rng)};
  const std::vector<std::vector<int>> caps = {{1, 2, 3}, {4, 5, 6}};
  Adam adam(1e-2, 0.9, 0.999, 1e-8);
  for (int step = 0; step < 100; ++step) {
    TapeScope scope;
    auto v = model.encode_images(images);
    auto t = model.encode_texts(caps);
    backward(sdm_bidirectional(v.features, t.features, match_distribution({0, 1})));
    for (auto* p : model.params().all())
      if (!p->trainable) {
        ASSERT_FALSE(p->tensor.has_grad()) << p->name;
      }
    adam.step(model.params().trainable());
    model.params().zero_grad();
  }
  for (const auto& [name, data] : snapshot) EXPECT_EQ(model.params().get(name).tensor.data(), data) << name;
  EXPECT_GT(adam.state().step, 0u);
}

TEST(Freeze, TrainableCountMatchesFormulaByEnumeration) {
  BackboneConfig cfg;  // d=64, 4+4 layers
  MoeConfig moe;
  moe.router = RouterMode::standard;
  DmAdapterModel model(cfg, moe, 0);
  model.freeze_backbone();
  std::size_t enumerated = 0;
  for (auto* p : model.params().trainable()) enumerated += p->tensor.size();
  // n (d m + m + m d + d) + d n per layer per branch, m = 8
  const std::size_t d = 64, m = 8, n = 6, per_layer = n * (d * m + m + m * d + d) + d * n;
  EXPECT_EQ(enumerated, 8 * per_layer);
  EXPECT_EQ(model.params().count_trainable(), enumerated);
}

TEST(AdapterInput, NormedAndResidualDifferOnceAdaptersAreLive) {
  BackboneConfig cfg = small_backbone();
  MoeConfig a, b;
  a.reduction = b.reduction = 4;
  b.input = AdapterInput::normed;
  DmAdapterModel ma(cfg, a, 3), mb(cfg, b, 3);
  for (auto* m : {&ma, &mb})
    for (auto* p : m->params().all())
      if (p->name.find("W_up") != std::string::npos)
        for (auto& v : p->tensor.mutable_data()) v = 0.1;
  EXPECT_NE(ma.encode_texts({{1, 2}}).features.data(), mb.encode_texts({{1, 2}}).features.data());
}
