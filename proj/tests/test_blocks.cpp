#include <gtest/gtest.h>

#include <cmath>

#include "aggpose/aggregation.hpp"
#include "aggpose/blocks.hpp"
#include "aggpose/model.hpp"
#include "attention_reference.hpp"
#include "test_util.hpp"

using namespace aggpose;
using aggpose::testing::max_abs_diff;
using aggpose::testing::random_tensor;
using D = double;

namespace {

void randomize_linear(Linear<D>& l, Rng& rng) {
  for (auto& v : l.weight.mutable_data()) v = rng.uniform(-0.5, 0.5);
  for (auto& v : l.bias.mutable_data()) v = rng.uniform(-0.5, 0.5);
}

}  // namespace

TEST(PatchEmbed, OutputSizeFormula) {
  PatchEmbedConfig cfg{3, 2, 1, 8, 16};
  EXPECT_EQ(cfg.out_size(64), 32);
  EXPECT_EQ(cfg.out_size(48), 24);
  PatchEmbedConfig stem{7, 4, 3, 3, 8};
  EXPECT_EQ(stem.out_size(256), 64);
  EXPECT_EQ(stem.out_size(192), 48);
  PatchEmbedConfig bad{2, 0, 0, 3, 8};
  EXPECT_THROW(bad.validate(), ShapeError);
}

TEST(PatchEmbed, UnitKernelWithIdentityWeightsIsLayerNormOfInput) {
  Rng rng(1);
  OverlappedPatchEmbed<D> embed(PatchEmbedConfig{1, 1, 0, 4, 4}, rng);
  embed.proj.weight = Tensor<D>({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  embed.proj.bias = Tensor<D>({4});
  const Tensor<D> x = random_tensor<D>({2, 4, 3, 5}, rng);
  const Tensor<D> y = embed(x);
  ASSERT_EQ(y.shape(), x.shape());
  const Tensor<D> expected = map_from_tokens(layer_norm(tokens_from_map(x), embed.norm.gamma, embed.norm.beta, 1e-6), 3, 5);
  EXPECT_LT(max_abs_diff(y, expected), 1e-14);
}

TEST(PatchEmbed, ShapesOnStemAndInnerEmbeds) {
  Rng rng(2);
  OverlappedPatchEmbed<D> stem(PatchEmbedConfig{7, 4, 3, 3, 8}, rng);
  EXPECT_EQ(stem(random_tensor<D>({1, 3, 64, 48}, rng)).shape(), (Shape{1, 8, 16, 12}));
  OverlappedPatchEmbed<D> inner(PatchEmbedConfig{3, 2, 1, 8, 16}, rng);
  EXPECT_EQ(inner(random_tensor<D>({1, 8, 64, 48}, rng)).shape(), (Shape{1, 16, 32, 24}));
}

TEST(Attention, SingleTokenReturnsProjectedValue) {
  Rng rng(3);
  EfficientSelfAttention<D> attn(AttentionConfig{6, 2, 1}, rng);
  randomize_linear(attn.value, rng);
  randomize_linear(attn.out, rng);
  const Tensor<D> x = random_tensor<D>({1, 1, 6}, rng);
  const Tensor<D> y = attn(x, 1, 1);
  const Tensor<D> expected = attn.out(attn.value(x));
  EXPECT_LT(max_abs_diff(y, expected), 1e-14);
}

TEST(Attention, FullResolutionMatchesTextbookAttention) {
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng(derive_seed(40, static_cast<std::uint64_t>(seed)));
    const int heads = seed % 2 == 0 ? 2 : 1;
    EfficientSelfAttention<D> attn(AttentionConfig{8, heads, 1}, rng);
    for (auto* l : {&attn.query, &attn.key, &attn.value, &attn.out}) randomize_linear(*l, rng);
    const Tensor<D> x = random_tensor<D>({2, 12, 8}, rng);
    const Tensor<D> y = attn(x, 3, 4);
    const auto ref = aggpose::testing::reference_attention(attn, x);
    for (Index i = 0; i < y.numel(); ++i) ASSERT_NEAR(y.data()[i], ref[static_cast<std::size_t>(i)], 1e-10);
  }
}

TEST(Attention, ReducedKeysGiveNarrowWeightMatrix) {
  Rng rng(5);
  EfficientSelfAttention<D> attn(AttentionConfig{8, 2, 4}, rng);
  Tensor<D> weights;
  const Tensor<D> y = attn(random_tensor<D>({3, 16, 8}, rng), 4, 4, &weights);
  EXPECT_EQ(y.shape(), (Shape{3, 16, 8}));
  EXPECT_EQ(weights.shape(), (Shape{6, 16, 4}));
  for (Index r = 0; r < 6 * 16; ++r) {
    D s = 0;
    for (Index j = 0; j < 4; ++j) s += weights.data()[r * 4 + j];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_THROW(AttentionConfig({8, 3, 1}).validate(), ShapeError);
  EXPECT_THROW(AttentionConfig({8, 2, 2}).validate(), ShapeError);
}

TEST(Attention, InvariantToKeyBiasShift) {
  // Shifting every key by the same vector adds a per-query constant to the logits.
  Rng rng(6);
  EfficientSelfAttention<D> attn(AttentionConfig{8, 2, 1}, rng);
  for (auto* l : {&attn.query, &attn.key, &attn.value, &attn.out}) randomize_linear(*l, rng);
  const Tensor<D> x = random_tensor<D>({1, 9, 8}, rng);
  const Tensor<D> before = attn(x, 3, 3);
  for (auto& v : attn.key.bias.mutable_data()) v += 3.7;
  EXPECT_LT(max_abs_diff(attn(x, 3, 3), before), 1e-12);
}

TEST(Attention, BatchPermutationEquivariant) {
  Rng rng(7);
  EfficientSelfAttention<D> attn(AttentionConfig{8, 2, 4}, rng);
  const Tensor<D> x = random_tensor<D>({3, 16, 8}, rng);
  const Tensor<D> y = attn(x, 4, 4);
  const Tensor<D> xp = concat(std::vector<Tensor<D>>{slice(x, 0, 2, 1), slice(x, 0, 0, 2)}, 0);
  const Tensor<D> yp = attn(xp, 4, 4);
  EXPECT_EQ(max_abs_diff(slice(yp, 0, 0, 1), slice(y, 0, 2, 1)), 0.0);
  EXPECT_EQ(max_abs_diff(slice(yp, 0, 1, 2), slice(y, 0, 0, 2)), 0.0);
}

TEST(MixFfn, ZeroBranchIsIdentity) {
  Rng rng(8);
  MixFfn<D> ffn(MixFfnConfig{8, 4, 0}, rng);
  EXPECT_EQ(ffn.config().hidden(), 32);
  EXPECT_EQ(ffn.fc1.weight.shape(), (Shape{8, 32}));
  ffn.zero_branch();
  const Tensor<D> x = random_tensor<D>({2, 12, 8}, rng);
  EXPECT_EQ(max_abs_diff(ffn(x, 3, 4), x), 0.0);
}

TEST(TransformerBlock, ZeroBranchesGiveIdentityAndStacksKeepShape) {
  Rng rng(9);
  std::vector<TransformerBlock<D>> stack;
  for (int i = 0; i < 3; ++i) stack.emplace_back(AttentionConfig{8, 2, 4}, MixFfnConfig{8, 4, 0}, rng);
  const Tensor<D> x = random_tensor<D>({2, 16, 8}, rng);
  Tensor<D> y = x;
  for (const auto& b : stack) y = b(y, 4, 4);
  EXPECT_EQ(y.shape(), x.shape());
  for (auto& b : stack) b.zero_branches();
  Tensor<D> z = x;
  for (const auto& b : stack) z = b(z, 4, 4);
  EXPECT_EQ(max_abs_diff(z, x), 0.0);
}

TEST(Route, SameLevelIsBitwiseIdentity) {
  Rng rng(10);
  CrossLevelRoute<D> route(2, 2, 16, 16, rng);
  const Tensor<D> x = random_tensor<D>({1, 16, 4, 3}, rng);
  EXPECT_EQ(max_abs_diff(route(x), x), 0.0);
}

TEST(Route, ChangesGridAndWidth) {
  Rng rng(11);
  CrossLevelRoute<D> up(2, 1, 128, 64, rng);
  EXPECT_EQ(up(random_tensor<D>({1, 128, 32, 24}, rng)).shape(), (Shape{1, 64, 64, 48}));
  CrossLevelRoute<D> down(1, 2, 64, 128, rng);
  EXPECT_EQ(down(random_tensor<D>({1, 64, 64, 48}, rng)).shape(), (Shape{1, 128, 32, 24}));
  EXPECT_THROW(CrossLevelRoute<D>(1, 3, 8, 8, rng), std::invalid_argument);
}

namespace {

PyramidFeatures<D> random_pyramid(const std::vector<Index>& channels, Index b, Index h, Index w, Rng& rng) {
  PyramidFeatures<D> p;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    p.levels.push_back(random_tensor<D>({b, channels[i], h >> i, w >> i}, rng));
  }
  return p;
}

}  // namespace

TEST(Fusion, SingleLevelWithZeroBranchIsIdentity) {
  Rng rng(12);
  LevelFusion<D> fuse(1, {8}, 2, rng);
  EXPECT_EQ(fuse.arity(), 1);
  fuse.zero_branch();
  const auto p = random_pyramid({8}, 2, 4, 4, rng);
  EXPECT_EQ(max_abs_diff(fuse(p), p.level(1)), 0.0);
}

TEST(Fusion, InteriorLevelConcatenatesThreeMaps) {
  Rng rng(13);
  const std::vector<Index> ch{8, 16, 32};
  LevelFusion<D> mid(2, ch, 2, rng);
  EXPECT_EQ(mid.arity(), 3);
  EXPECT_EQ(mid.ffn.config().input_width(), 48);
  EXPECT_EQ(LevelFusion<D>(1, ch, 2, rng).arity(), 2);
  EXPECT_EQ(LevelFusion<D>(3, ch, 2, rng).arity(), 2);
  const auto p = random_pyramid(ch, 1, 8, 8, rng);
  EXPECT_EQ(mid.route(p, 1).shape(), (Shape{1, 16, 4, 4}));
  EXPECT_EQ(mid.route(p, 3).shape(), (Shape{1, 16, 4, 4}));
  EXPECT_EQ(mid(p).shape(), p.level(2).shape());
}

TEST(Fusion, PyramidContracts) {
  Rng rng(14);
  const std::vector<Index> ch{8, 16, 32};
  PyramidFusion<D> fusion(ch, {2, 2, 2}, rng);
  const auto p = random_pyramid(ch, 3, 8, 12, rng);
  const auto out = fusion(p);
  ASSERT_EQ(out.size(), 3);
  for (int i = 1; i <= 3; ++i) EXPECT_EQ(out.level(i).shape(), p.level(i).shape());

  // Batch permutation equivariance.
  PyramidFeatures<D> perm;
  for (const auto& l : p.levels) perm.levels.push_back(concat(std::vector<Tensor<D>>{slice(l, 0, 2, 1), slice(l, 0, 0, 2)}, 0));
  const auto out_perm = fusion(perm);
  for (int i = 1; i <= 3; ++i) EXPECT_EQ(max_abs_diff(slice(out_perm.level(i), 0, 0, 1), slice(out.level(i), 0, 2, 1)), 0.0);

  fusion.zero_branches();
  const auto id = fusion(p);
  for (int i = 1; i <= 3; ++i) EXPECT_EQ(max_abs_diff(id.level(i), p.level(i)), 0.0);

  // Constant maps stay constant per channel away from the zero-padded borders.
  PyramidFusion<D> live(ch, {2, 2, 2}, rng);
  PyramidFeatures<D> flat;
  for (std::size_t i = 0; i < ch.size(); ++i) {
    const Index side = Index{32} >> i;
    Tensor<D> t({1, ch[i], side, side});
    for (Index c = 0; c < ch[i]; ++c) {
      const D v = rng.uniform(-1, 1);
      std::fill_n(t.mutable_ptr() + c * side * side, side * side, v);
    }
    flat.levels.push_back(t);
  }
  const auto fo = live(flat);
  for (int i = 1; i <= 2; ++i) {
    const Tensor<D>& t = fo.level(i);
    const Index side = t.dim(2);
    for (Index c = 0; c < t.dim(1); ++c) {
      const D* plane = t.ptr() + c * side * side;
      for (Index y = 3; y < side - 3; ++y) {
        for (Index x = 3; x < side - 3; ++x) EXPECT_NEAR(plane[y * side + x], plane[3 * side + 3], 1e-12) << "level " << i;
      }
    }
  }
}

TEST(Fusion, PyramidValidation) {
  Rng rng(15);
  auto p = random_pyramid({8, 16}, 1, 8, 8, rng);
  EXPECT_NO_THROW(p.validate({8, 16}));
  EXPECT_THROW(p.validate({8, 8}), ShapeError);
  p.levels[1] = random_tensor<D>({1, 16, 3, 4}, rng);
  EXPECT_THROW(p.validate(), ShapeError);
}

TEST(Model, ToyParameterCountMatchesShapes) {
  const AggPoseModel<D> model(ModelConfig::aggpose_t(21), 1);
  Index by_shape = 0;
  for (const auto& p : model.parameters()) {
    Index n = 1;
    for (Index d : p.value.shape()) n *= d;
    by_shape += n;
  }
  EXPECT_EQ(model.parameter_count(), by_shape);
  EXPECT_LT(by_shape, 60000);
  EXPECT_EQ(by_shape, 23541);
}

TEST(Model, ToyForwardShapesAndPyramid) {
  const ModelConfig cfg = ModelConfig::aggpose_t(21);
  const AggPoseModel<float> model(cfg, 2);
  Rng rng(3);
  Tensor<float> x({2, 3, 64, 48});
  for (auto& v : x.mutable_data()) v = static_cast<float>(rng.normal());
  // Second image repeats the first.
  std::copy(x.data().begin(), x.data().begin() + 3 * 64 * 48, x.mutable_data().begin() + 3 * 64 * 48);
  const auto out = model.forward_with_features(x);
  EXPECT_EQ(out.heatmaps.shape(), (Shape{2, 21, 16, 12}));
  ASSERT_EQ(out.pyramid.size(), 2);
  EXPECT_EQ(out.pyramid.level(1).shape(), (Shape{2, 8, 16, 12}));
  EXPECT_EQ(out.pyramid.level(2).shape(), (Shape{2, 16, 8, 6}));
  const Index per = 21 * 16 * 12;
  for (Index i = 0; i < per; ++i) EXPECT_EQ(out.heatmaps.data()[i], out.heatmaps.data()[per + i]);
}

TEST(Model, RejectsIndivisibleInput) {
  const AggPoseModel<float> model(ModelConfig::aggpose_t(21), 2);
  EXPECT_THROW(model.forward(Tensor<float>({1, 3, 60, 48})), ShapeError);
}

TEST(Model, LargeConfigsValidate) {
  for (const auto& cfg : {ModelConfig::aggpose_l(17), ModelConfig::aggpose_s(17)}) {
    EXPECT_NO_THROW(cfg.validate());
    EXPECT_EQ(cfg.levels(), 4);
    EXPECT_EQ(cfg.level_height(1), 64);
    EXPECT_EQ(cfg.level_width(4), 6);
  }
  EXPECT_EQ(ModelConfig::aggpose_l(17).depth(3, 3), 40);
  EXPECT_EQ(ModelConfig::aggpose_l(17).depth(4, 3), 0);
}

TEST(Model, ConfigJsonRoundTripAndHash) {
  const ModelConfig cfg = ModelConfig::aggpose_s(17);
  const ModelConfig back = ModelConfig::from_json(cfg.to_json());
  EXPECT_EQ(back.to_json(), cfg.to_json());
  EXPECT_EQ(back.hash(), cfg.hash());
  EXPECT_NE(ModelConfig::aggpose_l(17).hash(), cfg.hash());
  auto j = cfg.to_json();
  j["bogus"] = 1;
  EXPECT_THROW(ModelConfig::from_json(j), std::invalid_argument);
  auto bad = cfg;
  bad.heads[0] = 3;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  EXPECT_THROW(ModelConfig::named("aggpose-x", 17), std::invalid_argument);
}

TEST(Model, ResidualIdentityAtZeroBranches) {
  ModelConfig cfg = ModelConfig::aggpose_t(5);
  cfg.input_height = cfg.input_width = 32;
  AggPoseModel<D> model(cfg, 4);
  model.zero_residual_branches();
  Rng rng(5);
  const Tensor<D> x = random_tensor<D>({1, 3, 32, 32}, rng);
  const auto out = model.forward_with_features(x);
  const Tensor<D> stem = model.stem()(x);
  EXPECT_EQ(max_abs_diff(out.pyramid.level(1), stem), 0.0);
}

TEST(Model, FreezingTogglesRequiresGrad) {
  AggPoseModel<float> model(ModelConfig::aggpose_t(21), 1);
  model.set_frozen_levels({1});
  for (const auto& p : model.parameters()) EXPECT_EQ(p.value.requires_grad(), p.level != 1) << p.name;
  model.set_frozen_levels({});
  for (const auto& p : model.parameters()) EXPECT_TRUE(p.value.requires_grad()) << p.name;
}

TEST(Model, CloneIsIndependent) {
  AggPoseModel<float> model(ModelConfig::aggpose_t(21), 1);
  AggPoseModel<float> copy = model.clone();
  Tensor<float> w = copy.parameters().front().value;
  w.mutable_data()[0] += 1.0f;
  EXPECT_NE(model.parameters().front().value.data()[0], copy.parameters().front().value.data()[0]);
}
