#include "aggpose/blocks.hpp"

#include <cmath>

#include "aggpose/profile.hpp"

namespace aggpose {

namespace {

template <typename T>
Tensor<T> trunc_normal(Shape shape, double sigma, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (T& v : t.mutable_data()) v = static_cast<T>(rng.truncated_normal(sigma));
  return t;
}

// Convolution kernels follow the Mix Transformer fan-out initialization.
template <typename T>
Tensor<T> fan_out_normal(Shape shape, double fan_out, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double sigma = std::sqrt(2.0 / fan_out);
  for (T& v : t.mutable_data()) v = static_cast<T>(rng.normal() * sigma);
  return t;
}

template <typename T>
Tensor<T> leaf(Tensor<T> t) {
  t.set_requires_grad(true);
  return t;
}

}  // namespace

template <typename T>
Linear<T>::Linear(Index in, Index out, Rng& rng, double sigma)
    : weight(leaf(trunc_normal<T>(Shape{in, out}, sigma, rng))), bias(leaf(Tensor<T>::zeros(Shape{out}))) {}

template <typename T>
void Linear<T>::collect(const ParameterCollector<T>& c) const {
  c.add("weight", weight);
  c.add("bias", bias);
}

template <typename T>
void Linear<T>::zero() {
  for (T& v : weight.mutable_data()) v = T(0);
  for (T& v : bias.mutable_data()) v = T(0);
}

template <typename T>
LayerNorm<T>::LayerNorm(Index channels)
    : gamma(leaf(Tensor<T>::ones(Shape{channels}))), beta(leaf(Tensor<T>::zeros(Shape{channels}))) {}

template <typename T>
void LayerNorm<T>::collect(const ParameterCollector<T>& c) const {
  c.add("gamma", gamma);
  c.add("beta", beta);
}

template <typename T>
Tensor<T> tokens_from_map(const Tensor<T>& map) {
  if (map.rank() != 4) throw ShapeError("tokens_from_map: expected [B,C,H,W], got " + to_string(map.shape()));
  ScopedTimer timer("layout");
  const Index b = map.dim(0), c = map.dim(1), h = map.dim(2), w = map.dim(3);
  return reshape(permute(map, {0, 2, 3, 1}), Shape{b, h * w, c});
}

template <typename T>
Tensor<T> map_from_tokens(const Tensor<T>& tokens, Index height, Index width) {
  if (tokens.rank() != 3 || tokens.dim(1) != height * width) {
    throw ShapeError("map_from_tokens: tokens " + to_string(tokens.shape()) + " do not cover a " +
                     std::to_string(height) + "x" + std::to_string(width) + " grid");
  }
  ScopedTimer timer("layout");
  const Index b = tokens.dim(0), c = tokens.dim(2);
  return permute(reshape(tokens, Shape{b, height, width, c}), {0, 3, 1, 2});
}

// ---------------------------------------------------------------------------

void PatchEmbedConfig::validate() const {
  if (kernel <= 0 || stride <= 0 || padding < 0 || in_channels <= 0 || out_channels <= 0) {
    throw ShapeError("patch embed: invalid config kernel=" + std::to_string(kernel) + " stride=" +
                     std::to_string(stride) + " padding=" + std::to_string(padding));
  }
}

Index PatchEmbedConfig::out_size(Index in) const {
  validate();
  const Index out = in + 2 * padding - kernel < 0 ? 0 : conv_out_size(in, kernel, stride, padding);
  if (out < 1) {
    throw ShapeError("patch embed: input size " + std::to_string(in) + " too small for kernel " +
                     std::to_string(kernel) + " with padding " + std::to_string(padding));
  }
  return out;
}

template <typename T>
OverlappedPatchEmbed<T>::OverlappedPatchEmbed(const PatchEmbedConfig& cfg, Rng& rng)
    : norm(cfg.out_channels), cfg_(cfg) {
  cfg.validate();
  const Index fan_in = cfg.in_channels * cfg.kernel * cfg.kernel;
  proj.weight = leaf(fan_out_normal<T>(Shape{fan_in, cfg.out_channels},
                                       static_cast<double>(cfg.kernel * cfg.kernel * cfg.out_channels), rng));
  proj.bias = leaf(Tensor<T>::zeros(Shape{cfg.out_channels}));
}

template <typename T>
Tensor<T> OverlappedPatchEmbed<T>::tokens(const Tensor<T>& x, Index& out_h, Index& out_w) const {
  if (x.rank() != 4 || x.dim(1) != cfg_.in_channels) {
    throw ShapeError("patch embed: expected [B," + std::to_string(cfg_.in_channels) + ",H,W], got " +
                     to_string(x.shape()));
  }
  ScopedTimer timer("patch_embed");
  out_h = cfg_.out_size(x.dim(2));
  out_w = cfg_.out_size(x.dim(3));
  const Tensor<T> cols = unfold_patches(x, cfg_.kernel, cfg_.stride, cfg_.padding);
  return norm(proj(cols));
}

template <typename T>
Tensor<T> OverlappedPatchEmbed<T>::operator()(const Tensor<T>& x) const {
  Index h = 0, w = 0;
  const Tensor<T> t = tokens(x, h, w);
  return map_from_tokens(t, h, w);
}

template <typename T>
void OverlappedPatchEmbed<T>::collect(const ParameterCollector<T>& c) const {
  proj.collect(c.sub("proj"));
  norm.collect(c.sub("norm"));
}

// ---------------------------------------------------------------------------

int AttentionConfig::tile() const {
  const int r = static_cast<int>(std::lround(std::sqrt(static_cast<double>(reduction))));
  return r;
}

void AttentionConfig::validate() const {
  if (channels <= 0 || heads <= 0 || channels % heads != 0) {
    throw ShapeError("attention: channels " + std::to_string(channels) + " not divisible by heads " +
                     std::to_string(heads));
  }
  if (reduction < 1 || tile() * tile() != reduction) {
    throw ShapeError("attention: reduction ratio " + std::to_string(reduction) + " is not a perfect square");
  }
}

template <typename T>
EfficientSelfAttention<T>::EfficientSelfAttention(const AttentionConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg.validate();
  const Index c = cfg.channels;
  query = Linear<T>(c, c, rng);
  key = Linear<T>(c, c, rng);
  value = Linear<T>(c, c, rng);
  if (cfg.reduction > 1) {
    reduce_key = Linear<T>(c * cfg.reduction, c, rng);
    reduce_value = Linear<T>(c * cfg.reduction, c, rng);
  }
  out = Linear<T>(c, c, rng);
}

template <typename T>
Tensor<T> EfficientSelfAttention<T>::reduce(const Tensor<T>& x, const Linear<T>& proj, Index height,
                                            Index width) const {
  if (cfg_.reduction == 1) return x;
  const Index b = x.dim(0), c = x.dim(2);
  const Index r = cfg_.tile();
  const Tensor<T> grid = reshape(x, Shape{b, height / r, r, width / r, r, c});
  const Tensor<T> tiles = permute(grid, {0, 1, 3, 2, 4, 5});
  const Index m = (height / r) * (width / r);
  return proj(reshape(tiles, Shape{b, m, r * r * c}));
}

template <typename T>
Tensor<T> EfficientSelfAttention<T>::split_heads(const Tensor<T>& x) const {
  const Index b = x.dim(0), n = x.dim(1);
  const Index h = cfg_.heads, d = cfg_.head_dim();
  if (h == 1) return x;
  return reshape(permute(reshape(x, Shape{b, n, h, d}), {0, 2, 1, 3}), Shape{b * h, n, d});
}

template <typename T>
Tensor<T> EfficientSelfAttention<T>::operator()(const Tensor<T>& x, Index height, Index width,
                                                Tensor<T>* weights) const {
  if (x.rank() != 3 || x.dim(2) != cfg_.channels) {
    throw ShapeError("attention: expected [B,N," + std::to_string(cfg_.channels) + "], got " +
                     to_string(x.shape()));
  }
  const Index n = x.dim(1);
  if (n != height * width) {
    throw ShapeError("attention: token count " + std::to_string(n) + " != grid " + std::to_string(height) +
                     "x" + std::to_string(width));
  }
  if (n % cfg_.reduction != 0) {
    throw ShapeError("attention: token count " + std::to_string(n) + " not divisible by reduction ratio " +
                     std::to_string(cfg_.reduction));
  }
  const int r = cfg_.tile();
  if (height % r != 0 || width % r != 0) {
    throw ShapeError("attention: grid " + std::to_string(height) + "x" + std::to_string(width) +
                     " not divisible by tile side " + std::to_string(r));
  }
  ScopedTimer timer("attention");
  const Index b = x.dim(0), heads = cfg_.heads, d = cfg_.head_dim();
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(d));

  const Tensor<T> q = split_heads(scale(query(x), inv_scale));
  const Tensor<T> k = split_heads(reduce(key(x), reduce_key, height, width));
  const Tensor<T> v = split_heads(reduce(value(x), reduce_value, height, width));

  const Tensor<T> probs = softmax_lastaxis(matmul_nt(q, k));
  if (weights != nullptr) *weights = probs;
  Tensor<T> ctx = matmul(probs, v);  // [B*h, N, d]
  if (heads > 1) ctx = reshape(permute(reshape(ctx, Shape{b, heads, n, d}), {0, 2, 1, 3}), Shape{b, n, cfg_.channels});
  return out(ctx);
}

template <typename T>
void EfficientSelfAttention<T>::collect(const ParameterCollector<T>& c) const {
  query.collect(c.sub("query"));
  key.collect(c.sub("key"));
  value.collect(c.sub("value"));
  if (cfg_.reduction > 1) {
    reduce_key.collect(c.sub("reduce_key"));
    reduce_value.collect(c.sub("reduce_value"));
  }
  out.collect(c.sub("out"));
}

// ---------------------------------------------------------------------------

void MixFfnConfig::validate() const {
  if (channels <= 0 || expansion < 1 || in_channels < 0) {
    throw ShapeError("mix-ffn: invalid config channels=" + std::to_string(channels) + " expansion=" +
                     std::to_string(expansion));
  }
}

template <typename T>
MixFfn<T>::MixFfn(const MixFfnConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg.validate();
  const Index hidden = cfg.hidden();
  fc1 = Linear<T>(cfg.input_width(), hidden, rng);
  dw_weight = leaf(fan_out_normal<T>(Shape{hidden, 3, 3}, 9.0, rng));
  dw_bias = leaf(Tensor<T>::zeros(Shape{hidden}));
  fc2 = Linear<T>(hidden, cfg.channels, rng);
}

template <typename T>
Tensor<T> MixFfn<T>::branch(const Tensor<T>& x, Index height, Index width) const {
  if (x.rank() != 3 || x.dim(2) != cfg_.input_width()) {
    throw ShapeError("mix-ffn: expected [B,N," + std::to_string(cfg_.input_width()) + "], got " +
                     to_string(x.shape()));
  }
  if (x.dim(1) != height * width) {
    throw ShapeError("mix-ffn: token count " + std::to_string(x.dim(1)) + " != grid " + std::to_string(height) +
                     "x" + std::to_string(width));
  }
  ScopedTimer timer("mix_ffn");
  const Tensor<T> hidden = fc1(x);
  const Tensor<T> conv = depthwise_conv3x3(map_from_tokens(hidden, height, width), dw_weight, dw_bias);
  return fc2(gelu(tokens_from_map(conv)));
}

template <typename T>
Tensor<T> MixFfn<T>::operator()(const Tensor<T>& x, Index height, Index width) const {
  if (cfg_.input_width() != cfg_.channels) {
    throw ShapeError("mix-ffn: residual form needs equal input and output width");
  }
  return add(branch(x, height, width), x);
}

template <typename T>
void MixFfn<T>::collect(const ParameterCollector<T>& c) const {
  fc1.collect(c.sub("fc1"));
  c.add("dwconv.weight", dw_weight);
  c.add("dwconv.bias", dw_bias);
  fc2.collect(c.sub("fc2"));
}

// ---------------------------------------------------------------------------

template <typename T>
TransformerBlock<T>::TransformerBlock(const AttentionConfig& attn_cfg, const MixFfnConfig& ffn_cfg, Rng& rng)
    : norm1(attn_cfg.channels), attn(attn_cfg, rng), norm2(attn_cfg.channels), ffn(ffn_cfg, rng) {
  if (ffn_cfg.channels != attn_cfg.channels || ffn_cfg.input_width() != ffn_cfg.channels) {
    throw ShapeError("transformer block: attention and mix-ffn widths differ");
  }
}

template <typename T>
Tensor<T> TransformerBlock<T>::operator()(const Tensor<T>& x, Index height, Index width) const {
  const Tensor<T> y = add(x, attn(norm1(x), height, width));
  return add(y, ffn.branch(norm2(y), height, width));
}

template <typename T>
void TransformerBlock<T>::collect(const ParameterCollector<T>& c) const {
  norm1.collect(c.sub("norm1"));
  attn.collect(c.sub("attn"));
  norm2.collect(c.sub("norm2"));
  ffn.collect(c.sub("ffn"));
}

template <typename T>
void TransformerBlock<T>::zero_branches() {
  attn.out.zero();
  ffn.zero_branch();
}

#define AGGPOSE_INSTANTIATE_BLOCKS(T)                                       \
  template struct Linear<T>;                                                \
  template struct LayerNorm<T>;                                             \
  template Tensor<T> tokens_from_map(const Tensor<T>&);                     \
  template Tensor<T> map_from_tokens(const Tensor<T>&, Index, Index);       \
  template class OverlappedPatchEmbed<T>;                                   \
  template class EfficientSelfAttention<T>;                                 \
  template class MixFfn<T>;                                                 \
  template class TransformerBlock<T>;

AGGPOSE_INSTANTIATE_BLOCKS(float)
AGGPOSE_INSTANTIATE_BLOCKS(double)

}  // namespace aggpose
