#pragma once

#include <string>
#include <vector>

#include "aggpose/ops.hpp"
#include "aggpose/rng.hpp"
#include "aggpose/tensor.hpp"

namespace aggpose {

/// A learnable tensor with its checkpoint name and the pyramid level it
/// belongs to (0 for level-independent parts such as the head).
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  int level = 0;
};

template <typename T>
using ParameterList = std::vector<Parameter<T>>;

/// Appends parameters to a list under a dotted name prefix.
template <typename T>
class ParameterCollector {
 public:
  ParameterCollector(ParameterList<T>& out, std::string prefix, int level)
      : out_(&out), prefix_(std::move(prefix)), level_(level) {}

  ParameterCollector sub(const std::string& name) const {
    return ParameterCollector(*out_, prefix_ + name + ".", level_);
  }
  ParameterCollector at_level(int level) const { return ParameterCollector(*out_, prefix_, level); }
  void add(const std::string& name, const Tensor<T>& t) const {
    out_->push_back(Parameter<T>{prefix_ + name, t, level_});
  }

 private:
  ParameterList<T>* out_;
  std::string prefix_;
  int level_;
};

/// Row-major weight [in, out] plus bias [out].
template <typename T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;

  Linear() = default;
  Linear(Index in, Index out, Rng& rng, double sigma = 0.02);

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
  void collect(const ParameterCollector<T>& c) const;
  void zero();
};

template <typename T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  T eps = T(1e-6);

  LayerNorm() = default;
  explicit LayerNorm(Index channels);

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta, eps); }
  void collect(const ParameterCollector<T>& c) const;
};

/// [B,C,H,W] -> [B,H*W,C] in row-major grid order.
template <typename T>
Tensor<T> tokens_from_map(const Tensor<T>& map);
/// [B,H*W,C] -> [B,C,H,W].
template <typename T>
Tensor<T> map_from_tokens(const Tensor<T>& tokens, Index height, Index width);

struct PatchEmbedConfig {
  int kernel = 7;
  int stride = 4;
  int padding = 3;
  Index in_channels = 3;
  Index out_channels = 64;

  /// Throws ShapeError on invalid geometry.
  void validate() const;
  /// floor((in + 2P - K)/S) + 1; throws if < 1.
  Index out_size(Index in) const;
};

/// Strided dense convolution (unfold + matmul) followed by layer norm over
/// channels. Kernel larger than stride gives overlapping patches.
template <typename T>
class OverlappedPatchEmbed {
 public:
  OverlappedPatchEmbed() = default;
  OverlappedPatchEmbed(const PatchEmbedConfig& cfg, Rng& rng);

  const PatchEmbedConfig& config() const { return cfg_; }
  /// x [B,C_in,H,W] -> [B,C_out,H',W'].
  Tensor<T> operator()(const Tensor<T>& x) const;
  /// Same, in token layout [B,H'*W',C_out].
  Tensor<T> tokens(const Tensor<T>& x, Index& out_h, Index& out_w) const;
  void collect(const ParameterCollector<T>& c) const;

  Linear<T> proj;  // [C_in*K*K, C_out]
  LayerNorm<T> norm;

 private:
  PatchEmbedConfig cfg_;
};

struct AttentionConfig {
  Index channels = 64;
  int heads = 1;
  /// Token-count divisor; must be a perfect square r*r.
  int reduction = 1;

  void validate() const;
  Index head_dim() const { return channels / heads; }
  /// Side of the spatial tile merged into one key/value token.
  int tile() const;
};

/// Multi-head self-attention whose keys and values are shortened by merging
/// each r x r tile of tokens (row-major grid order) into one token of width
/// r*r*C and projecting it back to C. Queries keep all N tokens.
template <typename T>
class EfficientSelfAttention {
 public:
  EfficientSelfAttention() = default;
  EfficientSelfAttention(const AttentionConfig& cfg, Rng& rng);

  const AttentionConfig& config() const { return cfg_; }
  /// x [B,N,C] on an H x W grid. If `weights` is given it receives the
  /// attention probabilities [B*heads, N, N/reduction].
  Tensor<T> operator()(const Tensor<T>& x, Index height, Index width, Tensor<T>* weights = nullptr) const;
  void collect(const ParameterCollector<T>& c) const;

  Linear<T> query, key, value, out;
  Linear<T> reduce_key, reduce_value;  // present only when reduction > 1

 private:
  Tensor<T> reduce(const Tensor<T>& x, const Linear<T>& proj, Index height, Index width) const;
  Tensor<T> split_heads(const Tensor<T>& x) const;

  AttentionConfig cfg_;
};

struct MixFfnConfig {
  Index channels = 64;
  int expansion = 4;
  /// Input width when it differs from `channels` (fusion over a concat);
  /// 0 means equal to `channels`.
  Index in_channels = 0;

  void validate() const;
  Index input_width() const { return in_channels == 0 ? channels : in_channels; }
  Index hidden() const { return channels * expansion; }
};

/// fc2(GELU(DWConv3x3(fc1(x)))), with the residual + x when widths agree.
template <typename T>
class MixFfn {
 public:
  MixFfn() = default;
  MixFfn(const MixFfnConfig& cfg, Rng& rng);

  const MixFfnConfig& config() const { return cfg_; }
  /// Branch without the residual. x [B,N,C_in] with N == H*W.
  Tensor<T> branch(const Tensor<T>& x, Index height, Index width) const;
  /// branch(x) + x; requires in_channels == channels.
  Tensor<T> operator()(const Tensor<T>& x, Index height, Index width) const;
  void collect(const ParameterCollector<T>& c) const;
  /// Zeroes the output projection so the branch contributes exactly 0.
  void zero_branch() { fc2.zero(); }

  Linear<T> fc1;
  Tensor<T> dw_weight;  // [hidden,3,3]
  Tensor<T> dw_bias;    // [hidden]
  Linear<T> fc2;

 private:
  MixFfnConfig cfg_;
};

/// Pre-norm block: y = x + Attn(LN1(x)); out = y + MixFfn.branch(LN2(y)).
template <typename T>
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(const AttentionConfig& attn, const MixFfnConfig& ffn, Rng& rng);

  Tensor<T> operator()(const Tensor<T>& x, Index height, Index width) const;
  void collect(const ParameterCollector<T>& c) const;
  void zero_branches();

  LayerNorm<T> norm1;
  EfficientSelfAttention<T> attn;
  LayerNorm<T> norm2;
  MixFfn<T> ffn;
};

}  // namespace aggpose
