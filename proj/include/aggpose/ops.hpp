#pragma once

#include <vector>

#include "aggpose/tensor.hpp"

// Differentiable tensor operations. Every op checks shapes and throws
// ShapeError naming the offending shapes; none broadcast except add_bias and
// linear (rank-1 bias onto the last axis).
namespace aggpose {

// [M,K]x[K,N] -> [M,N], or batched [B,M,K]x[B,K,N] -> [B,M,N].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Batched a * b^T: [B,M,K]x[B,N,K] -> [B,M,N].
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);

/// x[..., K] * w[K, N] (+ bias[N]). `bias` may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);
/// Adds a rank-1 bias along the last axis.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

/// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

/// Layer normalization over the last axis. `gamma`/`beta` may be undefined,
/// giving the plain standardized output.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));

/// Max-stabilized softmax over the last axis. Throws NumericError on NaN/Inf.
template <typename T>
Tensor<T> softmax_lastaxis(const Tensor<T>& x);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
/// General axis permutation; out.shape[i] = x.shape[axes[i]].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& axes);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
/// Contiguous sub-range [start, start+length) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, Index start, Index length);
template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, const std::vector<Index>& sizes, int axis);

/// 3x3 depthwise convolution, padding 1, stride 1. x [B,C,H,W], w [C,3,3], b [C].
template <typename T>
Tensor<T> depthwise_conv3x3(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

/// Bilinear resize by an integer power-of-two factor, align_corners = false.
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int factor);

/// im2col: x [B,C,H,W] -> [B, H'*W', C*k*k] with zero padding. Column order is
/// (c, ky, kx), matching a weight laid out as [C*k*k, C_out].
template <typename T>
Tensor<T> unfold_patches(const Tensor<T>& x, int kernel, int stride, int padding);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

/// Masked heatmap MSE. pred/target [B,K,H,W], mask [B,K] (0/1 weights).
/// loss = sum_{b,k} m_bk * mean_hw (pred - target)^2 / sum_{b,k} m_bk; 0 when
/// the mask is all zero.
template <typename T>
Tensor<T> masked_mse(const Tensor<T>& pred, const Tensor<T>& target, const Tensor<T>& mask);

/// Output spatial size of a strided window op.
inline Index conv_out_size(Index in, int kernel, int stride, int padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

}  // namespace aggpose
