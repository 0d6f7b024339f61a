#pragma once

// Differentiable operations on NCHW tensors. Every op is instantiated for
// float (training) and double (finite-difference checks).

#include <vector>

#include "scgan/nn/tensor.hpp"

namespace scgan::nn {

// 2-D cross-correlation with zero padding. `bias` may be an undefined tensor.
// x: [N,Ci,H,W], weight: [Co,Ci,k,k], bias: [Co].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                 int padding);

// Mirror padding that excludes the edge sample (d c b | a b c d | c b a).
template <typename T>
Tensor<T> reflect_pad(const Tensor<T>& x, int pad);

// Per-sample, per-channel normalization with affine gamma/beta of shape [C].
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                        double eps = 1e-5);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, double slope);
template <typename T>
Tensor<T> tanh(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor);

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x);

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
// Channels [begin, end).
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int begin, int end);

// Dot-product self-attention over all spatial positions with residual gain:
//   y = x + gamma * (V softmax(Q^T K)^T)
// with Q = wq*x + bq, K = wk*x + bk (key channels) and V = wv*x + bv.
// wq, wk: [Ck, C]; wv: [C, C]; biases per output channel; gamma: [1].
// If `weights` is non-null it receives the attention matrices, one
// [P x P] row-stochastic block per sample (P = H*W).
// Backward keeps the attention matrices when N*P*P is at most `cache_limit`
// elements and recomputes them block by block otherwise; both give the same
// gradients.
template <typename T>
struct AttentionWeights {
  Tensor<T> wq, bq, wk, bk, wv, bv, gamma;
};

inline constexpr std::size_t kAttentionCacheLimit = std::size_t{1} << 25;

template <typename T>
Tensor<T> self_attention(const Tensor<T>& x, const AttentionWeights<T>& w,
                         std::vector<T>* weights = nullptr,
                         std::size_t cache_limit = kAttentionCacheLimit);

// Scalar reductions.
template <typename T>
Tensor<T> mean_squared_error(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mean_absolute_error(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mean_squared_error_to(const Tensor<T>& a, double target);

bool all_finite(std::span<const float> values);
bool all_finite(std::span<const double> values);

}  // namespace scgan::nn
