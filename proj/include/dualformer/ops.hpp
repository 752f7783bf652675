#pragma once

#include "dualformer/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace dualformer {

// Broadcasting is limited to tensor-with-scalar and bias along axis 1
// (the channel axis of NCHW and of [rows x C] matrices). Everything else
// needs matching shapes.

template <typename S> Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> scale(const Tensor<S>& a, S factor);
template <typename S> Tensor<S> add_scalar(const Tensor<S>& a, S value);
/// x + bias broadcast along axis 1; bias has shape [x.dim(1)].
template <typename S> Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& bias);

template <typename S> Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S> Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S> Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <typename S> Tensor<S> operator*(const Tensor<S>& a, S s) { return scale(a, s); }
template <typename S> Tensor<S> operator*(S s, const Tensor<S>& a) { return scale(a, s); }

template <typename S> Tensor<S> sum(const Tensor<S>& a);
template <typename S> Tensor<S> mean(const Tensor<S>& a);

template <typename S> Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> transpose(const Tensor<S>& a);
template <typename S> Tensor<S> reshape(const Tensor<S>& a, Shape shape);

/// Numerically stable softmax (max subtracted) along `axis`.
template <typename S> Tensor<S> softmax(const Tensor<S>& a, int axis);
template <typename S> Tensor<S> sigmoid(const Tensor<S>& a);
/// Exact (erf-based) GELU.
template <typename S> Tensor<S> gelu(const Tensor<S>& a);

/// x[..., in] * w[in, out] (+ b[out]). Leading axes of x are batch axes.
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b = {});

struct Conv2dOptions {
  Index stride = 1;
  Index padding = 0;
  Index groups = 1;
};

/// Cross-correlation. x:[B,C,H,W], w:[O,C/groups,kh,kw], optional b:[O].
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b,
                 const Conv2dOptions& options);

Index conv_output_size(Index input, Index kernel, Index stride, Index padding);

/// Batch normalization over (B,H,W) per channel. In training mode batch
/// statistics are used and the running buffers are updated in place.
template <typename S>
Tensor<S> batch_norm2d(const Tensor<S>& x, const Tensor<S>& gamma,
                       const Tensor<S>& beta, Tensor<S>& running_mean,
                       Tensor<S>& running_var, bool training, S momentum = S(0.1),
                       S eps = S(1e-5));

/// Layer normalization over the channel axis of an NCHW tensor, per pixel.
template <typename S>
Tensor<S> layer_norm_channels(const Tensor<S>& x, const Tensor<S>& gamma,
                              const Tensor<S>& beta, S eps = S(1e-5));

/// [B,C,H,W] -> [B,C]
template <typename S> Tensor<S> global_avg_pool(const Tensor<S>& x);

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis);
template <typename S>
Tensor<S> slice(const Tensor<S>& x, int axis, Index begin, Index length);

/// [B, C*k*k, h, w] -> [B, C, h*k, w*k]; channel c*k*k + dy*k + dx lands at
/// spatial offset (dy, dx) of each k x k cell.
template <typename S> Tensor<S> depth_to_space(const Tensor<S>& x, Index k);
/// Exact inverse of depth_to_space.
template <typename S> Tensor<S> space_to_depth(const Tensor<S>& x, Index k);

/// [B,C,H,W] -> [B, H*W, C]
template <typename S> Tensor<S> nchw_to_tokens(const Tensor<S>& x);
/// [B, H*W, C] -> [B,C,H,W]
template <typename S> Tensor<S> tokens_to_nchw(const Tensor<S>& x, Index height, Index width);

/// Mean softmax cross-entropy; logits [B, classes].
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, std::span<const int> labels);

/// softmax(Q K^T / sqrt(d_e)) V with Q = x Wq, K = x Wk, V = x Wv; the
/// quadratic-cost reference attention.
template <typename S>
Tensor<S> vanilla_attention(const Tensor<S>& x, const Tensor<S>& wq, const Tensor<S>& wk,
                            const Tensor<S>& wv);

/// Multiply-accumulate counter fed by the dense kernels (thread local).
std::uint64_t& mac_counter();

}  // namespace dualformer
