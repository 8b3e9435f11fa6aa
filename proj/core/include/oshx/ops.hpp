#pragma once

#include <string>
#include <vector>

#include "oshx/rng.hpp"
#include "oshx/tensor.hpp"

namespace oshx {

/// One row of a forward shape trace. Shapes are per sample (no batch dim).
struct TraceRow {
  std::string name;
  Shape in;
  Shape out;
};
using Trace = std::vector<TraceRow>;

// ---- elementwise -----------------------------------------------------------

template <typename T> TensorT<T> relu(const TensorT<T>& x);
template <typename T> TensorT<T> leaky_relu(const TensorT<T>& x, double alpha);
/// Exact erf-form GELU: 0.5 * x * (1 + erf(x / sqrt(2))).
template <typename T> TensorT<T> gelu(const TensorT<T>& x);
/// Normalizes along `axis` (negative counts from the end; default trailing).
template <typename T> TensorT<T> softmax(const TensorT<T>& x, int axis = -1);

/// Elementwise sum. Shapes must match, or b's shape must be a trailing
/// suffix of a's (b is then broadcast over the leading dims).
template <typename T> TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> scale(const TensorT<T>& x, double s);
template <typename T> TensorT<T> sum(const TensorT<T>& x);
template <typename T> TensorT<T> mean(const TensorT<T>& x);

// ---- shape glue ------------------------------------------------------------

template <typename T> TensorT<T> reshape(const TensorT<T>& x, Shape shape);
template <typename T> TensorT<T> flatten(const TensorT<T>& x, int keep_leading = 0);
template <typename T> TensorT<T> permute(const TensorT<T>& x, const std::vector<int>& axes);
template <typename T> TensorT<T> slice(const TensorT<T>& x, int axis, int start, int len);
template <typename T> TensorT<T> concat(const TensorT<T>& a, const TensorT<T>& b, int axis);
/// Stacks n copies of x along a new leading axis; backward sums the copies.
template <typename T> TensorT<T> repeat_leading(const TensorT<T>& x, int n);

// ---- neural network ops ----------------------------------------------------

/// Affine map over the trailing axis: y = x W^T + b, weight (D_out, D_in).
template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& weight,
                  const TensorT<T>& bias);

/// Batched matrix product over equal leading dims: (...,M,K) x (...,K,N).
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b);

/// 2-D convolution, NCHW (or CHW for a single sample), computed as
/// im2col followed by one matrix multiply per sample.
/// weight (C_out, C_in, kH, kW), bias (C_out).
template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& weight,
                  const TensorT<T>& bias, int stride, int padding);

template <typename T>
TensorT<T> maxpool2d(const TensorT<T>& input, int window, int stride,
                     int padding = 0);

/// Averages each channel map to a scalar: (N,C,H,W) -> (N,C), (C,H,W) -> (C).
template <typename T> TensorT<T> global_avg_pool(const TensorT<T>& input);

/// Per trailing-axis slice: zero mean, unit variance, then gamma/beta.
template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma,
                      const TensorT<T>& beta, double eps);

/// Multi-head self-attention over tokens (T,D) or batched (N,T,D):
/// per head softmax(Q K^T / sqrt(D/heads)) V, heads concatenated, then a
/// final D->D projection. qkv_weight (3D, D), proj_weight (D, D).
/// Composed from the primitive ops above, so gradients follow from them.
template <typename T>
TensorT<T> multi_head_attention(const TensorT<T>& tokens, int heads,
                                const TensorT<T>& qkv_weight,
                                const TensorT<T>& qkv_bias,
                                const TensorT<T>& proj_weight,
                                const TensorT<T>& proj_bias,
                                Trace* trace = nullptr);

/// Inverted dropout: in training mode zeroes elements with probability rate
/// and rescales survivors by 1/(1-rate); identity (same tensor) otherwise.
/// The mask is drawn from rng, one draw per element, row-major order.
template <typename T>
TensorT<T> dropout(const TensorT<T>& x, double rate, Rng& rng, bool training);

/// Weighted mean cross-entropy over logits (B,K):
///   loss = sum_i w[y_i] * (logsumexp(z_i) - z_i[y_i]) / sum_i w[y_i]
/// Numerically stabilized by max subtraction. weights must have length K.
template <typename T>
TensorT<T> weighted_cross_entropy(const TensorT<T>& logits,
                                  const std::vector<int>& labels,
                                  const std::vector<double>& weights);

/// Bilinear resample of (C,H,W) or (N,C,H,W) to side x side. Forward only;
/// rejects inputs that require gradients.
template <typename T>
TensorT<T> resize_bilinear(const TensorT<T>& x, int side);

/// Row-wise argmax of (B,K) logits (or a single (K) row).
template <typename T>
std::vector<int> argmax_rows(const TensorT<T>& logits);

} // namespace oshx
