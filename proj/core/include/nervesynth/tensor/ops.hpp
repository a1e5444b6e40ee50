#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "nervesynth/tensor/tensor.hpp"

namespace nervesynth {

// Clamp applied to column norms so that a zero column never divides by zero.
inline constexpr double kNormEpsilon = 1e-8;

// Broadcasting rule for binary elementwise ops: `b` must have the same shape
// as `a`, a shape equal to a trailing suffix of `a`'s shape, or one element.
// The result always has `a`'s shape. Anything else is a DimensionError.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor silu(const Tensor& a);
// tanh approximation.
Tensor gelu(const Tensor& a);

// [m x k] . [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);
// x . w^T + bias for x [n x k], w [d x k], bias [d] (optional).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});
Tensor transpose(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axis(const Tensor& a, std::size_t axis);
Tensor mean_axis(const Tensor& a, std::size_t axis);

// Entry j = max(sqrt(sum_i w[i,j]^2), eps). Clamped entries pass no gradient.
Tensor column_norms(const Tensor& w, double eps = kNormEpsilon);

// Over the last axis.
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Mean negative log-likelihood of `labels` under row-wise softmax of logits [n x c].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

// sum(weight * (pred - target)^2) / sum(weight); target and weight are constants.
Tensor weighted_mse(const Tensor& pred, const Tensor& target, const Tensor& weight);

Tensor reshape(const Tensor& a, Shape shape);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
inline Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

// out.flat[i] = a.flat[index[i]]; gradients scatter-add back.
Tensor gather(const Tensor& a, std::span<const std::size_t> index, Shape out_shape);
// Rows of table [v x d] selected by ids -> [ids.size() x d].
Tensor embedding(const Tensor& table, std::span<const int> ids);

// x [b x c x h x w], w [o x c x kh x kw], bias [o] (optional).
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t padding);
Tensor upsample_nearest(const Tensor& x, std::size_t factor);

// Scaled dot-product attention over independent sequences.
//
// q, k, v are [n_seq * seq_len x d] with rows grouped by sequence; d is split
// into n_heads contiguous column blocks. When `probs` is non-null it receives
// the attention matrices laid out [n_seq][n_heads][seq_len][seq_len].
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::size_t seq_len, std::size_t n_heads,
                            std::vector<double>* probs = nullptr);

}  // namespace nervesynth
