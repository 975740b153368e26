#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "pudnet/tensor.hpp"

// Differentiable primitives. Every op validates shapes, rejects non-finite
// results and, under an active GradTape, records its vector-Jacobian product.
namespace pudnet::ops {

// Linear algebra
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> transpose(const Tensor<T>& a);

// Broadcasting elementwise arithmetic (numpy rules, trailing alignment)
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor);
template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset);

// Pointwise nonlinearities
template <class T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <class T>
Tensor<T> tanh(const Tensor<T>& x);
template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(0.01));
template <class T>
Tensor<T> log(const Tensor<T>& x);

// Structural
template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows);

// Reductions. The axis variants drop the reduced axis.
template <class T>
Tensor<T> sum(const Tensor<T>& x);
template <class T>
Tensor<T> sum(const Tensor<T>& x, std::size_t axis);
template <class T>
Tensor<T> mean(const Tensor<T>& x);
template <class T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis);

// Convolutional building blocks, NCHW layout
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t pad);
/// Non-overlapping k×k average pooling; trailing rows/cols that do not fill a window are dropped.
template <class T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t k);
/// [B,C,H,W] -> [B,C]
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x);
/// Parameter-free per-(sample, channel) standardisation over H×W.
template <class T>
Tensor<T> instance_norm(const Tensor<T>& x, T eps = T(1e-5));

template <class T>
struct BatchNormResult {
  Tensor<T> y;
  std::vector<T> batch_mean;
  std::vector<T> batch_var;  // biased (population) variance
};

/// Batch normalisation over (B,H,W) per channel using batch statistics.
template <class T>
BatchNormResult<T> batch_norm_train(const Tensor<T>& x, const Tensor<T>& gamma,
                                    const Tensor<T>& beta, T eps = T(1e-5));
/// Batch normalisation with fixed running statistics.
template <class T>
Tensor<T> batch_norm_eval(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          std::span<const T> running_mean, std::span<const T> running_var,
                          T eps = T(1e-5));

// Classification primitives; 2-D inputs are [rows, classes].
template <class T>
Tensor<T> softmax(const Tensor<T>& logits);
template <class T>
Tensor<T> log_softmax(const Tensor<T>& logits);
/// Mean over rows of -log softmax(logits)[label].
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> labels);

/// x / (||x|| + eps) along the last axis (1-D or 2-D input).
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x, T eps = T(1e-8));
/// a·b / ((||a||+eps)(||b||+eps)) for two 1-D tensors.
template <class T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b, T eps = T(1e-8));
/// Pairwise cosine similarity of rows: [N,D] × [K,D] -> [N,K].
template <class T>
Tensor<T> cosine_matrix(const Tensor<T>& a, const Tensor<T>& b, T eps = T(1e-8));

/// mean_b sum_c q[b,c] (log q[b,c] - log(p~[b,c] + eps)), where p~ scatters the
/// columns of p into the positions given by `columns` and is zero elsewhere.
/// Terms with q == 0 contribute 0. Both inputs must have rows summing to 1.
template <class T>
Tensor<T> kl_div_padded(const Tensor<T>& q, const Tensor<T>& p,
                        std::span<const std::size_t> columns, T eps = T(1e-8));

}  // namespace pudnet::ops
