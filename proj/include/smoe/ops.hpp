#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>

#include "smoe/tensor.hpp"

namespace smoe {

/// Numerically stable logistic function; saturates without overflow.
template <typename T>
inline T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

/// log(sum(exp(values))) with max-shift. Empty input is an error; an all -inf
/// input yields -inf.
template <typename T>
T logsumexp(std::span<const T> values);

/// log(exp(a) + exp(b)) for scalars, tolerating -inf on either side.
template <typename T>
inline T logaddexp(T a, T b) {
  const T hi = a > b ? a : b;
  if (hi == -std::numeric_limits<T>::infinity()) return hi;
  const T lo = a > b ? b : a;
  return hi + std::log1p(std::exp(lo - hi));
}

/// Softmax along `axis`. Entries equal to -inf are treated as masked and get
/// weight 0; NaN or +inf input, or a fully masked slice, is an error.
template <typename T>
Tensor<T> stable_softmax(const Tensor<T>& logits, std::size_t axis);

/// Reduces `axis` away.
template <typename T>
Tensor<T> logsumexp(const Tensor<T>& logits, std::size_t axis);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

/// Row-major product over the last two axes. `b` is either rank 2 (shared)
/// or has the same leading batch extents as `a`.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Mean negative log-likelihood in nats. `logits` is (..., V) with the
/// leading extents flattened to one row per target. `mask`, when given,
/// selects which rows count (non-zero = counted).
template <typename T>
T cross_entropy_from_logits(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                            std::span<const std::uint8_t> mask = {});

namespace kernels {

// C (n x m) (+)= A (n x k) * B (k x m)
template <typename T>
void gemm_nn(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c,
             bool accumulate);

// C (n x m) (+)= A (n x k) * B^T, where B is (m x k)
template <typename T>
void gemm_nt(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c,
             bool accumulate);

// C (k x m) (+)= A^T * B, where A is (n x k) and B is (n x m)
template <typename T>
void gemm_tn(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c,
             bool accumulate);

}  // namespace kernels

}  // namespace smoe
