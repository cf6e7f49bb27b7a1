#include "smoe/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <type_traits>
#include <string>
#include <vector>

namespace smoe {

namespace {

struct AxisLayout {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisLayout layout_for(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(shape));
  }
  AxisLayout l;
  for (std::size_t i = 0; i < axis; ++i) l.outer *= shape[i];
  l.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) l.inner *= shape[i];
  return l;
}

template <typename T>
void check_logit(T v, const char* op) {
  if (std::isnan(v) || v == std::numeric_limits<T>::infinity()) {
    throw NumericError(std::string(op) + ": invalid logit " + std::to_string(static_cast<double>(v)));
  }
}

}  // namespace

template <typename T>
T logsumexp(std::span<const T> values) {
  if (values.empty()) throw ShapeError("logsumexp: empty axis");
  T hi = -std::numeric_limits<T>::infinity();
  for (T v : values) {
    check_logit(v, "logsumexp");
    hi = std::max(hi, v);
  }
  if (hi == -std::numeric_limits<T>::infinity()) return hi;
  T sum = 0;
  for (T v : values) sum += std::exp(v - hi);
  return hi + std::log(sum);
}

template <typename T>
Tensor<T> stable_softmax(const Tensor<T>& logits, std::size_t axis) {
  const AxisLayout l = layout_for(logits.shape(), axis, "stable_softmax");
  Tensor<T> out(logits.shape());
  const auto in = logits.data();
  auto dst = out.data();
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = o * l.extent * l.inner + i;
      T hi = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < l.extent; ++j) {
        const T v = in[base + j * l.inner];
        check_logit(v, "stable_softmax");
        hi = std::max(hi, v);
      }
      if (hi == -std::numeric_limits<T>::infinity()) {
        throw ShapeError("stable_softmax: fully masked slice");
      }
      T sum = 0;
      for (std::size_t j = 0; j < l.extent; ++j) {
        const T e = std::exp(in[base + j * l.inner] - hi);
        dst[base + j * l.inner] = e;
        sum += e;
      }
      for (std::size_t j = 0; j < l.extent; ++j) dst[base + j * l.inner] /= sum;
    }
  }
  return out;
}

template <typename T>
Tensor<T> logsumexp(const Tensor<T>& logits, std::size_t axis) {
  const AxisLayout l = layout_for(logits.shape(), axis, "logsumexp");
  Shape reduced = logits.shape();
  reduced.erase(reduced.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor<T> out(reduced);
  std::vector<T> slice(l.extent);
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = o * l.extent * l.inner + i;
      for (std::size_t j = 0; j < l.extent; ++j) slice[j] = logits[base + j * l.inner];
      out[o * l.inner + i] = logsumexp(std::span<const T>(slice));
    }
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::isnan(x[i])) throw NumericError("sigmoid: NaN input at flat index " + std::to_string(i));
    out[i] = sigmoid(x[i]);
  }
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  const std::size_t n = a.shape()[a.rank() - 2];
  const std::size_t k = a.shape()[a.rank() - 1];
  const std::size_t kb = b.shape()[b.rank() - 2];
  const std::size_t m = b.shape()[b.rank() - 1];
  if (k != kb) {
    throw ShapeError("matmul: inner extents differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const Shape batch(a.shape().begin(), a.shape().end() - 2);
  const bool shared_b = b.rank() == 2;
  if (!shared_b && Shape(b.shape().begin(), b.shape().end() - 2) != batch) {
    throw ShapeError("matmul: batch extents differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Shape out_shape = batch;
  out_shape.push_back(n);
  out_shape.push_back(m);
  Tensor<T> out(out_shape);
  const std::size_t batches = shape_numel(batch);
  for (std::size_t p = 0; p < batches; ++p) {
    const T* bp = b.data().data() + (shared_b ? 0 : p * k * m);
    kernels::gemm_nn(n, k, m, a.data().data() + p * n * k, bp, out.data().data() + p * n * m,
                     false);
  }
  require_finite(std::span<const T>(out.data()), "matmul");
  return out;
}

template <typename T>
T cross_entropy_from_logits(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                            std::span<const std::uint8_t> mask) {
  if (logits.rank() < 1) throw ShapeError("cross_entropy_from_logits: logits must have rank >= 1");
  const std::size_t vocab = logits.shape().back();
  const std::size_t rows = logits.size() / vocab;
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy_from_logits: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(rows) + " rows");
  }
  if (!mask.empty() && mask.size() != rows) throw ShapeError("cross_entropy_from_logits: mask size");
  double total = 0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw ShapeError("cross_entropy_from_logits: target " + std::to_string(targets[r]) +
                       " outside vocab of " + std::to_string(vocab));
    }
    if (!mask.empty() && mask[r] == 0) continue;
    const std::span<const T> row = logits.data().subspan(r * vocab, vocab);
    total += static_cast<double>(logsumexp(row) - row[static_cast<std::size_t>(targets[r])]);
    ++counted;
  }
  if (counted == 0) throw ShapeError("cross_entropy_from_logits: no counted positions");
  return static_cast<T>(total / static_cast<double>(counted));
}

namespace kernels {

namespace {

// One BLAS thread keeps results independent of the host's core count.
[[maybe_unused]] const bool g_blas_single_thread = [] {
  openblas_set_num_threads(1);
  return true;
}();

inline blasint as_int(std::size_t n) { return static_cast<blasint>(n); }

template <typename T>
void gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, std::size_t n, std::size_t k, std::size_t m,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, bool accumulate) {
  const T beta = accumulate ? T(1) : T(0);
  if constexpr (std::is_same_v<T, float>) {
    cblas_sgemm(CblasRowMajor, ta, tb, as_int(n), as_int(m), as_int(k), 1.0f, a, as_int(lda), b,
                as_int(ldb), beta, c, as_int(m));
  } else {
    cblas_dgemm(CblasRowMajor, ta, tb, as_int(n), as_int(m), as_int(k), 1.0, a, as_int(lda), b,
                as_int(ldb), beta, c, as_int(m));
  }
}

}  // namespace

template <typename T>
void gemm_nn(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c,
             bool accumulate) {
  gemm(CblasNoTrans, CblasNoTrans, n, k, m, a, k, b, m, c, accumulate);
}

template <typename T>
void gemm_nt(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c,
             bool accumulate) {
  gemm(CblasNoTrans, CblasTrans, n, k, m, a, k, b, k, c, accumulate);
}

template <typename T>
void gemm_tn(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c,
             bool accumulate) {
  // c is (k x m) = a^T (k x n) * b (n x m)
  gemm(CblasTrans, CblasNoTrans, k, n, m, a, k, b, m, c, accumulate);
}

template void gemm_nn<float>(std::size_t, std::size_t, std::size_t, const float*, const float*,
                             float*, bool);
template void gemm_nn<double>(std::size_t, std::size_t, std::size_t, const double*,
                              const double*, double*, bool);
template void gemm_nt<float>(std::size_t, std::size_t, std::size_t, const float*, const float*,
                             float*, bool);
template void gemm_nt<double>(std::size_t, std::size_t, std::size_t, const double*,
                              const double*, double*, bool);
template void gemm_tn<float>(std::size_t, std::size_t, std::size_t, const float*, const float*,
                             float*, bool);
template void gemm_tn<double>(std::size_t, std::size_t, std::size_t, const double*,
                              const double*, double*, bool);

}  // namespace kernels

#define SMOE_INSTANTIATE_OPS(T)                                                              \
  template T logsumexp<T>(std::span<const T>);                                               \
  template Tensor<T> stable_softmax<T>(const Tensor<T>&, std::size_t);                       \
  template Tensor<T> logsumexp<T>(const Tensor<T>&, std::size_t);                            \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                           \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                          \
  template T cross_entropy_from_logits<T>(const Tensor<T>&, std::span<const std::int32_t>,   \
                                          std::span<const std::uint8_t>);

SMOE_INSTANTIATE_OPS(float)
SMOE_INSTANTIATE_OPS(double)

#undef SMOE_INSTANTIATE_OPS

}  // namespace smoe
