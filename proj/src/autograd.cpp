#include "smoe/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "smoe/ops.hpp"

namespace smoe {

template <typename T>
Var Tape<T>::push(Tensor<T> value, bool requires_grad, std::string_view op) {
  if (backward_done_) throw std::logic_error("Tape: cannot record after backward without reset");
  require_finite(std::span<const T>(value.data()), op);
  if (nodes_.size() >= UINT32_MAX - 1) throw std::length_error("Tape: too many nodes");
  nodes_.push_back(Node{std::move(value), Tensor<T>(), requires_grad, false});
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Tensor<T>& Tape<T>::grad_ref(Var v) {
  Node& n = node(v);
  if (!n.has_grad) {
    n.grad = Tensor<T>(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var loss) {
  if (backward_done_) throw std::logic_error("Tape: backward called twice without reset");
  Node& root = node(loss);
  if (root.value.size() != 1) {
    throw ShapeError("Tape::backward: loss must be a scalar, got shape " +
                     shape_str(root.value.shape()));
  }
  backward_done_ = true;
  if (!root.requires_grad) return;
  grad_ref(loss)[0] = T(1);
  for (auto it = closures_.rbegin(); it != closures_.rend(); ++it) (*it)(*this);
}

template <typename T>
void Tape<T>::reset() {
  nodes_.clear();
  closures_.clear();
  backward_done_ = false;
}

template class Tape<float>;
template class Tape<double>;

namespace ag {

namespace {

template <typename T>
void require_same_shape(const Tape<T>& tape, Var a, Var b, const char* op) {
  if (!tape.value(a).same_shape(tape.value(b))) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(tape.value(a).shape()) + " and " +
                     shape_str(tape.value(b).shape()) + " differ");
  }
}

template <typename T>
std::pair<std::size_t, std::size_t> matrix_dims(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
  return {t.shape()[0], t.shape()[1]};
}

}  // namespace

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  require_same_shape(tape, a, b, "add");
  Tensor<T> out = tape.value(a);
  const auto bv = tape.value(b).data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const bool rg = tape.any_requires_grad({a, b});
  Var y = tape.push(std::move(out), rg, "add");
  if (rg) {
    tape.on_backward([a, b, y](Tape<T>& t) {
      if (!t.has_grad(y)) return;
      const auto gy = t.grad_ref(y).data();
      for (Var in : {a, b}) {
        if (!t.requires_grad(in)) continue;
        auto g = t.grad_ref(in).data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
      }
    });
  }
  return y;
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
  require_same_shape(tape, a, b, "mul");
  Tensor<T> out = tape.value(a);
  const auto bv = tape.value(b).data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const bool rg = tape.any_requires_grad({a, b});
  Var y = tape.push(std::move(out), rg, "mul");
  if (rg) {
    tape.on_backward([a, b, y](Tape<T>& t) {
      if (!t.has_grad(y)) return;
      const auto gy = t.grad_ref(y).data();
      if (t.requires_grad(a)) {
        auto g = t.grad_ref(a).data();
        const auto other = t.value(b).data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * other[i];
      }
      if (t.requires_grad(b)) {
        auto g = t.grad_ref(b).data();
        const auto other = t.value(a).data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * other[i];
      }
    });
  }
  return y;
}

template <typename T>
Var scale(Tape<T>& tape, Var a, T factor) {
  Tensor<T> out = tape.value(a);
  for (auto& x : out.data()) x *= factor;
  const bool rg = tape.requires_grad(a);
  Var y = tape.push(std::move(out), rg, "scale");
  if (rg) {
    tape.on_backward([a, y, factor](Tape<T>& t) {
      if (!t.has_grad(y)) return;
      const auto gy = t.grad_ref(y).data();
      auto g = t.grad_ref(a).data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * factor;
    });
  }
  return y;
}

template <typename T>
Var sum(Tape<T>& tape, Var a) {
  T total = 0;
  for (T x : tape.value(a).data()) total += x;
  const bool rg = tape.requires_grad(a);
  Var y = tape.push(Tensor<T>::scalar(total), rg, "sum");
  if (rg) {
    tape.on_backward([a, y](Tape<T>& t) {
      if (!t.has_grad(y)) return;
      const T gy = t.grad(y)[0];
      for (auto& g : t.grad_ref(a).data()) g += gy;
    });
  }
  return y;
}

template <typename T>
Var matmul(Tape<T>& tape, Var a, Var b) {
  const auto [n, k] = matrix_dims(tape.value(a), "matmul");
  const auto [kb, m] = matrix_dims(tape.value(b), "matmul");
  if (k != kb) {
    throw ShapeError("matmul: inner extents differ: " + shape_str(tape.value(a).shape()) + " x " +
                     shape_str(tape.value(b).shape()));
  }
  Tensor<T> out({n, m});
  kernels::gemm_nn(n, k, m, tape.value(a).data().data(), tape.value(b).data().data(),
                   out.data().data(), false);
  const bool rg = tape.any_requires_grad({a, b});
  Var y = tape.push(std::move(out), rg, "matmul");
  if (rg) {
    tape.on_backward([a, b, y, n = n, k = k, m = m](Tape<T>& t) {
      if (!t.has_grad(y)) return;
      const T* gy = t.grad_ref(y).data().data();
      if (t.requires_grad(a)) {
        kernels::gemm_nt(n, m, k, gy, t.value(b).data().data(), t.grad_ref(a).data().data(), true);
      }
      if (t.requires_grad(b)) {
        kernels::gemm_tn(n, k, m, t.value(a).data().data(), gy, t.grad_ref(b).data().data(), true);
      }
    });
  }
  return y;
}

template <typename T>
Var embedding(Tape<T>& tape, Var table, std::span<const std::int32_t> ids) {
  const auto [rows, d] = matrix_dims(tape.value(table), "embedding");
  Tensor<T> out({ids.size(), d});
  const auto tv = tape.value(table).data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw ShapeError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(rows) + " rows");
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  const bool rg = tape.requires_grad(table);
  Var y = tape.push(std::move(out), rg, "embedding");
  if (rg) {
    tape.on_backward([table, y, idv = std::vector<std::int32_t>(ids.begin(), ids.end()),
                      d = d](Tape<T>& t) {
      if (!t.has_grad(y)) return;
      const auto gy = t.grad_ref(y).data();
      auto g = t.grad_ref(table).data();
      for (std::size_t i = 0; i < idv.size(); ++i) {
        const std::size_t r = static_cast<std::size_t>(idv[i]);
        for (std::size_t j = 0; j < d; ++j) g[r * d + j] += gy[i * d + j];
      }
    });
  }
  return y;
}

template <typename T>
Var rmsnorm(Tape<T>& tape, Var x, Var gain, T eps) {
  const auto [n, d] = matrix_dims(tape.value(x), "rmsnorm");
  if (tape.value(gain).shape() != Shape{d}) throw ShapeError("rmsnorm: gain must have shape (d)");
  const auto xv = tape.value(x).data();
  const auto gv = tape.value(gain).data();
  Tensor<T> out({n, d});
  std::vector<T> inv_rms(n);
  for (std::size_t i = 0; i < n; ++i) {
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += xv[i * d + j] * xv[i * d + j];
    inv_rms[i] = T(1) / std::sqrt(ss / static_cast<T>(d) + eps);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] * inv_rms[i] * gv[j];
  }
  const bool rg = tape.any_requires_grad({x, gain});
  Var y = tape.push(std::move(out), rg, "rmsnorm");
  if (rg) {
    tape.on_backward([x, gain, y, n = n, d = d, inv_rms = std::move(inv_rms)](Tape<T>& t) {
      if (!t.has_grad(y)) return;
      const auto gy = t.grad_ref(y).data();
      const auto xv = t.value(x).data();
      const auto gv = t.value(gain).data();
      if (t.requires_grad(gain)) {
        auto gg = t.grad_ref(gain).data();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) gg[j] += gy[i * d + j] * xv[i * d + j] * inv_rms[i];
      }
      if (t.requires_grad(x)) {
        auto gx = t.grad_ref(x).data();
        for (std::size_t i = 0; i < n; ++i) {
          const T r = inv_rms[i];
          T dot = 0;
          for (std::size_t j = 0; j < d; ++j) dot += gy[i * d + j] * gv[j] * xv[i * d + j];
          const T coef = dot * r * r * r / static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j)
            gx[i * d + j] += gy[i * d + j] * gv[j] * r - coef * xv[i * d + j];
        }
      }
    });
  }
  return y;
}

template <typename T>
Var gelu(Tape<T>& tape, Var x) {
  const T inv_sqrt2 = static_cast<T>(1.0 / std::numbers::sqrt2);
  Tensor<T> out = tape.value(x);
  for (auto& v : out.data()) v = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  const bool rg = tape.requires_grad(x);
  Var y = tape.push(std::move(out), rg, "gelu");
  if (rg) {
    tape.on_backward([x, y, inv_sqrt2](Tape<T>& t) {
      if (!t.has_grad(y)) return;
      const T inv_sqrt_2pi = static_cast<T>(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
      const auto gy = t.grad_ref(y).data();
      const auto xv = t.value(x).data();
      auto g = t.grad_ref(x).data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = xv[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
        g[i] += gy[i] * (cdf + v * pdf);
      }
    });
  }
  return y;
}

template <typename T>
Var sigmoid(Tape<T>& tape, Var x) {
  Tensor<T> out = smoe::sigmoid(tape.value(x));
  const bool rg = tape.requires_grad(x);
  Var y = tape.push(std::move(out), rg, "sigmoid");
  if (rg) {
    tape.on_backward([x, y](Tape<T>& t) {
      if (!t.has_grad(y)) return;
      const auto gy = t.grad_ref(y).data();
      const auto s = t.value(y).data();
      auto g = t.grad_ref(x).data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * s[i] * (T(1) - s[i]);
    });
  }
  return y;
}

template <typename T>
Var column_mean(Tape<T>& tape, Var x) {
  const auto [n, c] = matrix_dims(tape.value(x), "column_mean");
  const auto xv = tape.value(x).data();
  Tensor<T> out({c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += xv[i * c + j];
  for (auto& v : out.data()) v /= static_cast<T>(n);
  const bool rg = tape.requires_grad(x);
  Var y = tape.push(std::move(out), rg, "column_mean");
  if (rg) {
    tape.on_backward([x, y, n = n, c = c](Tape<T>& t) {
      if (!t.has_grad(y)) return;
      const auto gy = t.grad_ref(y).data();
      auto g = t.grad_ref(x).data();
      const T inv = T(1) / static_cast<T>(n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += gy[j] * inv;
    });
  }
  return y;
}

template <typename T>
Var cross_entropy(Tape<T>& tape, Var logits, std::span<const std::int32_t> targets,
                  std::span<const std::uint8_t> mask) {
  const auto [n, vocab] = matrix_dims(tape.value(logits), "cross_entropy");
  const T loss = cross_entropy_from_logits(tape.value(logits), targets, mask);
  const bool rg = tape.requires_grad(logits);
  Var y = tape.push(Tensor<T>::scalar(loss), rg, "cross_entropy");
  if (rg) {
    tape.on_backward([logits, y, n = n, vocab = vocab,
                      tv = std::vector<std::int32_t>(targets.begin(), targets.end()),
                      mv = std::vector<std::uint8_t>(mask.begin(), mask.end())](Tape<T>& t) {
      if (!t.has_grad(y)) return;
      std::size_t counted = 0;
      for (std::size_t r = 0; r < n; ++r) counted += (mv.empty() || mv[r]) ? 1 : 0;
      const T gy = t.grad(y)[0] / static_cast<T>(counted);
      const auto lv = t.value(logits).data();
      auto g = t.grad_ref(logits).data();
      for (std::size_t r = 0; r < n; ++r) {
        if (!mv.empty() && !mv[r]) continue;
        const auto row = lv.subspan(r * vocab, vocab);
        const T lse = smoe::logsumexp(row);
        for (std::size_t j = 0; j < vocab; ++j) g[r * vocab + j] += gy * std::exp(row[j] - lse);
        g[r * vocab + static_cast<std::size_t>(tv[r])] -= gy;
      }
    });
  }
  return y;
}

#define SMOE_INSTANTIATE_AG(T)                                                             \
  template Var add<T>(Tape<T>&, Var, Var);                                                 \
  template Var mul<T>(Tape<T>&, Var, Var);                                                 \
  template Var scale<T>(Tape<T>&, Var, T);                                                 \
  template Var sum<T>(Tape<T>&, Var);                                                      \
  template Var matmul<T>(Tape<T>&, Var, Var);                                              \
  template Var embedding<T>(Tape<T>&, Var, std::span<const std::int32_t>);                 \
  template Var rmsnorm<T>(Tape<T>&, Var, Var, T);                                          \
  template Var gelu<T>(Tape<T>&, Var);                                                     \
  template Var sigmoid<T>(Tape<T>&, Var);                                                  \
  template Var column_mean<T>(Tape<T>&, Var);                                              \
  template Var cross_entropy<T>(Tape<T>&, Var, std::span<const std::int32_t>,              \
                                std::span<const std::uint8_t>);

SMOE_INSTANTIATE_AG(float)
SMOE_INSTANTIATE_AG(double)

#undef SMOE_INSTANTIATE_AG

}  // namespace ag

Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>& f,
                                const Tensor<double>& x, double h) {
  if (!(h > 0)) throw ShapeError("finite_diff_grad: step must be positive");
  Tensor<double> grad(x.shape());
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_diff_grad: non-finite objective at coordinate " + std::to_string(i));
    }
    grad[i] = (up - down) / (2 * h);
  }
  return grad;
}

double max_relative_error(std::span<const double> a, std::span<const double> b, double floor) {
  if (a.size() != b.size()) throw ShapeError("max_relative_error: size mismatch");
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace smoe
