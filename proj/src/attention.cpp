#include "smoe/attention.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "smoe/ops.hpp"

namespace smoe {

namespace {

constexpr std::size_t kKeyBlock = kFusedKeyBlock;

thread_local std::size_t g_buffer_peak = 0;

void note_buffer(std::size_t elements) { g_buffer_peak = std::max(g_buffer_peak, elements); }

template <typename T>
constexpr T neg_inf() {
  return -std::numeric_limits<T>::infinity();
}

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
std::size_t require_matrix(const Tensor<T>& t, const char* op, const char* name) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": " + name + " must be a matrix, got " + shape_str(t.shape()));
  }
  return t.shape()[0];
}

template <typename T>
void require_causal_square(const Tensor<T>& z, const char* op) {
  if (z.rank() != 2 || z.shape()[0] != z.shape()[1]) {
    throw ShapeError(std::string(op) + ": expected a square logit matrix, got " + shape_str(z.shape()));
  }
}

}  // namespace

std::size_t attention_buffer_peak() { return g_buffer_peak; }
void reset_attention_buffer_peak() { g_buffer_peak = 0; }

std::string_view to_string(AttentionVariant variant) {
  switch (variant) {
    case AttentionVariant::Vanilla: return "vanilla";
    case AttentionVariant::Sink: return "sink";
    case AttentionVariant::Gated: return "gated";
  }
  return "unknown";
}

AttentionVariant parse_variant(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "vanilla") return AttentionVariant::Vanilla;
  if (lower == "sink") return AttentionVariant::Sink;
  if (lower == "gated") return AttentionVariant::Gated;
  throw std::invalid_argument("unknown attention variant '" + std::string(name) +
                              "' (expected vanilla, sink or gated)");
}

void AttentionShape::validate() const {
  if (batch == 0 || seq == 0 || heads == 0 || head_dim == 0) {
    throw ShapeError("AttentionShape: all extents must be >= 1");
  }
}

template <typename T>
void AttentionVariantParams<T>::validate() const {
  if (n_heads == 0) throw ShapeError("AttentionVariantParams: n_heads must be >= 1");
  if (w_q.rank() != 2) throw ShapeError("AttentionVariantParams: W_Q must be a matrix");
  const std::size_t d = w_q.extent(0);
  if (d % n_heads != 0) {
    throw ShapeError("AttentionVariantParams: d_model " + std::to_string(d) +
                     " not divisible by " + std::to_string(n_heads) + " heads");
  }
  const Shape proj{d, d};
  if (w_q.shape() != proj || w_k.shape() != proj || w_v.shape() != proj || w_o.shape() != proj) {
    throw ShapeError("AttentionVariantParams: projections must all be d_model x d_model");
  }
  if (sink.has_value() != (variant == AttentionVariant::Sink)) {
    throw ShapeError("AttentionVariantParams: sink present iff variant is Sink");
  }
  if (w_theta.has_value() != (variant == AttentionVariant::Gated)) {
    throw ShapeError("AttentionVariantParams: W_theta present iff variant is Gated");
  }
  if (sink && sink->shape() != Shape{n_heads}) throw ShapeError("AttentionVariantParams: sink must be (H)");
  if (w_theta && w_theta->shape() != Shape{d, n_heads}) {
    throw ShapeError("AttentionVariantParams: W_theta must be d_model x H");
  }
}

template <typename T>
AttentionVariantParams<T> AttentionVariantParams<T>::init(AttentionVariant variant,
                                                          std::size_t d_model, std::size_t n_heads,
                                                          std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 0.02);
  auto draw = [&](Shape shape) {
    Tensor<T> t(std::move(shape));
    for (auto& x : t.data()) x = static_cast<T>(normal(rng));
    return t;
  };
  AttentionVariantParams p;
  p.variant = variant;
  p.n_heads = n_heads;
  p.w_q = draw({d_model, d_model});
  p.w_k = draw({d_model, d_model});
  p.w_v = draw({d_model, d_model});
  p.w_o = draw({d_model, d_model});
  if (variant == AttentionVariant::Sink) p.sink = Tensor<T>({n_heads});
  if (variant == AttentionVariant::Gated) p.w_theta = draw({d_model, n_heads});
  p.validate();
  return p;
}

// ---------------------------------------------------------------------------
// Eager single-head operations

template <typename T>
Tensor<T> scaled_logits(const Tensor<T>& q, const Tensor<T>& k, double d_h) {
  if (!(d_h > 0)) throw ShapeError("scaled_logits: d_h must be positive");
  const std::size_t n = require_matrix(q, "scaled_logits", "q");
  require_matrix(k, "scaled_logits", "k");
  if (k.shape() != q.shape()) {
    throw ShapeError("scaled_logits: q " + shape_str(q.shape()) + " and k " + shape_str(k.shape()) +
                     " must share positions and head dimension");
  }
  const std::size_t dim = q.shape()[1];
  const T inv = static_cast<T>(1.0 / std::sqrt(d_h));
  note_buffer(n * n);
  Tensor<T> z({n, n}, neg_inf<T>());
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t j = 0; j <= t; ++j) {
      z[t * n + j] = dot(q.data().data() + t * dim, k.data().data() + j * dim, dim) * inv;
    }
    require_finite(std::span<const T>(z.data().subspan(t * n, t + 1)), "scaled_logits");
  }
  return z;
}

template <typename T>
Tensor<T> vanilla_weights(const Tensor<T>& z) {
  require_causal_square(z, "vanilla_weights");
  note_buffer(z.size());
  return stable_softmax(z, 1);
}

template <typename T>
SinkSoftmax<T> sink_softmax(const Tensor<T>& z, T sink) {
  require_causal_square(z, "sink_softmax");
  if (std::isnan(sink)) throw NumericError("sink_softmax: NaN sink");
  const std::size_t n = z.shape()[0];
  note_buffer(n * n);
  SinkSoftmax<T> r{Tensor<T>({n, n}), Tensor<T>({n})};
  for (std::size_t t = 0; t < n; ++t) {
    const auto row = z.data().subspan(t * n, n);
    T hi = sink;
    bool any = false;
    for (T v : row) {
      if (std::isnan(v) || v == std::numeric_limits<T>::infinity()) {
        throw NumericError("sink_softmax: invalid logit in row " + std::to_string(t));
      }
      if (v != neg_inf<T>()) any = true;
      hi = std::max(hi, v);
    }
    if (!any) throw ShapeError("sink_softmax: fully masked row " + std::to_string(t));
    T denom = std::exp(sink - hi);
    for (std::size_t j = 0; j < n; ++j) {
      const T e = std::exp(row[j] - hi);
      r.token_weights[t * n + j] = e;
      denom += e;
    }
    for (std::size_t j = 0; j < n; ++j) r.token_weights[t * n + j] /= denom;
    r.sink_weight[t] = std::exp(sink - hi) / denom;
  }
  return r;
}

template <typename T>
Tensor<T> gated_gate(const Tensor<T>& x, const Tensor<T>& w_theta) {
  require_matrix(x, "gated_gate", "x");
  require_matrix(w_theta, "gated_gate", "W_theta");
  if (x.shape()[1] != w_theta.shape()[0]) {
    throw ShapeError("gated_gate: x " + shape_str(x.shape()) + " incompatible with W_theta " +
                     shape_str(w_theta.shape()));
  }
  return sigmoid(matmul(x, w_theta));
}

template <typename T>
Tensor<T> head_output(const Tensor<T>& weights, const Tensor<T>& v) {
  require_matrix(weights, "head_output", "weights");
  require_matrix(v, "head_output", "v");
  if (weights.shape()[1] != v.shape()[0]) {
    throw ShapeError("head_output: weights " + shape_str(weights.shape()) + " do not match " +
                     std::to_string(v.shape()[0]) + " values");
  }
  return matmul(weights, v);
}

template <typename T>
Tensor<T> implicit_gate_from_weights(const EagerHeadRecord<T>& record) {
  switch (record.variant) {
    case AttentionVariant::Vanilla: {
      const std::size_t n = require_matrix(record.weights, "implicit_gate_from_weights", "weights");
      const std::size_t cols = record.weights.shape()[1];
      Tensor<T> g({n});
      for (std::size_t t = 0; t < n; ++t) g[t] = T(1) - record.weights[t * cols];
      return g;
    }
    case AttentionVariant::Sink: {
      if (!record.sink_weight) {
        throw ShapeError("implicit_gate_from_weights: Sink record lacks sink weights");
      }
      Tensor<T> g = *record.sink_weight;
      for (auto& x : g.data()) x = T(1) - x;
      return g;
    }
    case AttentionVariant::Gated: break;
  }
  throw ShapeError("implicit_gate_from_weights: Gated attention has an explicit gate");
}

template <typename T>
Tensor<T> implicit_gate_lse_vanilla(const Tensor<T>& lse_excl0, const Tensor<T>& z0) {
  if (!lse_excl0.same_shape(z0)) throw ShapeError("implicit_gate_lse_vanilla: shape mismatch");
  Tensor<T> g(lse_excl0.shape());
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (lse_excl0[i] == neg_inf<T>()) {
      throw ShapeError("implicit_gate_lse_vanilla: no non-sink positions at index " +
                       std::to_string(i) + " (t = 0)");
    }
    if (!std::isfinite(lse_excl0[i]) || !std::isfinite(z0[i])) {
      throw NumericError("implicit_gate_lse_vanilla: non-finite input");
    }
    g[i] = sigmoid(lse_excl0[i] - z0[i]);
  }
  return g;
}

template <typename T>
Tensor<T> lse_excluding_first(const Tensor<T>& z) {
  require_causal_square(z, "lse_excluding_first");
  const std::size_t n = z.shape()[0];
  Tensor<T> out({n}, neg_inf<T>());
  for (std::size_t t = 1; t < n; ++t) out[t] = logsumexp(z.data().subspan(t * n + 1, t));
  return out;
}

template <typename T>
Tensor<T> lse_tokens(const Tensor<T>& z) {
  require_causal_square(z, "lse_tokens");
  const std::size_t n = z.shape()[0];
  Tensor<T> out({n});
  for (std::size_t t = 0; t < n; ++t) out[t] = logsumexp(z.data().subspan(t * n, t + 1));
  return out;
}

template <typename T>
Tensor<T> implicit_gate_lse_sink(const Tensor<T>& lse, T sink) {
  Tensor<T> g(lse.shape());
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!std::isfinite(lse[i]) || std::isnan(sink)) {
      throw NumericError("implicit_gate_lse_sink: non-finite input");
    }
    g[i] = sigmoid(lse[i] - sink);
  }
  return g;
}

template <typename T>
Tensor<T> renormalized_weights(const Tensor<T>& weights, const Tensor<T>& sink_weight) {
  const std::size_t n = require_matrix(weights, "renormalized_weights", "weights");
  const std::size_t cols = weights.shape()[1];
  if (sink_weight.shape() != Shape{n}) throw ShapeError("renormalized_weights: need one sink weight per row");
  Tensor<T> out = weights;
  for (std::size_t t = 0; t < n; ++t) {
    if (!(sink_weight[t] < T(1) - static_cast<T>(1e-12))) {
      throw ShapeError("renormalized_weights: row " + std::to_string(t) +
                       " puts all mass on the sink");
    }
    const T keep = T(1) - sink_weight[t];
    for (std::size_t j = 0; j < cols; ++j) out[t * cols + j] /= keep;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fused kernel

namespace {

template <typename T>
void check_fused_inputs(SinkSlot slot, const AttentionShape& shape, std::size_t q, std::size_t k,
                        std::size_t v, std::size_t sink, std::size_t zero) {
  shape.validate();
  const std::size_t expect = shape.rows() * shape.width();
  if (q != expect || k != expect || v != expect) {
    throw ShapeError("fused attention: q/k/v must each hold rows * heads * head_dim = " +
                     std::to_string(expect) + " values");
  }
  if (slot == SinkSlot::Learned && sink != shape.heads) {
    throw ShapeError("fused attention: learned sink needs one logit per head");
  }
  if (zero != 0 && (zero != shape.heads || slot != SinkSlot::FirstToken)) {
    throw ShapeError("fused attention: first-value zeroing takes one flag per head (Vanilla only)");
  }
}

}  // namespace

template <typename T>
FusedAttention<T> fused_attention_forward(SinkSlot slot, const AttentionShape& shape,
                                          std::span<const T> q, std::span<const T> k,
                                          std::span<const T> v, std::span<const T> sink,
                                          std::span<const std::uint8_t> zero_first_value) {
  check_fused_inputs<T>(slot, shape, q.size(), k.size(), v.size(), sink.size(),
                        zero_first_value.size());
  const std::size_t S = shape.seq, H = shape.heads, dh = shape.head_dim;
  const std::size_t N = shape.rows(), D = shape.width();
  FusedAttention<T> r{Tensor<T>({N, D}), Tensor<T>({N, H}), Tensor<T>({N, H}),
                      Tensor<T>({N, H}), Tensor<T>({N, H}), Tensor<T>({N, D})};
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  const std::size_t first = slot == SinkSlot::FirstToken ? 1 : 0;

  std::array<T, kKeyBlock> block{};
  note_buffer(kKeyBlock);
  std::vector<T> acc(dh);

  for (std::size_t b = 0; b < shape.batch; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < S; ++t) {
        const std::size_t n = b * S + t;
        const T* qrow = q.data() + n * D + h * dh;
        T m = neg_inf<T>();
        T l = 0;
        std::fill(acc.begin(), acc.end(), T(0));
        for (std::size_t j0 = first; j0 <= t; j0 += kKeyBlock) {
          const std::size_t j1 = std::min(t + 1, j0 + kKeyBlock);
          T bm = neg_inf<T>();
          for (std::size_t j = j0; j < j1; ++j) {
            const T z = scale * dot(qrow, k.data() + (b * S + j) * D + h * dh, dh);
            block[j - j0] = z;
            bm = std::max(bm, z);
          }
          const T mn = std::max(m, bm);
          if (m != neg_inf<T>() && mn > m) {
            const T f = std::exp(m - mn);
            l *= f;
            for (auto& a : acc) a *= f;
          }
          for (std::size_t j = j0; j < j1; ++j) {
            const T e = std::exp(block[j - j0] - mn);
            l += e;
            const T* vrow = v.data() + (b * S + j) * D + h * dh;
            for (std::size_t i = 0; i < dh; ++i) acc[i] += e * vrow[i];
          }
          m = mn;
        }
        const bool has_tail = t + 1 > first;
        const T lse_tail = has_tail ? m + std::log(l) : neg_inf<T>();
        T* tail = r.tail_out.data().data() + n * D + h * dh;
        if (has_tail)
          for (std::size_t i = 0; i < dh; ++i) tail[i] = acc[i] / l;

        T gate = 1;
        T sink_w = 0;
        T lse = lse_tail;
        T* out = r.out.data().data() + n * D + h * dh;
        switch (slot) {
          case SinkSlot::FirstToken: {
            const T s = scale * dot(qrow, k.data() + (b * S) * D + h * dh, dh);
            if (has_tail) {
              gate = sigmoid(lse_tail - s);
              sink_w = sigmoid(s - lse_tail);
            } else {
              gate = 0;
              sink_w = 1;
            }
            lse = logaddexp(s, lse_tail);
            const bool zeroed = !zero_first_value.empty() && zero_first_value[h] != 0;
            const T* v0 = v.data() + (b * S) * D + h * dh;
            for (std::size_t i = 0; i < dh; ++i) {
              out[i] = zeroed ? gate * tail[i] : sink_w * v0[i] + gate * tail[i];
            }
            break;
          }
          case SinkSlot::Learned: {
            const T s = sink[h];
            gate = sigmoid(lse_tail - s);
            sink_w = sigmoid(s - lse_tail);
            for (std::size_t i = 0; i < dh; ++i) out[i] = gate * tail[i];
            break;
          }
          case SinkSlot::None:
            for (std::size_t i = 0; i < dh; ++i) out[i] = tail[i];
            break;
        }
        r.gate[n * H + h] = gate;
        r.sink_weight[n * H + h] = sink_w;
        r.lse[n * H + h] = lse;
        r.lse_tail[n * H + h] = lse_tail;
      }
    }
  }
  require_finite(std::span<const T>(r.out.data()), "fused_attention_forward");
  return r;
}

template <typename T>
void fused_attention_backward(SinkSlot slot, const AttentionShape& shape, std::span<const T> q,
                              std::span<const T> k, std::span<const T> v,
                              std::span<const T> sink, std::span<const std::uint8_t> zero_first_value,
                              const FusedAttention<T>& saved, std::span<const T> d_out,
                              std::span<const T> d_gate, FusedAttentionGrads<T> grads) {
  check_fused_inputs<T>(slot, shape, q.size(), k.size(), v.size(), sink.size(),
                        zero_first_value.size());
  const std::size_t S = shape.seq, H = shape.heads, dh = shape.head_dim;
  const std::size_t N = shape.rows(), D = shape.width();
  if (d_out.size() != N * D) throw ShapeError("fused_attention_backward: d_out size");
  if (!d_gate.empty() && d_gate.size() != N * H) throw ShapeError("fused_attention_backward: d_gate size");
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  const std::size_t first = slot == SinkSlot::FirstToken ? 1 : 0;
  const bool want_q = !grads.dq.empty(), want_k = !grads.dk.empty(), want_v = !grads.dv.empty();
  std::vector<T> d_tail(dh);

  for (std::size_t b = 0; b < shape.batch; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < S; ++t) {
        const std::size_t n = b * S + t;
        const std::size_t col = h * dh;
        const T* qrow = q.data() + n * D + col;
        const T* dout = d_out.data() + n * D + col;
        const T* tail = saved.tail_out.data().data() + n * D + col;
        const T gate = saved.gate[n * H + h];
        const T sink_w = saved.sink_weight[n * H + h];
        const T lse_tail = saved.lse_tail[n * H + h];
        const bool zeroed = !zero_first_value.empty() && zero_first_value[h] != 0;
        const T* v0 = (slot == SinkSlot::FirstToken && !zeroed) ? v.data() + (b * S) * D + col : nullptr;

        // out = sink_w * v_s + gate * tail, with sink_w = 1 - gate.
        T d_g = d_gate.empty() ? T(0) : d_gate[n * H + h];
        T du = 0;
        if (slot != SinkSlot::None) {
          for (std::size_t i = 0; i < dh; ++i) d_g += dout[i] * (tail[i] - (v0 ? v0[i] : T(0)));
          du = d_g * gate * sink_w;  // d gate / d(lse_tail - s)
        }
        if (v0 && want_v) {
          T* dv0 = grads.dv.data() + (b * S) * D + col;
          for (std::size_t i = 0; i < dh; ++i) dv0[i] += sink_w * dout[i];
        }
        if (slot == SinkSlot::FirstToken) {
          // s = q_t . k_0 * scale, ds = -du
          const T ds = -du;
          if (ds != T(0)) {
            const T* k0 = k.data() + (b * S) * D + col;
            if (want_q) {
              T* dq = grads.dq.data() + n * D + col;
              for (std::size_t i = 0; i < dh; ++i) dq[i] += ds * scale * k0[i];
            }
            if (want_k) {
              T* dk0 = grads.dk.data() + (b * S) * D + col;
              for (std::size_t i = 0; i < dh; ++i) dk0[i] += ds * scale * qrow[i];
            }
          }
        } else if (slot == SinkSlot::Learned && !grads.dsink.empty()) {
          grads.dsink[h] -= du;
        }
        if (t + 1 <= first) continue;

        const T g_tail = slot == SinkSlot::None ? T(1) : gate;
        for (std::size_t i = 0; i < dh; ++i) d_tail[i] = g_tail * dout[i];
        const T delta = dot(d_tail.data(), tail, dh);
        for (std::size_t j = first; j <= t; ++j) {
          const std::size_t m = b * S + j;
          const T* krow = k.data() + m * D + col;
          const T* vrow = v.data() + m * D + col;
          const T p = std::exp(scale * dot(qrow, krow, dh) - lse_tail);
          const T dz = p * (dot(d_tail.data(), vrow, dh) - delta + du);
          if (want_v) {
            T* dv = grads.dv.data() + m * D + col;
            for (std::size_t i = 0; i < dh; ++i) dv[i] += p * d_tail[i];
          }
          if (dz == T(0)) continue;
          if (want_q) {
            T* dq = grads.dq.data() + n * D + col;
            for (std::size_t i = 0; i < dh; ++i) dq[i] += dz * scale * krow[i];
          }
          if (want_k) {
            T* dk = grads.dk.data() + m * D + col;
            for (std::size_t i = 0; i < dh; ++i) dk[i] += dz * scale * qrow[i];
          }
        }
      }
    }
  }
}

template <typename T>
FusedSinkResult<T> fused_sink_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                        T sink) {
  const std::size_t n = require_matrix(q, "fused_sink_attention", "q");
  if (k.shape() != q.shape() || v.rank() != 2 || v.shape()[0] != n) {
    throw ShapeError("fused_sink_attention: q, k, v must be (T x d_h)");
  }
  if (v.shape()[1] != q.shape()[1]) {
    throw ShapeError("fused_sink_attention: value width must equal head dimension");
  }
  const AttentionShape shape{1, n, 1, q.shape()[1]};
  const std::array<T, 1> sink_arr{sink};
  FusedAttention<T> f = fused_attention_forward<T>(SinkSlot::Learned, shape, q.data(), k.data(),
                                                   v.data(), sink_arr);
  return {std::move(f.out), f.gate.reshaped({n}), f.lse.reshaped({n})};
}

template <typename T>
Tensor<T> zero_first_value_output(const AttentionShape& shape, const Tensor<T>& q,
                                  const Tensor<T>& k, const Tensor<T>& v,
                                  std::span<const std::uint8_t> zero_mask) {
  if (zero_mask.size() != shape.heads) throw ShapeError("zero_first_value_output: one flag per head");
  return fused_attention_forward<T>(SinkSlot::FirstToken, shape, q.data(), k.data(), v.data(), {},
                                    zero_mask)
      .out;
}

// ---------------------------------------------------------------------------
// Tape ops

namespace ag {

template <typename T>
AttentionVars<T> fused_attention(Tape<T>& tape, SinkSlot slot, const AttentionShape& shape, Var q,
                                 Var k, Var v, Var sink,
                                 std::span<const std::uint8_t> zero_first_value) {
  if (slot == SinkSlot::Learned && !sink.valid()) {
    throw ShapeError("fused_attention: learned sink slot requires a sink variable");
  }
  const std::span<const T> sink_span =
      slot == SinkSlot::Learned ? tape.value(sink).data() : std::span<const T>{};
  auto saved = std::make_shared<FusedAttention<T>>(fused_attention_forward<T>(
      slot, shape, tape.value(q).data(), tape.value(k).data(), tape.value(v).data(), sink_span,
      zero_first_value));
  const bool rg = tape.any_requires_grad({q, k, v}) ||
                  (slot == SinkSlot::Learned && tape.requires_grad(sink));
  AttentionVars<T> r;
  r.lse = saved->lse;
  r.sink_weight = saved->sink_weight;
  r.out = tape.push(saved->out, rg, "fused_attention.out");
  r.gate = tape.push(saved->gate, rg && slot != SinkSlot::None, "fused_attention.gate");
  if (rg) {
    tape.on_backward([slot, shape, q, k, v, sink, saved, out = r.out, gate = r.gate,
                      zero = std::vector<std::uint8_t>(zero_first_value.begin(),
                                                       zero_first_value.end())](Tape<T>& t) {
      const bool g_out = t.has_grad(out);
      const bool g_gate = t.requires_grad(gate) && t.has_grad(gate);
      if (!g_out && !g_gate) return;
      const Tensor<T> zeros_out = g_out ? Tensor<T>() : Tensor<T>(t.value(out).shape());
      const std::span<const T> d_out = g_out ? std::span<const T>(t.grad_ref(out).data())
                                             : std::span<const T>(zeros_out.data());
      const std::span<const T> d_gate =
          g_gate ? std::span<const T>(t.grad_ref(gate).data()) : std::span<const T>{};
      FusedAttentionGrads<T> grads;
      if (t.requires_grad(q)) grads.dq = t.grad_ref(q).data();
      if (t.requires_grad(k)) grads.dk = t.grad_ref(k).data();
      if (t.requires_grad(v)) grads.dv = t.grad_ref(v).data();
      if (slot == SinkSlot::Learned && t.requires_grad(sink)) grads.dsink = t.grad_ref(sink).data();
      const std::span<const T> sink_span =
          slot == SinkSlot::Learned ? t.value(sink).data() : std::span<const T>{};
      fused_attention_backward<T>(slot, shape, t.value(q).data(), t.value(k).data(),
                                  t.value(v).data(), sink_span, zero, *saved, d_out, d_gate, grads);
    });
  }
  return r;
}

template <typename T>
Var head_scale(Tape<T>& tape, Var o, Var gate, std::size_t heads) {
  const Tensor<T>& ov = tape.value(o);
  const Tensor<T>& gv = tape.value(gate);
  if (ov.rank() != 2 || gv.rank() != 2 || gv.shape()[0] != ov.shape()[0] || gv.shape()[1] != heads ||
      ov.shape()[1] % heads != 0) {
    throw ShapeError("head_scale: expected o (rows, H * d_h) and gate (rows, H), got " +
                     shape_str(ov.shape()) + " and " + shape_str(gv.shape()));
  }
  const std::size_t rows = ov.shape()[0], width = ov.shape()[1], dh = width / heads;
  Tensor<T> out = ov;
  for (std::size_t n = 0; n < rows; ++n)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < dh; ++i) out[n * width + h * dh + i] *= gv[n * heads + h];
  const bool rg = tape.any_requires_grad({o, gate});
  Var y = tape.push(std::move(out), rg, "head_scale");
  if (rg) {
    tape.on_backward([o, gate, y, rows, width, heads, dh](Tape<T>& t) {
      if (!t.has_grad(y)) return;
      const auto gy = t.grad_ref(y).data();
      const auto ov = t.value(o).data();
      const auto gv = t.value(gate).data();
      if (t.requires_grad(o)) {
        auto g = t.grad_ref(o).data();
        for (std::size_t n = 0; n < rows; ++n)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < dh; ++i)
              g[n * width + h * dh + i] += gy[n * width + h * dh + i] * gv[n * heads + h];
      }
      if (t.requires_grad(gate)) {
        auto g = t.grad_ref(gate).data();
        for (std::size_t n = 0; n < rows; ++n)
          for (std::size_t h = 0; h < heads; ++h) {
            T s = 0;
            for (std::size_t i = 0; i < dh; ++i)
              s += gy[n * width + h * dh + i] * ov[n * width + h * dh + i];
            g[n * heads + h] += s;
          }
      }
    });
  }
  return y;
}

template <typename T>
AttentionLayer<T> attention_layer(Tape<T>& tape, Var x, const AttentionParamVars& params,
                                  AttentionVariant variant, std::size_t batch, std::size_t seq,
                                  std::size_t heads, const AttentionOptions& options) {
  const Tensor<T>& xv = tape.value(x);
  if (xv.rank() != 2 || xv.shape()[0] != batch * seq) {
    throw ShapeError("attention_layer: x must be (batch * seq, d_model), got " + shape_str(xv.shape()));
  }
  const std::size_t d_model = xv.shape()[1];
  if (heads == 0 || d_model % heads != 0) {
    throw ShapeError("attention_layer: d_model must be divisible by the head count");
  }
  const AttentionShape shape{batch, seq, heads, d_model / heads};
  if (!options.zero_first_value.empty() && variant != AttentionVariant::Vanilla) {
    throw ShapeError("attention_layer: first-value zeroing applies to Vanilla attention only");
  }

  AttentionLayer<T> layer;
  layer.q = matmul(tape, x, params.w_q);
  layer.k = matmul(tape, x, params.w_k);
  layer.v = matmul(tape, x, params.w_v);

  AttentionVars<T> core;
  Var heads_out;
  switch (variant) {
    case AttentionVariant::Vanilla:
      core = fused_attention(tape, SinkSlot::FirstToken, shape, layer.q, layer.k, layer.v, Var{},
                             options.zero_first_value);
      heads_out = core.out;
      layer.gate = core.gate;
      break;
    case AttentionVariant::Sink:
      core = fused_attention(tape, SinkSlot::Learned, shape, layer.q, layer.k, layer.v, params.sink);
      heads_out = core.out;
      layer.gate = core.gate;
      break;
    case AttentionVariant::Gated:
      core = fused_attention(tape, SinkSlot::None, shape, layer.q, layer.k, layer.v);
      layer.gate = sigmoid(tape, matmul(tape, x, params.w_theta));
      heads_out = head_scale(tape, core.out, layer.gate, heads);
      break;
  }
  layer.y = matmul(tape, heads_out, params.w_o);

  AttentionForwardRecord<T>& rec = layer.record;
  rec.variant = variant;
  rec.shape = shape;
  rec.lse = std::move(core.lse);
  rec.gate = tape.value(layer.gate);
  if (variant != AttentionVariant::Gated) rec.sink_weight = std::move(core.sink_weight);
  rec.head_output = tape.value(heads_out);
  if (options.eager_logits) {
    Tensor<T> z({batch, heads, seq, seq});
    const auto qv = tape.value(layer.q).data();
    const auto kv = tape.value(layer.k).data();
    const std::size_t dh = shape.head_dim, width = shape.width();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        Tensor<T> qh({seq, dh}), kh({seq, dh});
        for (std::size_t t = 0; t < seq; ++t)
          for (std::size_t i = 0; i < dh; ++i) {
            qh[t * dh + i] = qv[(b * seq + t) * width + h * dh + i];
            kh[t * dh + i] = kv[(b * seq + t) * width + h * dh + i];
          }
        const Tensor<T> zh = scaled_logits(qh, kh, static_cast<double>(dh));
        std::copy(zh.data().begin(), zh.data().end(),
                  z.data().begin() + static_cast<std::ptrdiff_t>((b * heads + h) * seq * seq));
      }
    }
    rec.logits = std::move(z);
  }
  return layer;
}

}  // namespace ag

template <typename T>
MultiHeadOutput<T> multi_head_forward(const Tensor<T>& x, const AttentionVariantParams<T>& params,
                                      bool eager_logits) {
  params.validate();
  if (x.rank() != 3 || x.shape()[2] != params.d_model()) {
    throw ShapeError("multi_head_forward: x must be (batch, seq, d_model), got " + shape_str(x.shape()));
  }
  const std::size_t batch = x.shape()[0], seq = x.shape()[1], d = x.shape()[2];
  Tape<T> tape;
  const Var xv = tape.constant(x.reshaped({batch * seq, d}));
  ag::AttentionParamVars pv{tape.constant(params.w_q), tape.constant(params.w_k),
                            tape.constant(params.w_v), tape.constant(params.w_o), Var{}, Var{}};
  if (params.sink) pv.sink = tape.constant(*params.sink);
  if (params.w_theta) pv.w_theta = tape.constant(*params.w_theta);
  ag::AttentionOptions opts;
  opts.eager_logits = eager_logits;
  auto layer = ag::attention_layer(tape, xv, pv, params.variant, batch, seq, params.n_heads, opts);
  return {tape.value(layer.y).reshaped({batch, seq, d}), std::move(layer.record)};
}

#define SMOE_INSTANTIATE_ATTN(T)                                                                  \
  template struct AttentionVariantParams<T>;                                                      \
  template Tensor<T> scaled_logits<T>(const Tensor<T>&, const Tensor<T>&, double);                \
  template Tensor<T> vanilla_weights<T>(const Tensor<T>&);                                        \
  template SinkSoftmax<T> sink_softmax<T>(const Tensor<T>&, T);                                   \
  template Tensor<T> gated_gate<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> head_output<T>(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> implicit_gate_from_weights<T>(const EagerHeadRecord<T>&);                    \
  template Tensor<T> implicit_gate_lse_vanilla<T>(const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> lse_excluding_first<T>(const Tensor<T>&);                                    \
  template Tensor<T> lse_tokens<T>(const Tensor<T>&);                                             \
  template Tensor<T> implicit_gate_lse_sink<T>(const Tensor<T>&, T);                              \
  template Tensor<T> renormalized_weights<T>(const Tensor<T>&, const Tensor<T>&);                 \
  template FusedAttention<T> fused_attention_forward<T>(                                          \
      SinkSlot, const AttentionShape&, std::span<const T>, std::span<const T>, std::span<const T>, \
      std::span<const T>, std::span<const std::uint8_t>);                                         \
  template void fused_attention_backward<T>(                                                      \
      SinkSlot, const AttentionShape&, std::span<const T>, std::span<const T>, std::span<const T>, \
      std::span<const T>, std::span<const std::uint8_t>, const FusedAttention<T>&,                \
      std::span<const T>, std::span<const T>, FusedAttentionGrads<T>);                            \
  template FusedSinkResult<T> fused_sink_attention<T>(const Tensor<T>&, const Tensor<T>&,         \
                                                      const Tensor<T>&, T);                       \
  template Tensor<T> zero_first_value_output<T>(const AttentionShape&, const Tensor<T>&,          \
                                                const Tensor<T>&, const Tensor<T>&,               \
                                                std::span<const std::uint8_t>);                   \
  template ag::AttentionVars<T> ag::fused_attention<T>(Tape<T>&, SinkSlot, const AttentionShape&, \
                                                       Var, Var, Var, Var,                        \
                                                       std::span<const std::uint8_t>);            \
  template Var ag::head_scale<T>(Tape<T>&, Var, Var, std::size_t);                                \
  template ag::AttentionLayer<T> ag::attention_layer<T>(Tape<T>&, Var, const ag::AttentionParamVars&, \
                                                        AttentionVariant, std::size_t,            \
                                                        std::size_t, std::size_t,                 \
                                                        const ag::AttentionOptions&);             \
  template MultiHeadOutput<T> multi_head_forward<T>(const Tensor<T>&,                             \
                                                    const AttentionVariantParams<T>&, bool);

SMOE_INSTANTIATE_ATTN(float)
SMOE_INSTANTIATE_ATTN(double)

#undef SMOE_INSTANTIATE_ATTN

}  // namespace smoe
