#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string_view>

#include "smoe/autograd.hpp"
#include "smoe/tensor.hpp"

namespace smoe {

enum class AttentionVariant { Vanilla, Sink, Gated };

std::string_view to_string(AttentionVariant variant);
/// Accepts "vanilla", "sink", "gated" (case-insensitive).
AttentionVariant parse_variant(std::string_view name);

/// Packed multi-head layout: row n = b * seq + t holds heads * head_dim
/// features, head h occupying columns [h * head_dim, (h + 1) * head_dim).
struct AttentionShape {
  std::size_t batch = 1;
  std::size_t seq = 1;
  std::size_t heads = 1;
  std::size_t head_dim = 1;

  std::size_t rows() const noexcept { return batch * seq; }
  std::size_t width() const noexcept { return heads * head_dim; }
  void validate() const;
};

template <typename T>
struct AttentionVariantParams {
  AttentionVariant variant = AttentionVariant::Vanilla;
  std::size_t n_heads = 1;
  Tensor<T> w_q;  // d_model x (H * d_h)
  Tensor<T> w_k;
  Tensor<T> w_v;
  Tensor<T> w_o;  // (H * d_h) x d_model
  std::optional<Tensor<T>> sink;     // (H), Sink only
  std::optional<Tensor<T>> w_theta;  // d_model x H, Gated only

  std::size_t d_model() const { return w_q.extent(0); }
  std::size_t head_dim() const { return d_model() / n_heads; }
  void validate() const;

  /// Projections and W_theta from N(0, 0.02^2); sink logits start at 0.
  static AttentionVariantParams init(AttentionVariant variant, std::size_t d_model,
                                     std::size_t n_heads, std::mt19937_64& rng);
};

/// Per-call capture of what the attention layer computed. Gate, LSE and the
/// sink weight are laid out (rows, heads).
template <typename T>
struct AttentionForwardRecord {
  AttentionVariant variant = AttentionVariant::Vanilla;
  AttentionShape shape;
  std::optional<Tensor<T>> logits;       // (B, H, T, T), eager mode only; masked = -inf
  Tensor<T> lse;                         // over every attended real token
  Tensor<T> gate;                        // G in (0, 1]; exactly 0 at t = 0 for Vanilla
  std::optional<Tensor<T>> sink_weight;  // A_sink; absent for Gated
  Tensor<T> head_output;                 // (rows, H * d_h), the input to W_O
};

// ---------------------------------------------------------------------------
// Single-head eager operations. These materialize the T x T weight matrix and
// exist for oracles and analysis.

/// z[t, j] = q_t . k_j / sqrt(d_h) for j <= t, -inf above the diagonal.
template <typename T>
Tensor<T> scaled_logits(const Tensor<T>& q, const Tensor<T>& k, double d_h);

template <typename T>
Tensor<T> vanilla_weights(const Tensor<T>& z);

template <typename T>
struct SinkSoftmax {
  Tensor<T> token_weights;  // (T, T)
  Tensor<T> sink_weight;    // (T)
};

/// Softmax with exp(sink) added to every row's denominator.
template <typename T>
SinkSoftmax<T> sink_softmax(const Tensor<T>& z, T sink);

/// sigmoid(x W_theta): x is (T x d_model), W_theta (d_model x H).
template <typename T>
Tensor<T> gated_gate(const Tensor<T>& x, const Tensor<T>& w_theta);

/// weights (T x S) times values (S x d_h).
template <typename T>
Tensor<T> head_output(const Tensor<T>& weights, const Tensor<T>& v);

template <typename T>
struct EagerHeadRecord {
  AttentionVariant variant = AttentionVariant::Vanilla;
  Tensor<T> weights;                     // (T, T) token weights
  std::optional<Tensor<T>> sink_weight;  // (T), Sink variant
};

/// G = 1 - A_sink, with A_sink = A[t, 0] for Vanilla.
template <typename T>
Tensor<T> implicit_gate_from_weights(const EagerHeadRecord<T>& record);

/// sigmoid(LSE_excl0 - z0), elementwise. An LSE of -inf (no positions besides
/// token 0, i.e. t = 0) is an error; callers map that case to a gate of 0.
template <typename T>
Tensor<T> implicit_gate_lse_vanilla(const Tensor<T>& lse_excl0, const Tensor<T>& z0);

/// Row-wise LSE over positions 1..t of a causal logit matrix; row 0 is -inf.
template <typename T>
Tensor<T> lse_excluding_first(const Tensor<T>& z);

/// Row-wise LSE over positions 0..t of a causal logit matrix.
template <typename T>
Tensor<T> lse_tokens(const Tensor<T>& z);

/// sigmoid(LSE - sink), elementwise.
template <typename T>
Tensor<T> implicit_gate_lse_sink(const Tensor<T>& lse, T sink);

/// weights[t, :] / (1 - sink_weight[t]). Rows whose sink weight reaches
/// 1 - 1e-12 are rejected.
template <typename T>
Tensor<T> renormalized_weights(const Tensor<T>& weights, const Tensor<T>& sink_weight);

// ---------------------------------------------------------------------------
// Fused path. Never materializes attention weights: keys are streamed in
// fixed-size blocks with an online max/sum, and the backward pass recomputes
// probabilities from the saved LSE.

/// Keys processed per step of the online softmax; the largest weight buffer
/// the fused path ever holds.
inline constexpr std::size_t kFusedKeyBlock = 32;

/// What stands in the sink slot.
enum class SinkSlot {
  FirstToken,  // Vanilla: token 0 with logit q.k_0 and value v_0
  Learned,     // Sink: per-head logit parameter with no value
  None,        // plain softmax; gate fixed at 1
};

template <typename T>
struct FusedAttention {
  Tensor<T> out;          // (rows, H * d_h)
  Tensor<T> gate;         // (rows, H)
  Tensor<T> sink_weight;  // (rows, H)
  Tensor<T> lse;          // (rows, H), over all real tokens attended
  Tensor<T> lse_tail;     // (rows, H), over non-sink tokens; -inf when empty
  Tensor<T> tail_out;     // (rows, H * d_h), renormalized non-sink output
};

/// `sink` has H entries for SinkSlot::Learned and is ignored otherwise.
/// `zero_first_value`, when non-empty, has H flags; flagged heads drop the
/// v_0 term (FirstToken only), which gives the same floats as v_0 := 0.
template <typename T>
FusedAttention<T> fused_attention_forward(SinkSlot slot, const AttentionShape& shape,
                                          std::span<const T> q, std::span<const T> k,
                                          std::span<const T> v, std::span<const T> sink,
                                          std::span<const std::uint8_t> zero_first_value = {});

template <typename T>
struct FusedAttentionGrads {
  std::span<T> dq, dk, dv, dsink;  // accumulated into; empty spans are skipped
};

/// `d_out` is (rows, H * d_h); `d_gate` is (rows, H) or empty.
template <typename T>
void fused_attention_backward(SinkSlot slot, const AttentionShape& shape, std::span<const T> q,
                              std::span<const T> k, std::span<const T> v,
                              std::span<const T> sink, std::span<const std::uint8_t> zero_first_value,
                              const FusedAttention<T>& saved, std::span<const T> d_out,
                              std::span<const T> d_gate, FusedAttentionGrads<T> grads);

template <typename T>
struct FusedSinkResult {
  Tensor<T> out;   // (T, d_h)
  Tensor<T> gate;  // (T)
  Tensor<T> lse;   // (T)
};

/// Single-head Sink attention through the fused path: plain softmax over the
/// real tokens, then scaled by G = sigmoid(LSE - sink).
template <typename T>
FusedSinkResult<T> fused_sink_attention(const Tensor<T>& q, const Tensor<T>& k,
                                        const Tensor<T>& v, T sink);

/// Vanilla multi-head attention over packed (rows, H * d_h) q/k/v where
/// flagged heads have the first token's value removed.
template <typename T>
Tensor<T> zero_first_value_output(const AttentionShape& shape, const Tensor<T>& q,
                                  const Tensor<T>& k, const Tensor<T>& v,
                                  std::span<const std::uint8_t> zero_mask);

/// Largest attention-weight buffer (in elements) allocated by attention code
/// on this thread since the last reset. Lets tests assert that the fused path
/// stays O(block) while eager code reports T x T.
std::size_t attention_buffer_peak();
void reset_attention_buffer_peak();

// ---------------------------------------------------------------------------
// Differentiable layer.

namespace ag {

template <typename T>
struct AttentionVars {
  Var out;   // (rows, H * d_h)
  Var gate;  // (rows, H)
  Tensor<T> lse;
  Tensor<T> sink_weight;
};

/// Fused attention as a tape op. `sink` is required for SinkSlot::Learned.
template <typename T>
AttentionVars<T> fused_attention(Tape<T>& tape, SinkSlot slot, const AttentionShape& shape, Var q,
                                 Var k, Var v, Var sink = {},
                                 std::span<const std::uint8_t> zero_first_value = {});

/// Multiplies each head's slice of `o` (rows, H * d_h) by gate (rows, H).
template <typename T>
Var head_scale(Tape<T>& tape, Var o, Var gate, std::size_t heads);

struct AttentionParamVars {
  Var w_q, w_k, w_v, w_o;
  Var sink;     // Sink only
  Var w_theta;  // Gated only
};

struct AttentionOptions {
  std::span<const std::uint8_t> zero_first_value;  // per head, Vanilla only
  bool eager_logits = false;                       // also store z in the record
  bool capture_qkv = false;
};

template <typename T>
struct AttentionLayer {
  Var y;     // (rows, d_model)
  Var gate;  // (rows, H)
  AttentionForwardRecord<T> record;
  Var q, k, v;  // projections, (rows, H * d_h)
};

/// x is (batch * seq, d_model).
template <typename T>
AttentionLayer<T> attention_layer(Tape<T>& tape, Var x, const AttentionParamVars& params,
                                  AttentionVariant variant, std::size_t batch, std::size_t seq,
                                  std::size_t heads, const AttentionOptions& options = {});

}  // namespace ag

template <typename T>
struct MultiHeadOutput {
  Tensor<T> y;  // (batch, seq, d_model)
  AttentionForwardRecord<T> record;
};

/// x is (batch, seq, d_model).
template <typename T>
MultiHeadOutput<T> multi_head_forward(const Tensor<T>& x, const AttentionVariantParams<T>& params,
                                      bool eager_logits = false);

}  // namespace smoe
