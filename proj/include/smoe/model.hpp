#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "smoe/attention.hpp"
#include "smoe/autograd.hpp"
#include "smoe/metrics.hpp"

namespace smoe {

inline constexpr std::int32_t kBosToken = 256;

struct ModelConfig {
  std::size_t vocab_size = 257;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t mlp_hidden = 0;  // 0 means 4 * d_model
  std::size_t max_seq_len = 128;
  AttentionVariant variant = AttentionVariant::Vanilla;
  std::uint64_t seed = 0;

  std::size_t mlp() const noexcept { return mlp_hidden ? mlp_hidden : 4 * d_model; }
  std::size_t head_dim() const noexcept { return d_model / n_heads; }
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Row-major (batch, seq) token ids with next-token targets. Rows whose
/// mask is 0 are excluded from the loss.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::int32_t> targets;
  std::vector<std::uint8_t> mask;

  void validate(std::size_t vocab_size) const;
};

/// Parameter indices of one transformer block.
struct LayerSlots {
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::size_t attn_norm = npos, w_q = npos, w_k = npos, w_v = npos, w_o = npos;
  std::size_t sink = npos, w_theta = npos;
  std::size_t mlp_norm = npos, w_up = npos, w_down = npos;
};

/// Pre-norm decoder: token + learned position embeddings, blocks of
/// RMSNorm -> attention -> residual, RMSNorm -> GELU MLP -> residual, then a
/// final RMSNorm and an untied output head.
template <typename T>
struct Model {
  ModelConfig config;
  std::vector<std::string> names;
  std::vector<Tensor<T>> params;
  std::size_t tok_emb = 0, pos_emb = 0, final_norm = 0, head = 0;
  std::vector<LayerSlots> layers;

  /// Seeded N(0, 0.02^2) weights, zero sink logits, unit norm gains.
  static Model init(const ModelConfig& config);
  /// Correct shapes, every value zero (for loading).
  static Model zeros(const ModelConfig& config);

  std::size_t index_of(std::string_view name) const;
  std::size_t param_count() const;

  template <typename U>
  Model<U> cast() const {
    Model<U> m;
    m.config = config;
    m.names = names;
    for (const auto& p : params) m.params.push_back(p.template cast<U>());
    m.tok_emb = tok_emb;
    m.pos_emb = pos_emb;
    m.final_norm = final_norm;
    m.head = head;
    m.layers = layers;
    return m;
  }
};

/// Closed-form parameter count.
std::size_t param_count(const ModelConfig& config);

struct ForwardOptions {
  /// Per layer, one flag per head (empty: no intervention). Vanilla only.
  std::vector<std::vector<std::uint8_t>> zero_first_value;
  bool capture_qkv = false;
};

template <typename T>
struct ModelGraph {
  Var logits;                  // (batch * seq, vocab)
  std::vector<Var> params;     // parallel to Model::params
  std::vector<Var> gates;      // per layer (batch * seq, heads)
  std::vector<AttentionForwardRecord<T>> records;
  std::vector<Var> q, k, v;    // per layer, when captured
};

/// Records the forward pass on `tape`. Parameters become variables when
/// `track_params` is set, constants otherwise.
template <typename T>
ModelGraph<T> build_graph(Tape<T>& tape, const Model<T>& model, const TokenBatch& batch,
                          bool track_params, const ForwardOptions& options = {});

template <typename T>
struct ForwardResult {
  Tensor<T> logits;  // (batch, seq, vocab)
  GateStats stats;
  std::vector<Tensor<T>> q, k, v;  // per layer (batch * seq, d_model), when captured
};

template <typename T>
ForwardResult<T> forward(const Model<T>& model, const TokenBatch& batch,
                         const ForwardOptions& options = {});

template <typename T>
GateStats gate_stats_from(const std::vector<AttentionForwardRecord<T>>& records,
                          const ModelConfig& config, std::size_t batch, std::size_t seq);

}  // namespace smoe
