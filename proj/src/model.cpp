#include "smoe/model.hpp"

#include <random>
#include <stdexcept>

namespace smoe {

void ModelConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || max_seq_len == 0) {
    throw std::invalid_argument("model config: all extents must be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("model config: d_model " + std::to_string(d_model) +
                                " is not divisible by n_heads " + std::to_string(n_heads));
  }
  if (vocab_size <= static_cast<std::size_t>(kBosToken)) {
    throw std::invalid_argument("model config: vocab_size must cover the 256 bytes plus BOS");
  }
}

void TokenBatch::validate(std::size_t vocab_size) const {
  const std::size_t n = batch * seq;
  if (n == 0) throw ShapeError("TokenBatch: empty batch");
  if (ids.size() != n || targets.size() != n || mask.size() != n) {
    throw ShapeError("TokenBatch: ids, targets and mask must each hold batch * seq entries");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab_size ||
        targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab_size) {
      throw ShapeError("TokenBatch: token id out of vocabulary at " + std::to_string(i));
    }
  }
}

namespace {

template <typename T>
Model<T> layout(const ModelConfig& config) {
  config.validate();
  Model<T> m;
  m.config = config;
  const std::size_t d = config.d_model, H = config.n_heads;
  auto add = [&](std::string name, Shape shape, T fill) {
    m.names.push_back(std::move(name));
    m.params.emplace_back(std::move(shape), fill);
    return m.params.size() - 1;
  };
  m.tok_emb = add("tok_emb", {config.vocab_size, d}, 0);
  m.pos_emb = add("pos_emb", {config.max_seq_len, d}, 0);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    LayerSlots s;
    s.attn_norm = add(p + "attn_norm", {d}, 1);
    s.w_q = add(p + "w_q", {d, d}, 0);
    s.w_k = add(p + "w_k", {d, d}, 0);
    s.w_v = add(p + "w_v", {d, d}, 0);
    s.w_o = add(p + "w_o", {d, d}, 0);
    if (config.variant == AttentionVariant::Sink) s.sink = add(p + "sink", {H}, 0);
    if (config.variant == AttentionVariant::Gated) s.w_theta = add(p + "w_theta", {d, H}, 0);
    s.mlp_norm = add(p + "mlp_norm", {d}, 1);
    s.w_up = add(p + "w_up", {d, config.mlp()}, 0);
    s.w_down = add(p + "w_down", {config.mlp(), d}, 0);
    m.layers.push_back(s);
  }
  m.final_norm = add("final_norm", {d}, 1);
  m.head = add("head", {d, config.vocab_size}, 0);
  return m;
}

}  // namespace

template <typename T>
Model<T> Model<T>::zeros(const ModelConfig& config) {
  Model<T> m = layout<T>(config);
  for (auto& p : m.params) std::fill(p.data().begin(), p.data().end(), T(0));
  return m;
}

template <typename T>
Model<T> Model<T>::init(const ModelConfig& config) {
  Model<T> m = layout<T>(config);
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    // Norm gains (rank 1 and named *_norm) and sink logits keep their fills.
    if (m.params[i].rank() < 2) continue;
    for (auto& x : m.params[i].data()) x = static_cast<T>(normal(rng));
  }
  return m;
}

template <typename T>
std::size_t Model<T>::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return i;
  throw std::out_of_range("model has no parameter named '" + std::string(name) + "'");
}

template <typename T>
std::size_t Model<T>::param_count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.size();
  return n;
}

std::size_t param_count(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.d_model, V = c.vocab_size;
  std::size_t per_layer = 2 * d + 4 * d * d + 2 * d * c.mlp();
  if (c.variant == AttentionVariant::Sink) per_layer += c.n_heads;
  if (c.variant == AttentionVariant::Gated) per_layer += d * c.n_heads;
  return V * d + c.max_seq_len * d + c.n_layers * per_layer + d + d * V;
}

template <typename T>
ModelGraph<T> build_graph(Tape<T>& tape, const Model<T>& model, const TokenBatch& batch,
                          bool track_params, const ForwardOptions& options) {
  const ModelConfig& c = model.config;
  batch.validate(c.vocab_size);
  if (batch.seq > c.max_seq_len) {
    throw ShapeError("forward: sequence length " + std::to_string(batch.seq) + " exceeds max_seq_len " +
                     std::to_string(c.max_seq_len));
  }
  if (!options.zero_first_value.empty() && options.zero_first_value.size() != c.n_layers) {
    throw ShapeError("forward: zero_first_value needs one mask per layer");
  }
  ModelGraph<T> g;
  for (const auto& p : model.params)
    g.params.push_back(track_params ? tape.variable(p) : tape.constant(p));

  const std::size_t rows = batch.batch * batch.seq;
  std::vector<std::int32_t> positions(rows);
  for (std::size_t n = 0; n < rows; ++n) positions[n] = static_cast<std::int32_t>(n % batch.seq);

  const T eps = static_cast<T>(1e-6);
  Var x = ag::add(tape, ag::embedding(tape, g.params[model.tok_emb], std::span(batch.ids)),
                  ag::embedding(tape, g.params[model.pos_emb], std::span<const std::int32_t>(positions)));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const LayerSlots& s = model.layers[l];
    const Var h = ag::rmsnorm(tape, x, g.params[s.attn_norm], eps);
    ag::AttentionParamVars pv{g.params[s.w_q], g.params[s.w_k], g.params[s.w_v], g.params[s.w_o],
                              Var{}, Var{}};
    if (s.sink != LayerSlots::npos) pv.sink = g.params[s.sink];
    if (s.w_theta != LayerSlots::npos) pv.w_theta = g.params[s.w_theta];
    ag::AttentionOptions opts;
    if (!options.zero_first_value.empty()) opts.zero_first_value = options.zero_first_value[l];
    auto attn = ag::attention_layer(tape, h, pv, c.variant, batch.batch, batch.seq, c.n_heads, opts);
    x = ag::add(tape, x, attn.y);
    g.gates.push_back(attn.gate);
    g.records.push_back(std::move(attn.record));
    if (options.capture_qkv) {
      g.q.push_back(attn.q);
      g.k.push_back(attn.k);
      g.v.push_back(attn.v);
    }
    const Var m = ag::rmsnorm(tape, x, g.params[s.mlp_norm], eps);
    const Var up = ag::gelu(tape, ag::matmul(tape, m, g.params[s.w_up]));
    x = ag::add(tape, x, ag::matmul(tape, up, g.params[s.w_down]));
  }
  const Var f = ag::rmsnorm(tape, x, g.params[model.final_norm], eps);
  g.logits = ag::matmul(tape, f, g.params[model.head]);
  return g;
}

template <typename T>
GateStats gate_stats_from(const std::vector<AttentionForwardRecord<T>>& records,
                          const ModelConfig& config, std::size_t batch, std::size_t seq) {
  GateStats s;
  s.variant = config.variant;
  s.n_layers = config.n_layers;
  s.n_heads = config.n_heads;
  s.batch = batch;
  s.seq = seq;
  for (const auto& r : records) {
    s.gate.push_back(r.gate.template cast<double>());
    s.lse.push_back(r.lse.template cast<double>());
    if (r.sink_weight) s.sink_weight.push_back(r.sink_weight->template cast<double>());
  }
  s.validate();
  return s;
}

template <typename T>
ForwardResult<T> forward(const Model<T>& model, const TokenBatch& batch, const ForwardOptions& options) {
  Tape<T> tape;
  ModelGraph<T> g = build_graph(tape, model, batch, false, options);
  ForwardResult<T> r;
  r.logits = tape.value(g.logits).reshaped({batch.batch, batch.seq, model.config.vocab_size});
  r.stats = gate_stats_from(g.records, model.config, batch.batch, batch.seq);
  for (std::size_t l = 0; l < g.q.size(); ++l) {
    r.q.push_back(tape.value(g.q[l]));
    r.k.push_back(tape.value(g.k[l]));
    r.v.push_back(tape.value(g.v[l]));
  }
  return r;
}

#define SMOE_INSTANTIATE_MODEL(T)                                                             \
  template struct Model<T>;                                                                   \
  template ModelGraph<T> build_graph<T>(Tape<T>&, const Model<T>&, const TokenBatch&, bool,   \
                                        const ForwardOptions&);                               \
  template GateStats gate_stats_from<T>(const std::vector<AttentionForwardRecord<T>>&,       \
                                        const ModelConfig&, std::size_t, std::size_t);        \
  template ForwardResult<T> forward<T>(const Model<T>&, const TokenBatch&, const ForwardOptions&);

SMOE_INSTANTIATE_MODEL(float)
SMOE_INSTANTIATE_MODEL(double)

#undef SMOE_INSTANTIATE_MODEL

}  // namespace smoe
