#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "smoe/balance.hpp"
#include "smoe/metrics.hpp"
#include "smoe/model.hpp"

namespace smoe {

struct TrainConfig {
  std::size_t steps = 0;  // 0: derive from the 20-tokens-per-parameter budget
  std::size_t batch_size = 4;
  std::size_t seq_len = 128;
  double lr_peak = 0.02;
  double decay_frac = 0.2;
  double weight_decay = 0.01;
  double grad_clip = 1.0;  // global L2 norm; 0 disables
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  BalanceConfig balance;
  std::size_t eval_every = 50;
  std::uint64_t seed = 0;
  std::string corpus;
  double valid_frac = 0.05;
  bool wall_clock = true;  // false writes wall_ms = 0 so logs are byte-reproducible

  void validate() const;
};

/// ceil(20 * params / (batch_size * seq_len)).
std::size_t budget_steps(std::size_t n_params, std::size_t batch_size, std::size_t seq_len);

// -- data -------------------------------------------------------------------

/// BOS followed by the raw byte values.
std::vector<std::int32_t> tokenize_bytes(std::string_view text);
/// Inverse of tokenize_bytes; BOS tokens are dropped.
std::string decode_tokens(std::span<const std::int32_t> ids);

struct Corpus {
  std::string train;
  std::string valid;  // trailing valid_frac of the file

  static Corpus load(const std::string& path, double valid_frac = 0.05);
  static Corpus from_text(std::string text, double valid_frac = 0.05);
};

/// One row per offset: ids = [BOS, w_0 .. w_{L-2}], targets = w_0 .. w_{L-1}
/// for the window w of `seq_len` bytes starting at the offset.
TokenBatch window_batch(std::string_view text, std::span<const std::size_t> offsets,
                        std::size_t seq_len);

/// `batch_size` windows at offsets drawn uniformly from `rng`.
TokenBatch sample_batch(std::string_view text, std::size_t batch_size, std::size_t seq_len,
                        std::mt19937_64& rng);

/// Non-overlapping windows covering `text`; the final partial window (if
/// any) becomes its own shorter batch.
std::vector<TokenBatch> sequential_batches(std::string_view text, std::size_t seq_len,
                                           std::size_t batch_size);

// -- optimization -------------------------------------------------------------

/// Constant lr_peak, then linear decay to 0 over the last decay_frac of steps.
double lr_at(std::size_t step, std::size_t steps, double lr_peak, double decay_frac);

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <typename T>
struct AdamState {
  std::uint64_t t = 0;
  std::vector<Tensor<T>> m, v;

  static AdamState like(const std::vector<Tensor<T>>& params);
};

/// Decoupled weight decay, bias-corrected moments. `decay` selects which
/// tensors are decayed (empty: all).
template <typename T>
void adamw_step(std::vector<Tensor<T>>& params, const std::vector<Tensor<T>>& grads,
                AdamState<T>& state, double lr, const AdamHyper& hyper,
                std::span<const std::uint8_t> decay = {});

/// Scales grads so their global L2 norm is at most max_norm; returns the
/// norm before clipping.
template <typename T>
double clip_global_norm(std::vector<Tensor<T>>& grads, double max_norm);

// -- training -----------------------------------------------------------------

struct TrainState {
  Model<float> model;
  AdamState<float> adam;
  std::size_t step = 0;
  std::mt19937_64 rng;
  HeadSets shared;  // frozen shared heads (fine-tune)

  static TrainState fresh(const ModelConfig& model_config, std::uint64_t data_seed);
};

struct MetricsRecord {
  std::size_t step = 0;
  double loss_base = 0;
  double loss_aux = 0;
  double lr = 0;
  std::vector<double> cv_per_layer;
  double head_imbalance = 0;
  double wall_ms = 0;
};

struct MetricsLog {
  std::vector<MetricsRecord> records;

  void append(MetricsRecord record);
  std::string to_jsonl() const;
  void write(const std::string& path) const;
  const MetricsRecord* at_step(std::size_t step) const;
};

struct StepOutcome {
  double loss_base = 0;
  double loss_aux = 0;
  double lr = 0;
  ImbalanceReport imbalance;
};

/// One optimizer step on a freshly sampled batch.
StepOutcome train_step(TrainState& state, const TrainConfig& config, std::string_view train_text);

/// Runs from state.step until `config.steps` (or `stop_at` if smaller),
/// appending a record at every step divisible by eval_every.
MetricsLog train_loop(TrainState& state, const TrainConfig& config, std::string_view train_text,
                      std::size_t stop_at = SIZE_MAX,
                      const std::function<void(const MetricsRecord&)>& on_record = {});

struct EvalResult {
  double bpb = 0;
  double nll_nats = 0;
  std::size_t tokens = 0;  // predicted positions
  std::size_t bytes = 0;
};

/// Bits per byte over non-overlapping windows of `text`.
template <typename T>
EvalResult evaluate_bpb(const Model<T>& model, std::string_view text, std::size_t seq_len,
                        std::size_t batch_size = 8, const ForwardOptions& options = {});

/// Gate statistics pooled over non-overlapping windows of `text`.
template <typename T>
std::vector<GateStats> collect_gate_stats(const Model<T>& model, std::string_view text,
                                          std::size_t seq_len, std::size_t batch_size = 8,
                                          std::size_t max_windows = SIZE_MAX);

}  // namespace smoe
