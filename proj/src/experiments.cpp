#include "smoe/experiments.hpp"

#include <algorithm>
#include <stdexcept>

#include "smoe/balance.hpp"

namespace smoe {

template <typename T>
HeadImportanceMap importance_on(const Model<T>& model, std::string_view text, std::size_t seq_len,
                                std::size_t max_windows) {
  const auto passes = collect_gate_stats(model, text, seq_len, 8, max_windows);
  if (passes.empty()) throw std::invalid_argument("importance: no windows in text");
  return head_importance(std::span<const GateStats>(passes));
}

template HeadImportanceMap importance_on<float>(const Model<float>&, std::string_view, std::size_t,
                                                std::size_t);
template HeadImportanceMap importance_on<double>(const Model<double>&, std::string_view, std::size_t,
                                                 std::size_t);

ZeroFirstValueResult zero_first_value_experiment(const Model<float>& model, std::string_view text,
                                                 std::size_t seq_len, double tau, std::size_t max_windows) {
  if (model.config.variant != AttentionVariant::Vanilla)
    throw std::invalid_argument("zero-first-value needs a vanilla model, got " +
                                std::string(to_string(model.config.variant)));
  if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("tau must lie in [0, 1]");

  ZeroFirstValueResult r;
  r.tau = tau;
  const auto passes = collect_gate_stats(model, text, seq_len, 8, max_windows);
  if (passes.empty()) throw std::invalid_argument("zero-first-value: no windows in text");
  r.alpha = sink_ratio(std::span<const GateStats>(passes));

  const std::size_t L = model.config.n_layers, H = model.config.n_heads;
  ForwardOptions all, selective;
  all.zero_first_value.assign(L, std::vector<std::uint8_t>(H, 1));
  selective.zero_first_value.assign(L, std::vector<std::uint8_t>(H, 0));
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t h = 0; h < H; ++h)
      if (r.alpha.alpha[l][h] > tau) {
        selective.zero_first_value[l][h] = 1;
        r.heads_flagged += 1;
      }
  r.flagged = selective.zero_first_value;

  const auto none = evaluate_bpb(model, text, seq_len);
  r.bpb_none = none.bpb;
  r.tokens = none.tokens;
  r.bytes = none.bytes;
  r.bpb_all = evaluate_bpb(model, text, seq_len, 8, all).bpb;
  r.bpb_selective = r.heads_flagged ? evaluate_bpb(model, text, seq_len, 8, selective).bpb : r.bpb_none;
  return r;
}

double routed_imbalance(const HeadImportanceMap& imp, const HeadSets& shared) {
  if (shared.size() != imp.n_layers()) throw std::invalid_argument("routed_imbalance: layer count mismatch");
  if (imp.n_layers() == 0) return 0.0;
  double total = 0;
  for (std::size_t l = 0; l < imp.n_layers(); ++l) {
    std::vector<double> routed;
    for (std::size_t h = 0; h < imp.n_heads(); ++h)
      if (std::find(shared[l].begin(), shared[l].end(), h) == shared[l].end()) routed.push_back(imp.imp[l][h]);
    total += coefficient_of_variation(routed);
  }
  return total / static_cast<double>(imp.n_layers());
}

double shared_top_fraction(const HeadImportanceMap& imp, const HeadSets& shared) {
  if (shared.size() != imp.n_layers()) throw std::invalid_argument("shared_top_fraction: layer count mismatch");
  if (imp.n_layers() == 0) return 0.0;
  const auto top = select_top_m_heads(imp, shared.front().size());
  std::size_t kept = 0;
  for (std::size_t l = 0; l < imp.n_layers(); ++l) kept += top[l] == shared[l];
  return static_cast<double>(kept) / static_cast<double>(imp.n_layers());
}

FinetuneReport run_finetune(TrainState& state, TrainConfig config, std::string_view train_text,
                            std::string_view calibration, std::size_t max_windows,
                            const std::function<void(const MetricsRecord&)>& on_record) {
  const std::size_t H = state.model.config.n_heads;
  config.balance.mode = BalanceMode::FineTune;
  config.balance.validate(H);
  FinetuneReport r;
  r.m = config.balance.m;
  r.before = importance_on(state.model, calibration, config.seq_len, max_windows);
  r.shared = select_top_m_heads(r.before, r.m);
  r.routed_before = routed_imbalance(r.before, r.shared);
  r.shared_top_before = shared_top_fraction(r.before, r.shared);

  state.shared = r.shared;
  state.step = 0;
  state.adam = AdamState<float>::like(state.model.params);
  state.rng.seed(config.seed);
  r.log = train_loop(state, config, train_text, SIZE_MAX, on_record);

  r.after = importance_on(state.model, calibration, config.seq_len, max_windows);
  r.routed_after = routed_imbalance(r.after, r.shared);
  r.shared_top_after = shared_top_fraction(r.after, r.shared);
  return r;
}

}  // namespace smoe
