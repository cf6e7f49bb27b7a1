#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string_view>
#include <vector>

#include "smoe/metrics.hpp"
#include "smoe/model.hpp"
#include "smoe/train.hpp"

namespace smoe {

/// Importance pooled over up to `max_windows` non-overlapping windows of `text`.
template <typename T>
HeadImportanceMap importance_on(const Model<T>& model, std::string_view text, std::size_t seq_len,
                                std::size_t max_windows = 64);

// -- first-value zeroing ------------------------------------------------------

struct ZeroFirstValueResult {
  double tau = 0;
  double bpb_none = 0;
  double bpb_all = 0;
  double bpb_selective = 0;
  std::size_t heads_flagged = 0;
  SinkRatioMap alpha;                                // measured on `text`
  std::vector<std::vector<std::uint8_t>> flagged;    // [layer][head]
  std::size_t tokens = 0;
  std::size_t bytes = 0;
};

/// Flags heads whose sink ratio exceeds tau and compares BPB with no
/// intervention, every head zeroed, and only the flagged heads zeroed.
/// Vanilla models only.
ZeroFirstValueResult zero_first_value_experiment(const Model<float>& model, std::string_view text,
                                                 std::size_t seq_len, double tau,
                                                 std::size_t max_windows = SIZE_MAX);

// -- fine-tuning ----------------------------------------------------------------

/// Mean over layers of the CV of the non-shared heads.
double routed_imbalance(const HeadImportanceMap& imp, const HeadSets& shared);

/// Fraction of layers whose top-m heads by importance are exactly `shared`.
double shared_top_fraction(const HeadImportanceMap& imp, const HeadSets& shared);

struct FinetuneReport {
  std::size_t m = 0;
  HeadSets shared;
  HeadImportanceMap before;
  HeadImportanceMap after;
  double routed_before = 0;
  double routed_after = 0;
  double shared_top_before = 0;
  double shared_top_after = 0;
  MetricsLog log;
};

/// Calibrates importance on `calibration` text, fixes the top-m heads of each
/// layer as the shared set, then trains `config.steps` steps with the
/// fine-tune loss. The optimizer, step counter and data RNG (from
/// config.seed) start afresh.
FinetuneReport run_finetune(TrainState& state, TrainConfig config, std::string_view train_text,
                            std::string_view calibration, std::size_t max_windows = 64,
                            const std::function<void(const MetricsRecord&)>& on_record = {});

}  // namespace smoe
