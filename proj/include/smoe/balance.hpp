#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "smoe/autograd.hpp"
#include "smoe/metrics.hpp"

namespace smoe {

enum class BalanceMode { Off, Scratch, FineTune };

std::string_view to_string(BalanceMode mode);
/// Accepts "off", "scratch", "finetune" (case-insensitive).
BalanceMode parse_balance_mode(std::string_view name);

struct BalanceConfig {
  double lambda = 0.0;
  BalanceMode mode = BalanceMode::Off;
  std::size_t m = 0;  // shared heads per layer, FineTune only

  void validate(std::size_t n_heads) const;
};

/// Default shared-head count, ceil(H / 4).
std::size_t default_shared_heads(std::size_t n_heads);

/// lambda * sum_l H * CV_l^2
double aux_loss_scratch(const std::vector<std::vector<double>>& imp_per_layer, double lambda);

/// lambda * sum_l (H - m) * CV(routed heads of l)^2. Layers with at most one
/// routed head contribute 0.
double aux_loss_finetune(const std::vector<std::vector<double>>& imp_per_layer, double lambda,
                         const HeadSets& shared);

/// base + aux; both must be finite.
double total_loss(double base, double aux);

namespace ag {

/// Differentiable aux losses. Each entry of `imp_per_layer` is a
/// (H) importance vector on the tape.
template <typename T>
Var aux_loss_scratch(Tape<T>& tape, std::span<const Var> imp_per_layer, T lambda);

template <typename T>
Var aux_loss_finetune(Tape<T>& tape, std::span<const Var> imp_per_layer, T lambda,
                      const HeadSets& shared);

/// Dispatches on `config.mode`; Off yields a constant 0.
template <typename T>
Var aux_loss(Tape<T>& tape, std::span<const Var> imp_per_layer, const BalanceConfig& config,
             const HeadSets& shared);

template <typename T>
Var total_loss(Tape<T>& tape, Var base, Var aux);

}  // namespace ag

}  // namespace smoe
