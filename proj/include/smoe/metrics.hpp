#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "smoe/attention.hpp"
#include "smoe/tensor.hpp"

namespace smoe {

/// Gates and LSE values captured from one forward pass, stored in f64.
/// Each per-layer tensor is (batch * seq, heads), row n = b * seq + t.
struct GateStats {
  AttentionVariant variant = AttentionVariant::Vanilla;
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<Tensor<double>> gate;
  std::vector<Tensor<double>> lse;
  std::vector<Tensor<double>> sink_weight;  // empty for Gated

  std::size_t tokens() const noexcept { return batch * seq; }
  void validate() const;
};

/// imp[l][h] = mean gate of head h in layer l over every pooled token.
struct HeadImportanceMap {
  std::vector<std::vector<double>> imp;
  std::size_t tokens = 0;

  std::size_t n_layers() const noexcept { return imp.size(); }
  std::size_t n_heads() const noexcept { return imp.empty() ? 0 : imp.front().size(); }
};

struct ImbalanceReport {
  std::vector<double> cv_per_layer;
  double overall = 0;
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
};

struct SinkRatioMap {
  std::vector<std::vector<double>> alpha;  // [layer][head]
};

/// Per layer, the selected head indices in ascending order.
using HeadSets = std::vector<std::vector<std::size_t>>;

/// Coefficient of variation with population std; 0 when the mean is < 1e-12.
double coefficient_of_variation(std::span<const double> values);

HeadImportanceMap head_importance(const GateStats& stats);
/// Pools every (sample, position) of every pass into one flat mean.
HeadImportanceMap head_importance(std::span<const GateStats> passes);

ImbalanceReport head_imbalance(const HeadImportanceMap& imp);

/// Mean sink weight per head over all pooled positions. Gated has no sink.
SinkRatioMap sink_ratio(const GateStats& stats);
SinkRatioMap sink_ratio(std::span<const GateStats> passes);
/// Mean of a single head's sink weights over positions 0..T-1.
double sink_ratio(std::span<const double> sink_weights);

/// L2 norm over the last axis; the result drops that axis (a vector gives a
/// rank-0 tensor).
Tensor<double> value_l2_norms(const Tensor<double>& v);

/// The m most important heads per layer; ties go to the lower head index.
HeadSets select_top_m_heads(const HeadImportanceMap& imp, std::size_t m);

struct Pca2d {
  Tensor<double> projections;  // (n, 2)
  Tensor<double> components;   // (2, d), orthonormal rows
  std::array<double, 2> explained_variance{};  // covariance eigenvalues (divide by n)
  std::array<double, 2> explained_ratio{};
};

/// Projects mean-centred rows of `vectors` (n x d) onto the top two
/// covariance eigenvectors. Each component is signed so that its
/// largest-magnitude coordinate is positive (first such index on ties).
Pca2d pca_2d(const Tensor<double>& vectors);

}  // namespace smoe
