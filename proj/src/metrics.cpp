#include "smoe/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>

namespace smoe {

void GateStats::validate() const {
  if (n_layers == 0 || n_heads == 0 || batch == 0 || seq == 0) {
    throw ShapeError("GateStats: empty token set");
  }
  const Shape expect{batch * seq, n_heads};
  if (gate.size() != n_layers || lse.size() != n_layers) {
    throw ShapeError("GateStats: need one gate and LSE tensor per layer");
  }
  const bool has_sink = variant != AttentionVariant::Gated;
  if (has_sink ? sink_weight.size() != n_layers : !sink_weight.empty()) {
    throw ShapeError("GateStats: sink weights present iff the variant has a sink");
  }
  for (std::size_t l = 0; l < n_layers; ++l) {
    if (gate[l].shape() != expect || lse[l].shape() != expect ||
        (has_sink && sink_weight[l].shape() != expect)) {
      throw ShapeError("GateStats: layer " + std::to_string(l) + " tensors must be " +
                       shape_str(expect));
    }
  }
}

double coefficient_of_variation(std::span<const double> values) {
  if (values.empty()) return 0.0;
  if (std::adjacent_find(values.begin(), values.end(), std::not_equal_to<>()) == values.end()) return 0.0;
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (mean < 1e-12) return 0.0;
  double var = 0;
  for (double v : values) var += (v - mean) * (v - mean);
  return std::sqrt(var / n) / mean;
}

namespace {

void check_compatible(std::span<const GateStats> passes, const char* op) {
  if (passes.empty()) throw ShapeError(std::string(op) + ": no forward passes");
  for (const auto& s : passes) {
    s.validate();
    if (s.n_layers != passes[0].n_layers || s.n_heads != passes[0].n_heads ||
        s.variant != passes[0].variant) {
      throw ShapeError(std::string(op) + ": passes disagree on layers, heads or variant");
    }
  }
}

std::vector<std::vector<double>> pooled_mean(std::span<const GateStats> passes,
                                             const std::vector<Tensor<double>> GateStats::*field,
                                             std::size_t& tokens) {
  const std::size_t L = passes[0].n_layers, H = passes[0].n_heads;
  std::vector<std::vector<double>> sum(L, std::vector<double>(H, 0.0));
  tokens = 0;
  for (const auto& s : passes) {
    tokens += s.tokens();
    for (std::size_t l = 0; l < L; ++l) {
      const auto g = ((s.*field)[l]).data();
      for (std::size_t n = 0; n < s.tokens(); ++n)
        for (std::size_t h = 0; h < H; ++h) sum[l][h] += g[n * H + h];
    }
  }
  for (auto& row : sum)
    for (auto& x : row) x /= static_cast<double>(tokens);
  return sum;
}

}  // namespace

HeadImportanceMap head_importance(const GateStats& stats) {
  return head_importance(std::span<const GateStats>(&stats, 1));
}

HeadImportanceMap head_importance(std::span<const GateStats> passes) {
  check_compatible(passes, "head_importance");
  HeadImportanceMap m;
  m.imp = pooled_mean(passes, &GateStats::gate, m.tokens);
  return m;
}

ImbalanceReport head_imbalance(const HeadImportanceMap& imp) {
  ImbalanceReport r;
  r.n_layers = imp.n_layers();
  r.n_heads = imp.n_heads();
  if (r.n_layers == 0 || r.n_heads == 0) throw ShapeError("head_imbalance: need >= 1 layer and head");
  for (const auto& layer : imp.imp) {
    if (layer.size() != r.n_heads) throw ShapeError("head_imbalance: ragged importance map");
    r.cv_per_layer.push_back(coefficient_of_variation(layer));
  }
  r.overall = std::accumulate(r.cv_per_layer.begin(), r.cv_per_layer.end(), 0.0) /
              static_cast<double>(r.n_layers);
  return r;
}

SinkRatioMap sink_ratio(const GateStats& stats) {
  return sink_ratio(std::span<const GateStats>(&stats, 1));
}

SinkRatioMap sink_ratio(std::span<const GateStats> passes) {
  check_compatible(passes, "sink_ratio");
  if (passes[0].variant == AttentionVariant::Gated) {
    throw ShapeError("sink_ratio: Gated attention has no sink weight");
  }
  std::size_t tokens = 0;
  return {pooled_mean(passes, &GateStats::sink_weight, tokens)};
}

double sink_ratio(std::span<const double> sink_weights) {
  if (sink_weights.empty()) throw ShapeError("sink_ratio: no positions");
  return std::accumulate(sink_weights.begin(), sink_weights.end(), 0.0) /
         static_cast<double>(sink_weights.size());
}

Tensor<double> value_l2_norms(const Tensor<double>& v) {
  if (v.rank() == 0) throw ShapeError("value_l2_norms: need at least one axis");
  const std::size_t d = v.shape().back();
  const Shape out_shape(v.shape().begin(), v.shape().end() - 1);
  Tensor<double> out(out_shape);
  for (std::size_t r = 0; r < out.size(); ++r) {
    double s = 0;
    for (std::size_t i = 0; i < d; ++i) s += v[r * d + i] * v[r * d + i];
    out[r] = std::sqrt(s);
  }
  return out;
}

HeadSets select_top_m_heads(const HeadImportanceMap& imp, std::size_t m) {
  const std::size_t H = imp.n_heads();
  if (m > H) {
    throw ShapeError("select_top_m_heads: m = " + std::to_string(m) + " exceeds " +
                     std::to_string(H) + " heads");
  }
  HeadSets sets;
  for (const auto& layer : imp.imp) {
    std::vector<std::size_t> order(layer.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return layer[a] > layer[b]; });
    order.resize(m);
    std::sort(order.begin(), order.end());
    sets.push_back(std::move(order));
  }
  return sets;
}

Pca2d pca_2d(const Tensor<double>& vectors) {
  if (vectors.rank() != 2 || vectors.shape()[0] < 2 || vectors.shape()[1] < 2) {
    throw ShapeError("pca_2d: need >= 2 vectors of dimension >= 2, got " +
                     shape_str(vectors.shape()));
  }
  const std::size_t n = vectors.shape()[0], d = vectors.shape()[1];
  Eigen::MatrixXd x(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) x(i, j) = vectors[i * d + j];
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n);
  const double total = cov.trace();
  if (!(total > 1e-300)) throw ShapeError("pca_2d: all points are identical");

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericError("pca_2d: eigendecomposition failed");
  // Eigen sorts ascending.
  Pca2d r{Tensor<double>({n, 2}), Tensor<double>({2, d}), {}, {}};
  for (std::size_t c = 0; c < 2; ++c) {
    const Eigen::Index col = static_cast<Eigen::Index>(d - 1 - c);
    Eigen::VectorXd u = solver.eigenvectors().col(col);
    Eigen::Index arg = 0;
    for (Eigen::Index j = 1; j < u.size(); ++j)
      if (std::abs(u(j)) > std::abs(u(arg))) arg = j;
    if (u(arg) < 0) u = -u;
    for (std::size_t j = 0; j < d; ++j) r.components[c * d + j] = u(static_cast<Eigen::Index>(j));
    const Eigen::VectorXd proj = x * u;
    for (std::size_t i = 0; i < n; ++i) r.projections[i * 2 + c] = proj(static_cast<Eigen::Index>(i));
    r.explained_variance[c] = std::max(0.0, solver.eigenvalues()(col));
    r.explained_ratio[c] = r.explained_variance[c] / total;
  }
  return r;
}

}  // namespace smoe
