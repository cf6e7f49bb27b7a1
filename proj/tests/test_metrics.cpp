#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "smoe/metrics.hpp"

using namespace smoe;
using smoe::testing::random_tensor;
using smoe::testing::uniform_int;

namespace {

/// One-layer, one-head stats for a Sink-variant pass with the given gates.
GateStats single_head(const std::vector<double>& gates, std::size_t batch = 1) {
  GateStats s;
  s.variant = AttentionVariant::Sink;
  s.n_layers = 1;
  s.n_heads = 1;
  s.batch = batch;
  s.seq = gates.size() / batch;
  Tensor<double> g({gates.size(), 1}, gates);
  Tensor<double> sw = g;
  for (auto& x : sw.data()) x = 1.0 - x;
  s.gate.push_back(g);
  s.lse.push_back(Tensor<double>({gates.size(), 1}));
  s.sink_weight.push_back(sw);
  return s;
}

HeadImportanceMap map_of(std::vector<std::vector<double>> imp) {
  HeadImportanceMap m;
  m.imp = std::move(imp);
  m.tokens = 1;
  return m;
}

/// Cyclic Jacobi eigen-solver for a symmetric matrix, independent of the library.
void jacobi_eigen(std::vector<double> a, std::size_t n, std::vector<double>& values,
                  std::vector<double>& vectors) {
  vectors.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) vectors[i * n + i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p * n + q]) < 1e-300) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2 * a[p * n + q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = vectors[k * n + p], vkq = vectors[k * n + q];
          vectors[k * n + p] = c * vkp - s * vkq;
          vectors[k * n + q] = s * vkp + c * vkq;
        }
      }
  }
  values.resize(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = a[i * n + i];
}

}  // namespace

TEST_CASE("head_importance examples") {
  auto s = single_head({0.5, 0.5, 0.5});
  CHECK(head_importance(s).imp[0][0] == 0.5);
  s = single_head({0.2, 0.6});
  CHECK(std::abs(head_importance(s).imp[0][0] - 0.4) < 1e-15);
  CHECK(head_importance(s).tokens == 2);

  // Flat pooling: lengths 1 and 3 make |T| = 4, not a mean of two means.
  const std::vector<GateStats> passes{single_head({0.8}), single_head({0.2, 0.2, 0.2})};
  const auto pooled = head_importance(std::span<const GateStats>(passes));
  CHECK(pooled.tokens == 4);
  CHECK(std::abs(pooled.imp[0][0] - 0.35) < 1e-15);

  GateStats empty;
  empty.n_layers = 1;
  empty.n_heads = 1;
  CHECK_THROWS_AS(head_importance(empty), ShapeError);
}

TEST_CASE("head_importance is order independent") {
  std::mt19937_64 rng(30);
  std::vector<double> g(48);
  for (auto& x : g) x = std::uniform_real_distribution<double>(0, 1)(rng);
  const double a = head_importance(single_head(g, 4)).imp[0][0];
  std::shuffle(g.begin(), g.end(), rng);
  const double b = head_importance(single_head(g, 4)).imp[0][0];
  CHECK(std::abs(a - b) < 1e-15);
}

TEST_CASE("head_imbalance examples") {
  CHECK(head_imbalance(map_of({{0.4, 0.4, 0.4}})).overall == 0.0);
  CHECK(std::abs(head_imbalance(map_of({{1, 0, 0, 0}})).overall - std::sqrt(3.0)) < 1e-15);
  CHECK(std::abs(std::sqrt(3.0) - 1.7320508) < 1e-7);
  CHECK(std::abs(head_imbalance(map_of({{0.3, 0.1}})).overall - 0.5) < 1e-15);
  CHECK(head_imbalance(map_of({{0.0, 0.0}})).overall == 0.0);
  CHECK(head_imbalance(map_of({{0.7}})).overall == 0.0);

  const auto r = head_imbalance(map_of({{0.3, 0.1, 0.2}, {1, 0, 0}}));
  CHECK(r.n_layers == 2);
  CHECK(std::abs(r.overall - (r.cv_per_layer[0] + r.cv_per_layer[1]) / 2) < 1e-12);
}

TEST_CASE("CV is scale invariant") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(uniform_int(rng, 1, 8));
    for (auto& x : v) x = std::uniform_real_distribution<double>(0.01, 1)(rng);
    const double c = std::uniform_real_distribution<double>(0.1, 10)(rng);
    std::vector<double> w = v;
    for (auto& x : w) x *= c;
    CHECK(std::abs(coefficient_of_variation(v) - coefficient_of_variation(w)) < 1e-12);
    CHECK(coefficient_of_variation(v) >= 0.0);
  }
}

TEST_CASE("sink_ratio examples") {
  CHECK(std::abs(sink_ratio(std::vector<double>{0.2, 0.6, 0.4}) - 0.4) < 1e-15);

  // T = 1 Vanilla: the only token is the sink.
  GateStats s;
  s.variant = AttentionVariant::Vanilla;
  s.n_layers = s.n_heads = s.batch = s.seq = 1;
  s.gate.push_back(Tensor<double>({1, 1}, 0.0));
  s.lse.push_back(Tensor<double>({1, 1}, 0.0));
  s.sink_weight.push_back(Tensor<double>({1, 1}, 1.0));
  CHECK(sink_ratio(s).alpha[0][0] == 1.0);

  auto open = single_head({1.0, 1.0, 1.0});
  CHECK(sink_ratio(open).alpha[0][0] == 0.0);

  GateStats gated;
  gated.variant = AttentionVariant::Gated;
  gated.n_layers = gated.n_heads = gated.batch = gated.seq = 1;
  gated.gate.push_back(Tensor<double>({1, 1}, 0.5));
  gated.lse.push_back(Tensor<double>({1, 1}, 0.0));
  CHECK_THROWS_AS(sink_ratio(gated), ShapeError);
}

TEST_CASE("value_l2_norms examples") {
  CHECK(value_l2_norms(Tensor<double>({3}, 0.0))[0] == 0.0);
  CHECK(value_l2_norms(Tensor<double>({3}, {0, 1, 0}))[0] == 1.0);
  const auto n = value_l2_norms(Tensor<double>({2, 2}, {3, 4, 0, 0}));
  CHECK(n.shape() == Shape{2});
  CHECK(n[0] == 5.0);
  CHECK(n[1] == 0.0);
}

TEST_CASE("select_top_m_heads examples and properties") {
  const auto imp = map_of({{0.9, 0.1, 0.5, 0.5}});
  CHECK(select_top_m_heads(imp, 0)[0].empty());
  CHECK(select_top_m_heads(imp, 4)[0] == std::vector<std::size_t>{0, 1, 2, 3});
  CHECK(select_top_m_heads(imp, 2)[0] == std::vector<std::size_t>{0, 2});
  CHECK_THROWS_AS(select_top_m_heads(imp, 5), ShapeError);

  std::mt19937_64 rng(32);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> v(8);
    for (auto& x : v) x = std::round(std::uniform_real_distribution<double>(0, 4)(rng)) / 4;
    const auto m = map_of({v});
    std::vector<std::size_t> prev;
    for (std::size_t k = 0; k <= 8; ++k) {
      const auto sel = select_top_m_heads(m, k)[0];
      CHECK(sel == select_top_m_heads(m, k)[0]);
      CHECK(sel.size() == k);
      CHECK(std::includes(sel.begin(), sel.end(), prev.begin(), prev.end()));
      prev = sel;
    }
  }
}

TEST_CASE("pca_2d examples") {
  const auto p = pca_2d(Tensor<double>({3, 2}, {1, 0, -1, 0, 0, 0}));
  CHECK(std::abs(p.components[0] - 1.0) < 1e-12);
  CHECK(std::abs(p.components[1]) < 1e-12);
  CHECK(std::abs(p.projections[0] - 1.0) < 1e-12);
  CHECK(std::abs(p.projections[2] + 1.0) < 1e-12);
  CHECK(std::abs(p.projections[4]) < 1e-12);

  const auto line = pca_2d(Tensor<double>({4, 3}, {0, 0, 0, 1, 2, 3, 2, 4, 6, -1, -2, -3}));
  CHECK(std::abs(line.explained_variance[1]) < 1e-12);
  CHECK(std::abs(line.explained_ratio[0] - 1.0) < 1e-12);

  CHECK_THROWS_AS(pca_2d(Tensor<double>({3, 2}, 1.0)), ShapeError);
  CHECK_THROWS_AS(pca_2d(Tensor<double>({1, 2}, {1, 2})), ShapeError);
}

TEST_CASE("pca_2d matches a Jacobi eigensolver oracle") {
  std::mt19937_64 rng(33);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 50, d = 8;
    auto x = random_tensor<double>({n, d}, rng);
    // Anisotropic cloud so the top two eigenvalues are well separated.
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) x[i * d + j] *= 1.0 + 3.0 * static_cast<double>(d - j) / d;
    const auto p = pca_2d(x);

    std::vector<double> mean(d, 0.0), cov(d * d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) mean[j] += x[i * d + j] / n;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < d; ++b)
          cov[a * d + b] += (x[i * d + a] - mean[a]) * (x[i * d + b] - mean[b]) / n;
    std::vector<double> vals, vecs;
    jacobi_eigen(cov, d, vals, vecs);
    std::vector<std::size_t> order(d);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return vals[a] > vals[b]; });
    const double total = std::accumulate(vals.begin(), vals.end(), 0.0);

    for (std::size_t c = 0; c < 2; ++c) {
      std::vector<double> e(d);
      for (std::size_t j = 0; j < d; ++j) e[j] = vecs[j * d + order[c]];
      std::size_t big = 0;
      for (std::size_t j = 1; j < d; ++j)
        if (std::abs(e[j]) > std::abs(e[big])) big = j;
      if (e[big] < 0)
        for (auto& v : e) v = -v;
      CHECK(std::abs(p.explained_variance[c] - vals[order[c]]) < 1e-8);
      CHECK(std::abs(p.explained_ratio[c] - vals[order[c]] / total) < 1e-8);
      for (std::size_t j = 0; j < d; ++j) CHECK(std::abs(p.components[c * d + j] - e[j]) < 1e-8);
      for (std::size_t i = 0; i < n; ++i) {
        double proj = 0;
        for (std::size_t j = 0; j < d; ++j) proj += (x[i * d + j] - mean[j]) * e[j];
        CHECK(std::abs(p.projections[i * 2 + c] - proj) < 1e-8);
      }
    }
    double dot = 0, n0 = 0, n1 = 0;
    for (std::size_t j = 0; j < d; ++j) {
      dot += p.components[j] * p.components[d + j];
      n0 += p.components[j] * p.components[j];
      n1 += p.components[d + j] * p.components[d + j];
    }
    CHECK(std::abs(dot) < 1e-10);
    CHECK(std::abs(n0 - 1) < 1e-10);
    CHECK(std::abs(n1 - 1) < 1e-10);
  }
}
