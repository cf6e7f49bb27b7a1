#include "smoe/balance.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <functional>
#include <memory>
#include <string>

namespace smoe {

std::string_view to_string(BalanceMode mode) {
  switch (mode) {
    case BalanceMode::Off: return "off";
    case BalanceMode::Scratch: return "scratch";
    case BalanceMode::FineTune: return "finetune";
  }
  return "unknown";
}

BalanceMode parse_balance_mode(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "off" || lower == "none") return BalanceMode::Off;
  if (lower == "scratch") return BalanceMode::Scratch;
  if (lower == "finetune" || lower == "fine-tune" || lower == "fine_tune") return BalanceMode::FineTune;
  throw std::invalid_argument("unknown balance mode '" + std::string(name) +
                              "' (expected off, scratch or finetune)");
}

void BalanceConfig::validate(std::size_t n_heads) const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
    throw std::invalid_argument("balance.lambda must be finite and >= 0");
  }
  if (mode == BalanceMode::FineTune && m > n_heads) {
    throw std::invalid_argument("balance.m = " + std::to_string(m) + " exceeds " +
                                std::to_string(n_heads) + " heads");
  }
}

std::size_t default_shared_heads(std::size_t n_heads) { return (n_heads + 3) / 4; }

namespace {

void check_lambda(double lambda) {
  if (!(lambda >= 0.0)) throw std::invalid_argument("aux loss: lambda must be >= 0");
}

/// Returns CV^2 over `values` and writes dCV^2/dx into `grad` (may be null).
double cv_squared(std::span<const double> values, double* grad) {
  const std::size_t n = values.size();
  if (grad) std::fill(grad, grad + n, 0.0);
  if (n <= 1) return 0.0;
  // Uniform values: exactly 0, not a rounding residue of the mean.
  if (std::adjacent_find(values.begin(), values.end(), std::not_equal_to<>()) == values.end()) return 0.0;
  double mean = 0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(n);
  if (mean < 1e-12) return 0.0;
  double var = 0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  if (grad) {
    const double c = 2.0 / (static_cast<double>(n) * mean * mean);
    for (std::size_t i = 0; i < n; ++i) grad[i] = c * ((values[i] - mean) - var / mean);
  }
  return var / (mean * mean);
}

std::vector<std::size_t> routed_heads(std::size_t heads, const std::vector<std::size_t>& shared) {
  std::vector<std::size_t> routed;
  for (std::size_t h = 0; h < heads; ++h)
    if (std::find(shared.begin(), shared.end(), h) == shared.end()) routed.push_back(h);
  return routed;
}

void check_shared(const HeadSets& shared, std::size_t layers, std::size_t heads) {
  if (shared.size() != layers) {
    throw ShapeError("aux_loss_finetune: need one shared set per layer (" + std::to_string(layers) +
                     "), got " + std::to_string(shared.size()));
  }
  for (const auto& s : shared)
    for (std::size_t h : s)
      if (h >= heads) throw ShapeError("aux_loss_finetune: shared head index out of range");
}

/// Per layer: which heads enter the CV and the coefficient in front of it.
struct LayerTerm {
  std::vector<std::size_t> heads;
  double coeff = 0;
};

std::vector<LayerTerm> scratch_terms(std::size_t layers, std::size_t heads) {
  std::vector<std::size_t> all(heads);
  for (std::size_t h = 0; h < heads; ++h) all[h] = h;
  return std::vector<LayerTerm>(layers, LayerTerm{all, static_cast<double>(heads)});
}

std::vector<LayerTerm> finetune_terms(std::size_t layers, std::size_t heads, const HeadSets& shared) {
  check_shared(shared, layers, heads);
  std::vector<LayerTerm> terms;
  for (std::size_t l = 0; l < layers; ++l) {
    auto routed = routed_heads(heads, shared[l]);
    const double coeff = static_cast<double>(routed.size());
    terms.push_back({std::move(routed), coeff});
  }
  return terms;
}

double evaluate_terms(const std::vector<std::vector<double>>& imp, const std::vector<LayerTerm>& terms,
                      double lambda) {
  double total = 0;
  std::vector<double> sub;
  for (std::size_t l = 0; l < terms.size(); ++l) {
    sub.clear();
    for (std::size_t h : terms[l].heads) sub.push_back(imp[l][h]);
    total += terms[l].coeff * cv_squared(sub, nullptr);
  }
  return lambda * total;
}

std::size_t uniform_heads(const std::vector<std::vector<double>>& imp) {
  if (imp.empty()) throw ShapeError("aux loss: no layers");
  const std::size_t heads = imp.front().size();
  for (const auto& l : imp)
    if (l.size() != heads || heads == 0) throw ShapeError("aux loss: ragged importance map");
  return heads;
}

}  // namespace

double aux_loss_scratch(const std::vector<std::vector<double>>& imp_per_layer, double lambda) {
  check_lambda(lambda);
  const std::size_t heads = uniform_heads(imp_per_layer);
  return evaluate_terms(imp_per_layer, scratch_terms(imp_per_layer.size(), heads), lambda);
}

double aux_loss_finetune(const std::vector<std::vector<double>>& imp_per_layer, double lambda,
                         const HeadSets& shared) {
  check_lambda(lambda);
  const std::size_t heads = uniform_heads(imp_per_layer);
  return evaluate_terms(imp_per_layer, finetune_terms(imp_per_layer.size(), heads, shared), lambda);
}

double total_loss(double base, double aux) {
  if (!std::isfinite(base) || !std::isfinite(aux)) {
    throw NumericError("total_loss: non-finite component (base " + std::to_string(base) + ", aux " +
                       std::to_string(aux) + ")");
  }
  return base + aux;
}

namespace ag {

namespace {

template <typename T>
Var aux_from_terms(Tape<T>& tape, std::span<const Var> imp, T lambda, std::vector<LayerTerm> terms) {
  check_lambda(static_cast<double>(lambda));
  const std::size_t layers = imp.size();
  // grads[l][h] = d loss / d imp[l][h]
  auto grads = std::make_shared<std::vector<std::vector<double>>>(layers);
  double total = 0;
  std::vector<double> sub, g;
  for (std::size_t l = 0; l < layers; ++l) {
    const auto v = tape.value(imp[l]).data();
    auto& gl = (*grads)[l];
    gl.assign(v.size(), 0.0);
    sub.clear();
    for (std::size_t h : terms[l].heads) sub.push_back(static_cast<double>(v[h]));
    g.resize(sub.size());
    total += terms[l].coeff * cv_squared(sub, g.data());
    for (std::size_t i = 0; i < sub.size(); ++i)
      gl[terms[l].heads[i]] = static_cast<double>(lambda) * terms[l].coeff * g[i];
  }
  std::vector<Var> inputs(imp.begin(), imp.end());
  bool rg = false;
  for (Var v : inputs) rg = rg || tape.requires_grad(v);
  const Var y = tape.push(Tensor<T>::scalar(static_cast<T>(static_cast<double>(lambda) * total)), rg,
                          "aux_loss");
  if (rg) {
    tape.on_backward([inputs, grads, y](Tape<T>& t) {
      if (!t.has_grad(y)) return;
      const double gy = static_cast<double>(t.grad_ref(y)[0]);
      for (std::size_t l = 0; l < inputs.size(); ++l) {
        if (!t.requires_grad(inputs[l])) continue;
        auto gi = t.grad_ref(inputs[l]).data();
        for (std::size_t h = 0; h < gi.size(); ++h) gi[h] += static_cast<T>(gy * (*grads)[l][h]);
      }
    });
  }
  return y;
}

template <typename T>
std::size_t tape_heads(Tape<T>& tape, std::span<const Var> imp) {
  if (imp.empty()) throw ShapeError("aux loss: no layers");
  const std::size_t heads = tape.value(imp[0]).size();
  for (Var v : imp)
    if (tape.value(v).rank() != 1 || tape.value(v).size() != heads) {
      throw ShapeError("aux loss: each layer's importance must be a (H) vector");
    }
  return heads;
}

}  // namespace

template <typename T>
Var aux_loss_scratch(Tape<T>& tape, std::span<const Var> imp_per_layer, T lambda) {
  const std::size_t heads = tape_heads(tape, imp_per_layer);
  return aux_from_terms(tape, imp_per_layer, lambda, scratch_terms(imp_per_layer.size(), heads));
}

template <typename T>
Var aux_loss_finetune(Tape<T>& tape, std::span<const Var> imp_per_layer, T lambda,
                      const HeadSets& shared) {
  const std::size_t heads = tape_heads(tape, imp_per_layer);
  return aux_from_terms(tape, imp_per_layer, lambda,
                        finetune_terms(imp_per_layer.size(), heads, shared));
}

template <typename T>
Var aux_loss(Tape<T>& tape, std::span<const Var> imp_per_layer, const BalanceConfig& config,
             const HeadSets& shared) {
  switch (config.mode) {
    case BalanceMode::Off: return tape.constant(Tensor<T>::scalar(T(0)));
    case BalanceMode::Scratch:
      return aux_loss_scratch(tape, imp_per_layer, static_cast<T>(config.lambda));
    case BalanceMode::FineTune:
      return aux_loss_finetune(tape, imp_per_layer, static_cast<T>(config.lambda), shared);
  }
  throw std::logic_error("aux_loss: bad mode");
}

template <typename T>
Var total_loss(Tape<T>& tape, Var base, Var aux) {
  if (tape.value(base).size() != 1 || tape.value(aux).size() != 1) {
    throw ShapeError("total_loss: components must be scalars");
  }
  return add(tape, base, aux);
}

#define SMOE_INSTANTIATE_BALANCE(T)                                                          \
  template Var aux_loss_scratch<T>(Tape<T>&, std::span<const Var>, T);                       \
  template Var aux_loss_finetune<T>(Tape<T>&, std::span<const Var>, T, const HeadSets&);     \
  template Var aux_loss<T>(Tape<T>&, std::span<const Var>, const BalanceConfig&, const HeadSets&); \
  template Var total_loss<T>(Tape<T>&, Var, Var);

SMOE_INSTANTIATE_BALANCE(float)
SMOE_INSTANTIATE_BALANCE(double)

#undef SMOE_INSTANTIATE_BALANCE

}  // namespace ag

}  // namespace smoe
