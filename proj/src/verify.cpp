#include "smoe/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>

#include "smoe/attention.hpp"
#include "smoe/balance.hpp"

namespace smoe {

namespace {

struct Case {
  AttentionShape shape;
  std::vector<double> q, k, v, sink;
};

std::mt19937_64 case_rng(std::uint64_t seed, std::size_t index, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), stream};
  return std::mt19937_64(seq);
}

Case make_case(std::uint64_t seed, std::size_t index) {
  auto rng = case_rng(seed, index, 0);
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  Case c;
  c.shape = {pick(1, 2), pick(1, 64), pick(1, 8), pick(1, 8)};
  std::uniform_real_distribution<double> u(-2.0, 2.0), s(-4.0, 4.0);
  const std::size_t n = c.shape.rows() * c.shape.width();
  for (auto* buf : {&c.q, &c.k, &c.v}) {
    buf->resize(n);
    for (auto& x : *buf) x = u(rng);
  }
  c.sink.resize(c.shape.heads);
  for (auto& x : c.sink) x = s(rng);
  return c;
}

template <typename T, typename U>
std::vector<T> as(const std::vector<U>& x) {
  return std::vector<T>(x.begin(), x.end());
}

/// Head h of sample b from packed (rows, H * d_h) storage.
template <typename T>
Tensor<T> slice(const std::vector<T>& packed, const AttentionShape& s, std::size_t b, std::size_t h) {
  Tensor<T> out({s.seq, s.head_dim});
  for (std::size_t t = 0; t < s.seq; ++t)
    for (std::size_t i = 0; i < s.head_dim; ++i)
      out[t * s.head_dim + i] = packed[(b * s.seq + t) * s.width() + h * s.head_dim + i];
  return out;
}

/// Rows [from, T) of a (T, C) matrix, or of a (T) vector.
template <typename T>
Tensor<T> rows_from(const Tensor<T>& x, std::size_t from) {
  const std::size_t n = x.extent(0), c = x.rank() == 2 ? x.extent(1) : 1;
  Shape shape = x.shape();
  shape[0] = n - from;
  Tensor<T> out(shape);
  std::copy(x.data().begin() + static_cast<std::ptrdiff_t>(from * c), x.data().end(), out.data().begin());
  return out;
}

void append(std::vector<double>& dst, const Tensor<float>& t) { dst.insert(dst.end(), t.data().begin(), t.data().end()); }
void append(std::vector<double>& dst, const Tensor<double>& t) { dst.insert(dst.end(), t.data().begin(), t.data().end()); }

/// Per-case error pairs: both sides of the identity, flattened.
struct Sides {
  std::vector<double> a, b;
  double error() const { return a.empty() ? 0.0 : relative_error(a, b); }
};

template <typename T>
Sides vanilla_gate_sigmoid(const Case& c, bool corrupt) {
  const auto q = as<T>(c.q), k = as<T>(c.k);
  Sides s;
  if (c.shape.seq < 2) return s;
  for (std::size_t b = 0; b < c.shape.batch; ++b)
    for (std::size_t h = 0; h < c.shape.heads; ++h) {
      const auto z = scaled_logits(slice(q, c.shape, b, h), slice(k, c.shape, b, h), c.shape.head_dim);
      const auto from_weights = implicit_gate_from_weights<T>({AttentionVariant::Vanilla, vanilla_weights(z), {}});
      Tensor<T> z0({c.shape.seq});
      for (std::size_t t = 0; t < c.shape.seq; ++t) z0[t] = z[t * c.shape.seq] + static_cast<T>(corrupt ? 1e-3 : 0.0);
      const auto from_lse = implicit_gate_lse_vanilla(rows_from(lse_excluding_first(z), 1), rows_from(z0, 1));
      append(s.a, from_lse);
      append(s.b, rows_from(from_weights, 1));
    }
  return s;
}

template <typename T>
Sides sink_gate_sigmoid(const Case& c, bool corrupt) {
  const auto q = as<T>(c.q), k = as<T>(c.k);
  Sides s;
  for (std::size_t b = 0; b < c.shape.batch; ++b)
    for (std::size_t h = 0; h < c.shape.heads; ++h) {
      const auto z = scaled_logits(slice(q, c.shape, b, h), slice(k, c.shape, b, h), c.shape.head_dim);
      const T sink = static_cast<T>(c.sink[h]);
      const auto sm = sink_softmax(z, sink);
      const auto from_weights =
          implicit_gate_from_weights<T>({AttentionVariant::Sink, sm.token_weights, sm.sink_weight});
      const auto from_lse = implicit_gate_lse_sink(lse_tokens(z), static_cast<T>(sink + (corrupt ? 1e-3 : 0.0)));
      append(s.a, from_lse);
      append(s.b, from_weights);
    }
  return s;
}

/// O = A_0 v_0 + G * (renormalized tail) v for Vanilla, O = G * (renormalized) v for Sink.
template <typename T>
Sides renormalized_output(const Case& c) {
  const auto q = as<T>(c.q), k = as<T>(c.k), v = as<T>(c.v);
  const std::size_t n = c.shape.seq, dh = c.shape.head_dim;
  Sides s;
  for (std::size_t b = 0; b < c.shape.batch; ++b)
    for (std::size_t h = 0; h < c.shape.heads; ++h) {
      const auto vh = slice(v, c.shape, b, h);
      const auto z = scaled_logits(slice(q, c.shape, b, h), slice(k, c.shape, b, h), dh);

      if (n >= 2) {
        const auto w = vanilla_weights(z);
        Tensor<T> tail = rows_from(w, 1), a0({n - 1});
        for (std::size_t t = 0; t + 1 < n; ++t) {
          a0[t] = tail[t * n];
          tail[t * n] = T(0);
        }
        const auto rewritten = head_output(renormalized_weights(tail, a0), vh);
        const auto direct = rows_from(head_output(w, vh), 1);
        for (std::size_t t = 0; t + 1 < n; ++t)
          for (std::size_t i = 0; i < dh; ++i) {
            s.a.push_back(static_cast<double>(a0[t] * vh[i] + (T(1) - a0[t]) * rewritten[t * dh + i]));
            s.b.push_back(static_cast<double>(direct[t * dh + i]));
          }
      }

      const auto sm = sink_softmax(z, static_cast<T>(c.sink[h]));
      const auto rewritten = head_output(renormalized_weights(sm.token_weights, sm.sink_weight), vh);
      const auto direct = head_output(sm.token_weights, vh);
      for (std::size_t t = 0; t < n; ++t)
        for (std::size_t i = 0; i < dh; ++i) {
          s.a.push_back(static_cast<double>((T(1) - sm.sink_weight[t]) * rewritten[t * dh + i]));
          s.b.push_back(static_cast<double>(direct[t * dh + i]));
        }
    }
  return s;
}

/// Fused output and gate in precision T against the eager pipeline in f64 on
/// the same (rounded) inputs.
template <typename T>
Sides fused_eager(const Case& c, std::size_t& fused_peak, std::size_t& eager_peak) {
  const auto q = as<T>(c.q), k = as<T>(c.k), v = as<T>(c.v), sink = as<T>(c.sink);
  const auto qd = as<double>(q), kd = as<double>(k), vd = as<double>(v);
  const std::size_t n = c.shape.seq, dh = c.shape.head_dim, H = c.shape.heads;
  Sides s;
  for (SinkSlot slot : {SinkSlot::FirstToken, SinkSlot::Learned, SinkSlot::None}) {
    reset_attention_buffer_peak();
    const auto fused = fused_attention_forward<T>(slot, c.shape, q, k, v, sink);
    fused_peak = std::max(fused_peak, attention_buffer_peak());

    reset_attention_buffer_peak();
    Tensor<double> out({c.shape.rows(), c.shape.width()}), gate({c.shape.rows(), H});
    for (std::size_t b = 0; b < c.shape.batch; ++b)
      for (std::size_t h = 0; h < H; ++h) {
        const auto z = scaled_logits(slice(qd, c.shape, b, h), slice(kd, c.shape, b, h), dh);
        const auto vh = slice(vd, c.shape, b, h);
        Tensor<double> o, g({n}, 1.0);
        if (slot == SinkSlot::Learned) {
          const auto sm = sink_softmax(z, static_cast<double>(sink[h]));
          o = head_output(sm.token_weights, vh);
          g = implicit_gate_from_weights<double>({AttentionVariant::Sink, sm.token_weights, sm.sink_weight});
        } else {
          const auto w = vanilla_weights(z);
          o = head_output(w, vh);
          if (slot == SinkSlot::FirstToken) g = implicit_gate_from_weights<double>({AttentionVariant::Vanilla, w, {}});
        }
        for (std::size_t t = 0; t < n; ++t) {
          gate[(b * n + t) * H + h] = g[t];
          for (std::size_t i = 0; i < dh; ++i) out[(b * n + t) * c.shape.width() + h * dh + i] = o[t * dh + i];
        }
      }
    eager_peak = std::max(eager_peak, attention_buffer_peak());
    append(s.a, fused.out);
    append(s.b, out);
    append(s.a, fused.gate);
    append(s.b, gate);
  }
  return s;
}

/// Flagging every head must equal v_0 := 0 bit for bit.
Sides zero_value_identity(const Case& c) {
  Tensor<double> q({c.shape.rows(), c.shape.width()}, c.q), k({c.shape.rows(), c.shape.width()}, c.k),
      v({c.shape.rows(), c.shape.width()}, c.v);
  auto v0 = v;
  for (std::size_t b = 0; b < c.shape.batch; ++b)
    for (std::size_t i = 0; i < c.shape.width(); ++i) v0[b * c.shape.seq * c.shape.width() + i] = 0.0;
  const std::vector<std::uint8_t> all(c.shape.heads, 1);
  Sides s;
  append(s.a, zero_first_value_output(c.shape, q, k, v, all));
  append(s.b, fused_attention_forward<double>(SinkSlot::FirstToken, c.shape, q.data(), k.data(), v0.data(), {}).out);
  return s;
}

/// Finite differences through one attention layer plus the balance loss.
double layer_gradients(std::uint64_t seed, std::size_t index) {
  auto rng = case_rng(seed, index, 1);
  const auto variant = static_cast<AttentionVariant>(index % 3);
  const std::size_t H = 1 + rng() % 2, dh = 1 + rng() % 3, T = 2 + rng() % 5, d = H * dh;
  auto params = AttentionVariantParams<double>::init(variant, d, H, rng);
  std::uniform_real_distribution<double> u(-0.8, 0.8);
  auto fill = [&](Tensor<double>& t) {
    for (auto& x : t.data()) x = u(rng);
  };
  for (auto* t : {&params.w_q, &params.w_k, &params.w_v, &params.w_o}) fill(*t);
  if (params.sink) fill(*params.sink);
  if (params.w_theta) fill(*params.w_theta);
  Tensor<double> x({T, d}), ry({T, d}), rg({T, H});
  fill(x);
  fill(ry);
  fill(rg);

  std::vector<Tensor<double>*> leaves{&x, &params.w_q, &params.w_k, &params.w_v, &params.w_o};
  if (params.sink) leaves.push_back(&*params.sink);
  if (params.w_theta) leaves.push_back(&*params.w_theta);

  auto loss = [&](std::vector<Tensor<double>>* grads) {
    Tape<double> tape;
    std::vector<Var> vars;
    for (auto* t : leaves) vars.push_back(grads ? tape.variable(*t) : tape.constant(*t));
    ag::AttentionParamVars pv{vars[1], vars[2], vars[3], vars[4], {}, {}};
    if (params.sink) pv.sink = vars[5];
    if (params.w_theta) pv.w_theta = vars[5];
    const auto layer = ag::attention_layer(tape, vars[0], pv, variant, 1, T, H);
    Var total = ag::sum(tape, ag::mul(tape, layer.y, tape.constant(ry)));
    total = ag::add(tape, total, ag::sum(tape, ag::mul(tape, layer.gate, tape.constant(rg))));
    const Var imp = ag::column_mean(tape, layer.gate);
    total = ag::add(tape, total, ag::aux_loss_scratch<double>(tape, std::span<const Var>(&imp, 1), 0.5));
    const double value = tape.value(total)[0];
    if (grads) {
      tape.backward(total);
      for (Var p : vars) grads->push_back(tape.grad(p));
    }
    return value;
  };

  std::vector<Tensor<double>> grads;
  loss(&grads);
  double worst = 0;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    const Tensor<double> saved = *leaves[i];
    const auto fd = finite_diff_grad(
        [&](const Tensor<double>& probe) {
          *leaves[i] = probe;
          const double v = loss(nullptr);
          *leaves[i] = saved;
          return v;
        },
        saved);
    worst = std::max(worst, max_relative_error(grads[i].data(), fd.data(), 1e-6));
  }
  return worst;
}

struct Spec {
  const char* name;
  const char* precision;
  double tolerance;
};

const Spec kSpecs[] = {
    {"vanilla_gate_sigmoid", "f64", 1e-12}, {"vanilla_gate_sigmoid", "f32", 1e-6},
    {"sink_gate_sigmoid", "f64", 1e-12},    {"sink_gate_sigmoid", "f32", 1e-6},
    {"renormalized_output", "f64", 1e-12},  {"renormalized_output", "f32", 1e-6},
    {"fused_eager", "f64", 1e-12},          {"fused_eager", "f32", 1e-5},
    {"zero_value_identity", "f64", 0.0},    {"layer_gradients", "f64", 1e-4},
};

}  // namespace

double relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("relative_error: size mismatch");
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  if (std::isnan(diff)) return diff;
  return diff / std::max(scale, 1e-300);
}

const std::vector<std::string>& identity_names() {
  static const std::vector<std::string> names{"vanilla_gate_sigmoid", "sink_gate_sigmoid", "renormalized_output",
                                              "fused_eager", "zero_value_identity", "layer_gradients"};
  return names;
}

bool VerifyReport::pass() const {
  return std::all_of(results.begin(), results.end(), [](const IdentityResult& r) { return r.pass; }) &&
         fused_buffer_peak <= kFusedKeyBlock;
}

std::optional<nlohmann::ordered_json> VerifyReport::replay(const VerifyOptions& options) const {
  for (const auto& r : results) {
    if (r.pass || !r.first_failure) continue;
    nlohmann::ordered_json j;
    j["identity"] = r.name;
    j["precision"] = r.precision;
    j["seed"] = options.seed;
    j["case"] = *r.first_failure;
    j["corrupt_sink"] = options.corrupt_sink;
    j["max_error"] = r.max_error;
    j["tolerance"] = r.tolerance;
    return j;
  }
  return std::nullopt;
}

VerifyOptions options_from_replay(const nlohmann::json& replay) {
  VerifyOptions o;
  o.seed = replay.at("seed").get<std::uint64_t>();
  o.only_case = replay.at("case").get<std::size_t>();
  o.corrupt_sink = replay.value("corrupt_sink", false);
  o.only_identities = {replay.at("identity").get<std::string>()};
  o.cases = *o.only_case + 1;
  o.grad_cases = o.cases;
  return o;
}

VerifyReport run_identity_suite(const VerifyOptions& options) {
  if (options.cases == 0) throw std::invalid_argument("verify: cases must be >= 1");
  const auto start = std::chrono::steady_clock::now();
  auto wanted = [&](const std::string& name) {
    return options.only_identities.empty() ||
           std::find(options.only_identities.begin(), options.only_identities.end(), name) !=
               options.only_identities.end();
  };

  VerifyReport report;
  for (const auto& spec : kSpecs) {
    if (!wanted(spec.name)) continue;
    IdentityResult r;
    r.name = spec.name;
    r.precision = spec.precision;
    r.tolerance = spec.tolerance;
    report.results.push_back(r);
  }
  auto record = [&](const char* name, const char* precision, std::size_t index, double error) {
    for (auto& r : report.results) {
      if (r.name != name || r.precision != precision) continue;
      r.cases += 1;
      r.max_error = std::isnan(error) ? error : std::max(r.max_error, error);
      if (!(error <= r.tolerance) && !r.first_failure) {
        r.pass = false;
        r.first_failure = index;
      }
    }
  };

  const std::size_t first = options.only_case.value_or(0);
  const std::size_t last = options.only_case ? first + 1 : options.cases;
  for (std::size_t i = first; i < last; ++i) {
    const Case c = make_case(options.seed, i);
    if (wanted("vanilla_gate_sigmoid")) {
      record("vanilla_gate_sigmoid", "f64", i, vanilla_gate_sigmoid<double>(c, options.corrupt_sink).error());
      record("vanilla_gate_sigmoid", "f32", i, vanilla_gate_sigmoid<float>(c, options.corrupt_sink).error());
    }
    if (wanted("sink_gate_sigmoid")) {
      record("sink_gate_sigmoid", "f64", i, sink_gate_sigmoid<double>(c, options.corrupt_sink).error());
      record("sink_gate_sigmoid", "f32", i, sink_gate_sigmoid<float>(c, options.corrupt_sink).error());
    }
    if (wanted("renormalized_output")) {
      record("renormalized_output", "f64", i, renormalized_output<double>(c).error());
      record("renormalized_output", "f32", i, renormalized_output<float>(c).error());
    }
    if (wanted("fused_eager")) {
      record("fused_eager", "f64", i,
             fused_eager<double>(c, report.fused_buffer_peak, report.eager_buffer_peak).error());
      record("fused_eager", "f32", i,
             fused_eager<float>(c, report.fused_buffer_peak, report.eager_buffer_peak).error());
    }
    if (wanted("zero_value_identity")) record("zero_value_identity", "f64", i, zero_value_identity(c).error());
    if (wanted("layer_gradients") && (options.only_case || i < options.grad_cases))
      record("layer_gradients", "f64", i, layer_gradients(options.seed, i));
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace smoe
