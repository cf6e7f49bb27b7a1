#include "smoe/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include "json.hpp"
#include "smoe/ops.hpp"

namespace smoe {

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("train config: " + msg); };
  if (batch_size == 0) fail("batch_size must be >= 1");
  if (seq_len == 0) fail("seq_len must be >= 1");
  if (!(decay_frac > 0.0 && decay_frac <= 1.0)) fail("decay_frac must lie in (0, 1]");
  if (!(lr_peak >= 0.0) || !std::isfinite(lr_peak)) fail("lr_peak must be finite and >= 0");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (!(grad_clip >= 0.0)) fail("grad_clip must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be > 0");
  if (eval_every == 0) fail("eval_every must be >= 1");
  if (!(valid_frac > 0.0 && valid_frac < 1.0)) fail("valid_frac must lie in (0, 1)");
}

std::size_t budget_steps(std::size_t n_params, std::size_t batch_size, std::size_t seq_len) {
  const std::size_t per_step = batch_size * seq_len;
  return (20 * n_params + per_step - 1) / per_step;
}

// ---------------------------------------------------------------------------
// data

std::vector<std::int32_t> tokenize_bytes(std::string_view text) {
  std::vector<std::int32_t> ids;
  ids.reserve(text.size() + 1);
  ids.push_back(kBosToken);
  for (unsigned char c : text) ids.push_back(c);
  return ids;
}

std::string decode_tokens(std::span<const std::int32_t> ids) {
  std::string out;
  for (std::int32_t id : ids) {
    if (id == kBosToken) continue;
    if (id < 0 || id > 255) throw std::invalid_argument("decode_tokens: id " + std::to_string(id));
    out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

Corpus Corpus::from_text(std::string text, double valid_frac) {
  if (!(valid_frac > 0.0 && valid_frac < 1.0)) throw std::invalid_argument("valid_frac must lie in (0, 1)");
  const auto n_valid = static_cast<std::size_t>(std::floor(static_cast<double>(text.size()) * valid_frac));
  Corpus c;
  c.valid = text.substr(text.size() - n_valid);
  text.resize(text.size() - n_valid);
  c.train = std::move(text);
  return c;
}

Corpus Corpus::load(const std::string& path, double valid_frac) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("cannot open corpus '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (text.empty()) throw std::invalid_argument("corpus '" + path + "' is empty");
  return from_text(std::move(text), valid_frac);
}

TokenBatch window_batch(std::string_view text, std::span<const std::size_t> offsets,
                        std::size_t seq_len) {
  if (offsets.empty() || seq_len == 0) throw ShapeError("window_batch: empty batch");
  TokenBatch b;
  b.batch = offsets.size();
  b.seq = seq_len;
  b.ids.reserve(b.batch * seq_len);
  b.targets.reserve(b.batch * seq_len);
  for (std::size_t off : offsets) {
    if (off + seq_len > text.size()) {
      throw ShapeError("window_batch: window at " + std::to_string(off) + " runs past the text");
    }
    b.ids.push_back(kBosToken);
    for (std::size_t i = 0; i + 1 < seq_len; ++i)
      b.ids.push_back(static_cast<unsigned char>(text[off + i]));
    for (std::size_t i = 0; i < seq_len; ++i)
      b.targets.push_back(static_cast<unsigned char>(text[off + i]));
  }
  b.mask.assign(b.batch * seq_len, 1);
  return b;
}

TokenBatch sample_batch(std::string_view text, std::size_t batch_size, std::size_t seq_len,
                        std::mt19937_64& rng) {
  if (text.size() < seq_len) {
    throw std::invalid_argument("corpus holds " + std::to_string(text.size()) +
                                " bytes, fewer than one window of " + std::to_string(seq_len));
  }
  std::uniform_int_distribution<std::size_t> pick(0, text.size() - seq_len);
  std::vector<std::size_t> offsets(batch_size);
  for (auto& o : offsets) o = pick(rng);
  return window_batch(text, offsets, seq_len);
}

std::vector<TokenBatch> sequential_batches(std::string_view text, std::size_t seq_len,
                                           std::size_t batch_size) {
  if (text.empty()) throw std::invalid_argument("sequential_batches: empty text");
  std::vector<TokenBatch> out;
  const std::size_t full = text.size() / seq_len;
  for (std::size_t w = 0; w < full; w += batch_size) {
    std::vector<std::size_t> offsets;
    for (std::size_t i = w; i < std::min(full, w + batch_size); ++i) offsets.push_back(i * seq_len);
    out.push_back(window_batch(text, offsets, seq_len));
  }
  const std::size_t rest = text.size() - full * seq_len;
  if (rest > 0) {
    const std::size_t off = full * seq_len;
    out.push_back(window_batch(text, std::span<const std::size_t>(&off, 1), rest));
  }
  return out;
}

// ---------------------------------------------------------------------------
// optimization

double lr_at(std::size_t step, std::size_t steps, double lr_peak, double decay_frac) {
  if (steps == 0) throw std::invalid_argument("lr_at: steps must be >= 1");
  if (step > steps) {
    throw std::out_of_range("lr_at: step " + std::to_string(step) + " beyond " + std::to_string(steps));
  }
  const double total = static_cast<double>(steps);
  const double start = (1.0 - decay_frac) * total;
  const double s = static_cast<double>(step);
  if (s < start) return lr_peak;
  return lr_peak * (total - s) / (total - start);
}

template <typename T>
AdamState<T> AdamState<T>::like(const std::vector<Tensor<T>>& params) {
  AdamState<T> s;
  for (const auto& p : params) {
    s.m.emplace_back(p.shape());
    s.v.emplace_back(p.shape());
  }
  return s;
}

template <typename T>
void adamw_step(std::vector<Tensor<T>>& params, const std::vector<Tensor<T>>& grads,
                AdamState<T>& state, double lr, const AdamHyper& hyper,
                std::span<const std::uint8_t> decay) {
  if (grads.size() != params.size() || state.m.size() != params.size() ||
      state.v.size() != params.size() || (!decay.empty() && decay.size() != params.size())) {
    throw ShapeError("adamw_step: params, grads, moments and decay mask must align");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads[i].same_shape(params[i]) || !state.m[i].same_shape(params[i]) ||
        !state.v[i].same_shape(params[i])) {
      throw ShapeError("adamw_step: shape mismatch for tensor " + std::to_string(i));
    }
    require_finite(grads[i].data(), "adamw_step gradient " + std::to_string(i));
  }
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double bc1 = 1.0 - std::pow(hyper.beta1, t);
  const double bc2 = 1.0 - std::pow(hyper.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double wd = (decay.empty() || decay[i]) ? hyper.weight_decay : 0.0;
    auto w = params[i].data();
    const auto g = grads[i].data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      const double mj = hyper.beta1 * static_cast<double>(m[j]) + (1.0 - hyper.beta1) * gj;
      const double vj = hyper.beta2 * static_cast<double>(v[j]) + (1.0 - hyper.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = (mj / bc1) / (std::sqrt(vj / bc2) + hyper.eps);
      const double wj = static_cast<double>(w[j]);
      w[j] = static_cast<T>(wj - lr * (update + wd * wj));
    }
  }
}

template <typename T>
double clip_global_norm(std::vector<Tensor<T>>& grads, double max_norm) {
  double sq = 0;
  for (const auto& g : grads)
    for (T x : g.data()) sq += static_cast<double>(x) * static_cast<double>(x);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads)
      for (auto& x : g.data()) x = static_cast<T>(static_cast<double>(x) * s);
  }
  return norm;
}

// ---------------------------------------------------------------------------
// training

TrainState TrainState::fresh(const ModelConfig& model_config, std::uint64_t data_seed) {
  TrainState s;
  s.model = Model<float>::init(model_config);
  s.adam = AdamState<float>::like(s.model.params);
  s.rng.seed(data_seed);
  return s;
}

void MetricsLog::append(MetricsRecord record) {
  if (!records.empty() && record.step <= records.back().step) {
    throw std::logic_error("MetricsLog: steps must be strictly increasing");
  }
  records.push_back(std::move(record));
}

std::string MetricsLog::to_jsonl() const {
  std::string out;
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["loss_base"] = r.loss_base;
    j["loss_aux"] = r.loss_aux;
    j["lr"] = r.lr;
    j["cv_per_layer"] = r.cv_per_layer;
    j["head_imbalance"] = r.head_imbalance;
    j["wall_ms"] = r.wall_ms;
    out += j.dump();
    out += '\n';
  }
  return out;
}

void MetricsLog::write(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write metrics log '" + path + "'");
  out << to_jsonl();
}

const MetricsRecord* MetricsLog::at_step(std::size_t step) const {
  for (const auto& r : records)
    if (r.step == step) return &r;
  return nullptr;
}

StepOutcome train_step(TrainState& state, const TrainConfig& config, std::string_view train_text) {
  if (config.steps == 0) throw std::invalid_argument("train_step: steps must be resolved before training");
  const std::size_t step = state.step;
  try {
    const TokenBatch batch = sample_batch(train_text, config.batch_size, config.seq_len, state.rng);
    Tape<float> tape;
    const ModelGraph<float> g = build_graph(tape, state.model, batch, true);
    const Var base = ag::cross_entropy(tape, g.logits, std::span(batch.targets), std::span(batch.mask));
    std::vector<Var> imps;
    for (Var gate : g.gates) imps.push_back(ag::column_mean(tape, gate));
    const Var aux = ag::aux_loss(tape, std::span<const Var>(imps), config.balance, state.shared);
    const Var total = ag::total_loss(tape, base, aux);

    StepOutcome out;
    out.loss_base = tape.value(base).item();
    out.loss_aux = tape.value(aux).item();
    total_loss(out.loss_base, out.loss_aux);  // throws on NaN / inf
    HeadImportanceMap imp;
    imp.tokens = batch.batch * batch.seq;
    for (Var v : imps) {
      const auto d = tape.value(v).data();
      imp.imp.emplace_back(d.begin(), d.end());
    }
    out.imbalance = head_imbalance(imp);

    tape.backward(total);
    std::vector<Tensor<float>> grads;
    grads.reserve(g.params.size());
    for (Var p : g.params) grads.push_back(tape.grad(p));
    clip_global_norm(grads, config.grad_clip);

    std::vector<std::uint8_t> decay(grads.size());
    for (std::size_t i = 0; i < grads.size(); ++i) decay[i] = state.model.params[i].rank() >= 2;
    out.lr = lr_at(step, config.steps, config.lr_peak, config.decay_frac);
    adamw_step(state.model.params, grads, state.adam, out.lr,
               AdamHyper{config.beta1, config.beta2, config.adam_eps, config.weight_decay}, decay);
    state.step += 1;
    return out;
  } catch (const NumericError& e) {
    throw NumericError("step " + std::to_string(step) + ": " + e.what());
  }
}

MetricsLog train_loop(TrainState& state, const TrainConfig& config, std::string_view train_text,
                      std::size_t stop_at, const std::function<void(const MetricsRecord&)>& on_record) {
  config.validate();
  if (config.steps == 0) throw std::invalid_argument("train_loop: steps must be >= 1");
  MetricsLog log;
  const auto start = std::chrono::steady_clock::now();
  const std::size_t end = std::min(config.steps, stop_at);
  while (state.step < end) {
    const std::size_t step = state.step;
    const StepOutcome out = train_step(state, config, train_text);
    if (step % config.eval_every != 0) continue;
    MetricsRecord r;
    r.step = step;
    r.loss_base = out.loss_base;
    r.loss_aux = out.loss_aux;
    r.lr = out.lr;
    r.cv_per_layer = out.imbalance.cv_per_layer;
    r.head_imbalance = out.imbalance.overall;
    if (config.wall_clock) {
      r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    }
    if (on_record) on_record(r);
    log.append(std::move(r));
  }
  return log;
}

template <typename T>
EvalResult evaluate_bpb(const Model<T>& model, std::string_view text, std::size_t seq_len,
                        std::size_t batch_size, const ForwardOptions& options) {
  if (text.empty()) throw std::invalid_argument("evaluate_bpb: empty data");
  EvalResult r;
  const std::size_t V = model.config.vocab_size;
  for (const TokenBatch& b : sequential_batches(text, seq_len, batch_size)) {
    const ForwardResult<T> f = forward(model, b, options);
    for (std::size_t n = 0; n < b.batch * b.seq; ++n) {
      if (!b.mask[n]) continue;
      const std::span<const T> row = f.logits.data().subspan(n * V, V);
      r.nll_nats += static_cast<double>(logsumexp(row)) -
                    static_cast<double>(row[static_cast<std::size_t>(b.targets[n])]);
      r.tokens += 1;
    }
  }
  r.bytes = r.tokens;  // every target is one byte; BOS is never a target
  r.bpb = r.nll_nats / (std::log(2.0) * static_cast<double>(r.bytes));
  return r;
}

template <typename T>
std::vector<GateStats> collect_gate_stats(const Model<T>& model, std::string_view text,
                                          std::size_t seq_len, std::size_t batch_size,
                                          std::size_t max_windows) {
  std::vector<GateStats> out;
  std::size_t used = 0;
  for (const TokenBatch& b : sequential_batches(text, seq_len, batch_size)) {
    if (used >= max_windows) break;
    out.push_back(forward(model, b).stats);
    used += b.batch;
  }
  return out;
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adamw_step<float>(std::vector<Tensor<float>>&, const std::vector<Tensor<float>>&,
                                AdamState<float>&, double, const AdamHyper&, std::span<const std::uint8_t>);
template void adamw_step<double>(std::vector<Tensor<double>>&, const std::vector<Tensor<double>>&,
                                 AdamState<double>&, double, const AdamHyper&,
                                 std::span<const std::uint8_t>);
template double clip_global_norm<float>(std::vector<Tensor<float>>&, double);
template double clip_global_norm<double>(std::vector<Tensor<double>>&, double);
template EvalResult evaluate_bpb<float>(const Model<float>&, std::string_view, std::size_t,
                                        std::size_t, const ForwardOptions&);
template EvalResult evaluate_bpb<double>(const Model<double>&, std::string_view, std::size_t,
                                         std::size_t, const ForwardOptions&);
template std::vector<GateStats> collect_gate_stats<float>(const Model<float>&, std::string_view,
                                                          std::size_t, std::size_t, std::size_t);
template std::vector<GateStats> collect_gate_stats<double>(const Model<double>&, std::string_view,
                                                           std::size_t, std::size_t, std::size_t);

}  // namespace smoe
