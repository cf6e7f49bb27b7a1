#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "smoe/balance.hpp"
#include "smoe/checkpoint.hpp"
#include "smoe/config.hpp"
#include "smoe/experiments.hpp"
#include "smoe/verify.hpp"

namespace py = pybind11;
using namespace smoe;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

SinkSlot slot_for(const std::string& variant) {
  switch (parse_variant(variant)) {
    case AttentionVariant::Vanilla: return SinkSlot::FirstToken;
    case AttentionVariant::Sink: return SinkSlot::Learned;
    case AttentionVariant::Gated: return SinkSlot::None;
  }
  return SinkSlot::None;
}

/// q, k, v: (batch, seq, heads, head_dim). Returns (out, gate) with out in
/// the same layout and gate (batch, seq, heads). Gated returns the ungated
/// softmax output with gate 1; the learned gate needs the layer input.
py::tuple attention(const Array& q, const Array& k, const Array& v, const std::string& variant,
                    std::optional<Array> sink) {
  if (q.ndim() != 4) throw py::value_error("q must be (batch, seq, heads, head_dim)");
  for (const Array* a : {&k, &v})
    for (int d = 0; d < 4; ++d)
      if (a->ndim() != 4 || a->shape(d) != q.shape(d)) throw py::value_error("q, k and v shapes differ");
  const AttentionShape shape{static_cast<std::size_t>(q.shape(0)), static_cast<std::size_t>(q.shape(1)),
                             static_cast<std::size_t>(q.shape(2)), static_cast<std::size_t>(q.shape(3))};
  shape.validate();
  const std::size_t n = shape.rows() * shape.width();
  const SinkSlot slot = slot_for(variant);
  std::vector<double> s;
  if (slot == SinkSlot::Learned) {
    if (!sink || sink->size() != static_cast<py::ssize_t>(shape.heads))
      throw py::value_error("the sink variant needs one sink logit per head");
    s.assign(sink->data(), sink->data() + sink->size());
  }
  const auto r = fused_attention_forward<double>(slot, shape, {q.data(), n}, {k.data(), n}, {v.data(), n}, s);
  Array out({q.shape(0), q.shape(1), q.shape(2), q.shape(3)});
  Array gate({q.shape(0), q.shape(1), q.shape(2)});
  std::copy(r.out.data().begin(), r.out.data().end(), out.mutable_data());
  std::copy(r.gate.data().begin(), r.gate.data().end(), gate.mutable_data());
  return py::make_tuple(out, gate);
}

py::dict verify(std::uint64_t seed, std::size_t cases) {
  VerifyOptions o;
  o.seed = seed;
  o.cases = cases;
  const auto r = run_identity_suite(o);
  py::list results;
  for (const auto& x : r.results) {
    py::dict d;
    d["name"] = x.name;
    d["precision"] = x.precision;
    d["cases"] = x.cases;
    d["max_error"] = x.max_error;
    d["tolerance"] = x.tolerance;
    d["passed"] = x.pass;
    results.append(d);
  }
  py::dict d;
  d["passed"] = r.pass();
  d["results"] = results;
  d["seconds"] = r.seconds;
  d["fused_buffer_peak"] = r.fused_buffer_peak;
  return d;
}

py::dict imbalance(const std::vector<std::vector<double>>& imp) {
  HeadImportanceMap m;
  m.imp = imp;
  const auto r = head_imbalance(m);
  py::dict d;
  d["cv_per_layer"] = r.cv_per_layer;
  d["overall"] = r.overall;
  return d;
}

std::vector<py::dict> records(const MetricsLog& log) {
  std::vector<py::dict> out;
  for (const auto& r : log.records) {
    py::dict d;
    d["step"] = r.step;
    d["loss_base"] = r.loss_base;
    d["loss_aux"] = r.loss_aux;
    d["lr"] = r.lr;
    d["cv_per_layer"] = r.cv_per_layer;
    d["head_imbalance"] = r.head_imbalance;
    d["wall_ms"] = r.wall_ms;
    out.push_back(d);
  }
  return out;
}

/// A trained or freshly initialized model with its run config.
struct PyModel {
  RunConfig config;
  TrainState state;

  static PyModel load(const std::string& path) {
    auto ck = load_checkpoint(path);
    return {ck.config, std::move(ck.state)};
  }

  static PyModel create(const std::string& config_path, const std::vector<std::string>& overrides) {
    RunConfig c = resolve_config(load_config_file(config_path), overrides);
    if (c.train.steps == 0) c.train.steps = budget_steps(param_count(c.model), c.train.batch_size, c.train.seq_len);
    return {c, TrainState::fresh(c.model, c.train.seed)};
  }

  std::vector<py::dict> train(std::optional<std::size_t> stop_at) {
    const Corpus corpus = Corpus::load(config.train.corpus, config.train.valid_frac);
    py::gil_scoped_release release;
    const auto log = train_loop(state, config.train, corpus.train, stop_at.value_or(SIZE_MAX));
    py::gil_scoped_acquire acquire;
    return records(log);
  }

  py::dict evaluate(const std::string& text, std::optional<std::size_t> seq_len) const {
    const auto r = evaluate_bpb(state.model, text, seq_len.value_or(config.train.seq_len));
    py::dict d;
    d["bpb"] = r.bpb;
    d["tokens"] = r.tokens;
    d["bytes"] = r.bytes;
    return d;
  }

  std::vector<std::vector<double>> importance(const std::string& text, std::size_t max_windows) const {
    return importance_on(state.model, text, config.train.seq_len, max_windows).imp;
  }

  py::dict zero_first_value(const std::string& text, double tau) const {
    const auto r = zero_first_value_experiment(state.model, text, config.train.seq_len, tau);
    py::dict d;
    d["bpb_none"] = r.bpb_none;
    d["bpb_all"] = r.bpb_all;
    d["bpb_selective"] = r.bpb_selective;
    d["heads_flagged"] = r.heads_flagged;
    d["alpha"] = r.alpha.alpha;
    return d;
  }

  void save(const std::string& path) const { save_checkpoint(state, config, path); }
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Attention-sink head analysis and balancing (C++ core)";

  m.def("attention", &attention, py::arg("q"), py::arg("k"), py::arg("v"), py::arg("variant") = "vanilla",
        py::arg("sink") = py::none(),
        "Fused causal attention over (batch, seq, heads, head_dim) arrays; returns (out, gate).");
  m.def("verify", &verify, py::arg("seed") = 0, py::arg("cases") = 1000, "Run the identity suite.");
  m.def("coefficient_of_variation", [](const std::vector<double>& x) { return coefficient_of_variation(x); });
  m.def("head_imbalance", &imbalance, py::arg("importance"));
  m.def(
      "select_top_m_heads",
      [](const std::vector<std::vector<double>>& imp, std::size_t m) {
        HeadImportanceMap map;
        map.imp = imp;
        return select_top_m_heads(map, m);
      },
      py::arg("importance"), py::arg("m"));
  m.def(
      "aux_loss_scratch",
      [](const std::vector<std::vector<double>>& imp, double lam) { return aux_loss_scratch(imp, lam); },
      py::arg("importance"), py::arg("lam"));
  m.def(
      "aux_loss_finetune",
      [](const std::vector<std::vector<double>>& imp, double lam, const HeadSets& shared) {
        return aux_loss_finetune(imp, lam, shared);
      },
      py::arg("importance"), py::arg("lam"), py::arg("shared"));

  py::class_<PyModel>(m, "Model")
      .def_static("load", &PyModel::load, py::arg("path"))
      .def_static("create", &PyModel::create, py::arg("config"), py::arg("overrides") = std::vector<std::string>{})
      .def_property_readonly("step", [](const PyModel& p) { return p.state.step; })
      .def_property_readonly("config", [](const PyModel& p) { return to_json(p.config).dump(); })
      .def_property_readonly("param_count", [](const PyModel& p) { return p.state.model.param_count(); })
      .def("train", &PyModel::train, py::arg("stop_at") = py::none())
      .def("evaluate", &PyModel::evaluate, py::arg("text"), py::arg("seq_len") = py::none())
      .def("importance", &PyModel::importance, py::arg("text"), py::arg("max_windows") = 64)
      .def("zero_first_value", &PyModel::zero_first_value, py::arg("text"), py::arg("tau") = 0.75)
      .def("save", &PyModel::save, py::arg("path"));

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
}
