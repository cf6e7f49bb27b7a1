// Command-line front end: train, eval, analyze, verify, zero-first-value,
// finetune, plus rerun from a manifest.

#include <openssl/evp.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "smoe/checkpoint.hpp"
#include "smoe/config.hpp"
#include "smoe/experiments.hpp"
#include "smoe/verify.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace smoe;

namespace {

constexpr const char* kToolVersion = "smoe 0.1.0";

enum Exit { kOk = 0, kVerifyFailed = 1, kUsage = 2, kNumeric = 3 };

/// Thrown for a command's own usage errors (exit 2).
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read '" + path + "'");
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::string hex;
  char byte[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(byte, sizeof byte, "%02x", digest[i]);
    hex += byte;
  }
  return hex;
}

std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read '" + path + "'");
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  json config = json::object();
  json inputs = json::array();
  json outputs = json::array();

  void input(const std::string& path) { inputs.push_back({{"path", path}, {"sha256", sha256_file(path)}}); }
  void output(const fs::path& path) { outputs.push_back(path.string()); }

  void write(const fs::path& dir) const {
    json j;
    j["command"] = command;
    j["argv"] = argv;
    j["cwd"] = fs::current_path().string();
    const char* seed = std::getenv("SMOE_SEED");
    j["env"] = {{"SMOE_SEED", seed ? json(seed) : json(nullptr)}};
    j["config"] = config;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    j["tool_version"] = kToolVersion;
    write_file_atomic((dir / (command + ".manifest.json")).string(), j.dump(2) + "\n");
  }
};

fs::path prepare_out(const std::string& out) {
  fs::create_directories(out);
  return fs::path(out);
}

/// Text of `path` cut to the requested split.
std::string load_split(const std::string& path, const std::string& split, double valid_frac) {
  if (path.empty()) throw UsageError("no data file given and the config names no corpus");
  if (!fs::is_regular_file(path)) throw UsageError("data file '" + path + "' not found");
  if (split == "all") return read_file(path);
  Corpus c = Corpus::load(path, valid_frac);
  if (split == "train") return std::move(c.train);
  return std::move(c.valid);
}

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("SMOE_SEED");
  if (!s || !*s) return std::nullopt;
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used != std::string(s).size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw UsageError(std::string("SMOE_SEED is not an unsigned integer: '") + s + "'");
  }
}

Checkpoint load_model_checkpoint(const std::string& path, Manifest& man) {
  if (!fs::is_regular_file(path)) throw UsageError("checkpoint '" + path + "' not found");
  man.input(path);
  Checkpoint ck = load_checkpoint(path);
  if (ck.config.model.vocab_size != 257)
    throw UsageError("checkpoint vocabulary is " + std::to_string(ck.config.model.vocab_size) +
                     " tokens; byte data needs 257");
  return ck;
}

void write_text(const fs::path& path, const std::string& text, Manifest& man) {
  write_file_atomic(path.string(), text);
  man.output(path);
}

std::string importance_csv(const HeadImportanceMap& imp, const HeadSets* shared = nullptr) {
  std::string csv = shared ? "layer,head,imp,shared\n" : "layer,head,imp\n";
  for (std::size_t l = 0; l < imp.n_layers(); ++l)
    for (std::size_t h = 0; h < imp.n_heads(); ++h) {
      csv += std::to_string(l) + "," + std::to_string(h) + "," + num(imp.imp[l][h]);
      if (shared) {
        const auto& s = (*shared)[l];
        csv += std::find(s.begin(), s.end(), h) != s.end() ? ",1" : ",0";
      }
      csv += "\n";
    }
  return csv;
}

json imbalance_json(const ImbalanceReport& r) { return {{"cv_per_layer", r.cv_per_layer}, {"overall", r.overall}}; }

// -- train ----------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::vector<std::string> sets;
  std::string out = ".";
  bool init_only = false;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a, Manifest& man) {
  std::vector<std::string> overrides;
  if (auto s = env_seed()) overrides.push_back("seed=" + std::to_string(*s));
  overrides.insert(overrides.end(), a.sets.begin(), a.sets.end());
  RunConfig cfg = resolve_config(load_config_file(a.config), overrides);
  man.input(a.config);
  if (cfg.train.corpus.empty() || !fs::is_regular_file(cfg.train.corpus))
    throw UsageError("corpus '" + cfg.train.corpus + "' not found");
  man.input(cfg.train.corpus);
  if (cfg.train.steps == 0)
    cfg.train.steps = budget_steps(param_count(cfg.model), cfg.train.batch_size, cfg.train.seq_len);
  man.config = to_json(cfg);

  const fs::path out = prepare_out(a.out);
  const Corpus corpus = Corpus::load(cfg.train.corpus, cfg.train.valid_frac);
  TrainState state = TrainState::fresh(cfg.model, cfg.train.seed);
  MetricsLog log;
  if (!a.init_only) {
    log = train_loop(state, cfg.train, corpus.train, SIZE_MAX, [&](const MetricsRecord& r) {
      if (!a.quiet)
        std::fprintf(stderr, "step %zu loss %.4f aux %.3g imbalance %.4f\n", r.step, r.loss_base, r.loss_aux,
                     r.head_imbalance);
    });
  }
  save_checkpoint(state, cfg, (out / "checkpoint.smoe").string());
  man.output(out / "checkpoint.smoe");
  write_text(out / "metrics.jsonl", log.to_jsonl(), man);

  json summary;
  summary["steps"] = state.step;
  summary["valid_bpb"] = evaluate_bpb(state.model, corpus.valid, cfg.train.seq_len).bpb;
  if (!log.records.empty()) summary["final_head_imbalance"] = log.records.back().head_imbalance;
  std::cout << summary.dump() << "\n";
  return kOk;
}

// -- eval -----------------------------------------------------------------------

struct DataArgs {
  std::string checkpoint;
  std::string data;
  std::string split = "valid";
  std::size_t seq_len = 0;  // 0: from the checkpoint config
  std::string out = ".";
};

struct Loaded {
  Checkpoint ck;
  std::string text;
  std::size_t seq_len;
};

Loaded load_inputs(const DataArgs& a, Manifest& man) {
  Loaded l{load_model_checkpoint(a.checkpoint, man), {}, 0};
  const std::string path = a.data.empty() ? l.ck.config.train.corpus : a.data;
  l.text = load_split(path, a.split, l.ck.config.train.valid_frac);
  man.input(path);
  l.seq_len = a.seq_len ? a.seq_len : l.ck.config.train.seq_len;
  if (l.seq_len > l.ck.config.model.max_seq_len)
    throw UsageError("seq-len " + std::to_string(l.seq_len) + " exceeds the model context " +
                     std::to_string(l.ck.config.model.max_seq_len));
  if (l.text.empty()) throw UsageError("selected data split is empty");
  man.config = {{"checkpoint_config", to_json(l.ck.config)}, {"split", a.split}, {"seq_len", l.seq_len}};
  return l;
}

int cmd_eval(const DataArgs& a, Manifest& man) {
  const Loaded in = load_inputs(a, man);
  const auto r = evaluate_bpb(in.ck.state.model, in.text, in.seq_len);
  const json j = {{"bpb", r.bpb}, {"tokens", r.tokens}, {"bytes", r.bytes}};
  write_text(prepare_out(a.out) / "eval.json", j.dump() + "\n", man);
  std::cout << j.dump() << "\n";
  return kOk;
}

// -- analyze --------------------------------------------------------------------

struct AnalyzeArgs {
  DataArgs data;
  std::string kind;
  std::size_t max_windows = 64;
  std::size_t window = 0;  // value-norms / pca: which window of the data
};

int cmd_analyze(const AnalyzeArgs& a, Manifest& man) {
  const Loaded in = load_inputs(a.data, man);
  man.config["kind"] = a.kind;
  man.config["max_windows"] = a.max_windows;
  man.config["window"] = a.window;
  const Model<float>& model = in.ck.state.model;
  const std::size_t L = model.config.n_layers, H = model.config.n_heads, dh = model.config.head_dim();
  const fs::path out = prepare_out(a.data.out);

  if (a.kind == "sink-ratio" && model.config.variant == AttentionVariant::Gated)
    throw UsageError("sink-ratio is undefined for the gated variant");

  if (a.kind == "heads" || a.kind == "imbalance" || a.kind == "sink-ratio") {
    const auto passes = collect_gate_stats(model, in.text, in.seq_len, 8, a.max_windows);
    const std::span<const GateStats> ps(passes);
    if (a.kind == "heads") {
      write_text(out / "heads.csv", importance_csv(head_importance(ps)), man);
    } else if (a.kind == "imbalance") {
      const auto r = head_imbalance(head_importance(ps));
      std::string csv = "layer,cv\n";
      for (std::size_t l = 0; l < L; ++l) csv += std::to_string(l) + "," + num(r.cv_per_layer[l]) + "\n";
      csv += "overall," + num(r.overall) + "\n";
      write_text(out / "imbalance.csv", csv, man);
    } else {
      const auto r = sink_ratio(ps);
      std::string csv = "layer,head,alpha\n";
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t h = 0; h < H; ++h)
          csv += std::to_string(l) + "," + std::to_string(h) + "," + num(r.alpha[l][h]) + "\n";
      write_text(out / "sinkratio.csv", csv, man);
    }
    return kOk;
  }

  // Per-position views use one window.
  const std::size_t offset = a.window * in.seq_len;
  if (offset >= in.text.size()) throw UsageError("window " + std::to_string(a.window) + " lies past the data");
  const std::size_t len = std::min(in.seq_len, in.text.size() - offset);
  const std::size_t offsets[] = {offset};
  ForwardOptions opt;
  opt.capture_qkv = true;
  const auto f = forward(model, window_batch(in.text, offsets, len), opt);
  auto head_rows = [&](const Tensor<float>& packed, std::size_t h) {
    Tensor<double> t({len, dh});
    for (std::size_t p = 0; p < len; ++p)
      for (std::size_t i = 0; i < dh; ++i) t[p * dh + i] = packed[p * model.config.d_model + h * dh + i];
    return t;
  };

  if (a.kind == "value-norms") {
    std::string csv = "layer,head,position,l2\n";
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t h = 0; h < H; ++h) {
        const auto norms = value_l2_norms(head_rows(f.v[l], h));
        for (std::size_t p = 0; p < len; ++p)
          csv += std::to_string(l) + "," + std::to_string(h) + "," + std::to_string(p) + "," + num(norms[p]) + "\n";
      }
    write_text(out / "valuenorms.csv", csv, man);
    return kOk;
  }
  if (a.kind == "pca") {
    if (dh < 2) throw UsageError("pca needs a head dimension of at least 2");
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t h = 0; h < H; ++h) {
        // Queries and keys share one projection so they can be compared.
        const auto q = head_rows(f.q[l], h), k = head_rows(f.k[l], h);
        Tensor<double> both({2 * len, dh});
        std::copy(q.data().begin(), q.data().end(), both.data().begin());
        std::copy(k.data().begin(), k.data().end(), both.data().begin() + static_cast<std::ptrdiff_t>(len * dh));
        const auto pca = pca_2d(both);
        std::string csv = "kind,index,pc1,pc2\n";
        for (std::size_t r = 0; r < 2 * len; ++r)
          csv += std::string(r < len ? "q," : "k,") + std::to_string(r % len) + "," + num(pca.projections[2 * r]) +
                 "," + num(pca.projections[2 * r + 1]) + "\n";
        write_text(out / ("pca_" + std::to_string(l) + "_" + std::to_string(h) + ".csv"), csv, man);
      }
    return kOk;
  }
  throw UsageError("unknown analysis kind '" + a.kind + "'");
}

// -- verify ---------------------------------------------------------------------

struct VerifyArgs {
  std::optional<std::uint64_t> seed;
  std::size_t cases = 1000;
  bool corrupt_sink = false;
  std::string replay;
  std::string out = ".";
};

int cmd_verify(const VerifyArgs& a, Manifest& man) {
  VerifyOptions o;
  if (!a.replay.empty()) {
    man.input(a.replay);
    try {
      o = options_from_replay(nlohmann::json::parse(read_file(a.replay)));
    } catch (const nlohmann::json::exception& e) {
      throw UsageError("bad replay file: " + std::string(e.what()));
    }
  } else {
    if (a.cases == 0) throw UsageError("--cases must be at least 1");
    o.seed = a.seed ? *a.seed : env_seed().value_or(0);
    o.cases = a.cases;
    o.corrupt_sink = a.corrupt_sink;
  }
  man.config = {{"seed", o.seed}, {"cases", o.cases}, {"grad_cases", o.grad_cases}, {"corrupt_sink", o.corrupt_sink}};
  if (o.only_case) man.config["case"] = *o.only_case;

  const VerifyReport r = run_identity_suite(o);
  for (const auto& x : r.results) {
    std::printf("%s %-22s %s cases=%-5zu max_error=%.3e tol=%.0e\n", x.pass ? "PASS" : "FAIL", x.name.c_str(),
                x.precision.c_str(), x.cases, x.max_error, x.tolerance);
  }
  if (r.fused_buffer_peak > 0) {
    std::printf("%s fused_buffer_peak=%zu (block %zu, eager control %zu)\n",
                r.fused_buffer_peak <= kFusedKeyBlock ? "PASS" : "FAIL", r.fused_buffer_peak, kFusedKeyBlock,
                r.eager_buffer_peak);
  }
  const fs::path out = prepare_out(a.out);
  if (const auto replay = r.replay(o)) {
    write_text(out / "verify_replay.json", replay->dump(2) + "\n", man);
    std::printf("replay: %s\n", (out / "verify_replay.json").string().c_str());
  }
  return r.pass() ? kOk : kVerifyFailed;
}

// -- zero-first-value -------------------------------------------------------------

struct ZeroArgs {
  DataArgs data;
  double tau = 0.75;
  std::size_t max_windows = SIZE_MAX;
};

int cmd_zero_first_value(const ZeroArgs& a, Manifest& man) {
  const Loaded in = load_inputs(a.data, man);
  man.config["tau"] = a.tau;
  if (in.ck.config.model.variant != AttentionVariant::Vanilla)
    throw UsageError("zero-first-value needs a vanilla checkpoint, got " +
                     std::string(to_string(in.ck.config.model.variant)));
  if (!(a.tau >= 0.0 && a.tau <= 1.0)) throw UsageError("--tau must lie in [0, 1]");
  const auto r = zero_first_value_experiment(in.ck.state.model, in.text, in.seq_len, a.tau, a.max_windows);
  const json brief = {{"bpb_none", r.bpb_none},
                      {"bpb_all", r.bpb_all},
                      {"bpb_selective", r.bpb_selective},
                      {"heads_flagged", r.heads_flagged}};
  json full = brief;
  full["tau"] = r.tau;
  full["alpha"] = r.alpha.alpha;
  full["flagged"] = r.flagged;
  full["tokens"] = r.tokens;
  full["bytes"] = r.bytes;
  write_text(prepare_out(a.data.out) / "zero_first_value.json", full.dump(2) + "\n", man);
  std::cout << brief.dump() << "\n";
  return kOk;
}

// -- finetune ---------------------------------------------------------------------

struct FinetuneArgs {
  std::string checkpoint;
  std::vector<std::string> sets;
  std::optional<std::size_t> m;
  double lambda = 1e-2;
  std::size_t steps = 500;
  std::size_t max_windows = 64;
  std::string out = ".";
  bool quiet = false;
};

int cmd_finetune(const FinetuneArgs& a, Manifest& man) {
  Checkpoint ck = load_model_checkpoint(a.checkpoint, man);
  RunConfig cfg = ck.config;
  if (auto s = env_seed()) cfg.train.seed = *s;
  for (const auto& o : a.sets) {
    const auto [k, v] = parse_override(o);
    if (k.rfind("model.", 0) == 0 || k == "variant")
      throw UsageError("fine-tuning cannot change the model ('" + k + "')");
    apply_setting(cfg, k, v);
  }
  cfg.train.steps = a.steps;
  cfg.train.balance.mode = BalanceMode::FineTune;
  cfg.train.balance.lambda = a.lambda;
  cfg.train.balance.m = a.m.value_or(default_shared_heads(cfg.model.n_heads));
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (!fs::is_regular_file(cfg.train.corpus)) throw UsageError("corpus '" + cfg.train.corpus + "' not found");
  man.input(cfg.train.corpus);
  man.config = to_json(cfg);
  man.config["max_windows"] = a.max_windows;

  const Corpus corpus = Corpus::load(cfg.train.corpus, cfg.train.valid_frac);
  const auto r = run_finetune(ck.state, cfg.train, corpus.train, corpus.valid, a.max_windows, [&](const MetricsRecord& x) {
    if (!a.quiet)
      std::fprintf(stderr, "step %zu loss %.4f aux %.3g imbalance %.4f\n", x.step, x.loss_base, x.loss_aux,
                   x.head_imbalance);
  });

  const fs::path out = prepare_out(a.out);
  save_checkpoint(ck.state, cfg, (out / "checkpoint.smoe").string());
  man.output(out / "checkpoint.smoe");
  write_text(out / "metrics.jsonl", r.log.to_jsonl(), man);
  write_text(out / "importance_before.csv", importance_csv(r.before, &r.shared), man);
  write_text(out / "importance_after.csv", importance_csv(r.after, &r.shared), man);
  json summary;
  summary["m"] = r.m;
  summary["shared"] = r.shared;
  summary["routed_cv_before"] = r.routed_before;
  summary["routed_cv_after"] = r.routed_after;
  summary["shared_top_before"] = r.shared_top_before;
  summary["shared_top_after"] = r.shared_top_after;
  summary["imbalance_before"] = imbalance_json(head_imbalance(r.before));
  summary["imbalance_after"] = imbalance_json(head_imbalance(r.after));
  write_text(out / "finetune.json", summary.dump(2) + "\n", man);
  std::cout << summary.dump() << "\n";
  return kOk;
}

int run(const std::vector<std::string>& args);

int cmd_rerun(const std::string& path) {
  const auto j = nlohmann::json::parse(read_file(path));
  for (const auto& in : j.at("inputs")) {
    const auto p = in.at("path").get<std::string>();
    fs::path full = fs::path(p).is_absolute() ? fs::path(p) : fs::path(j.at("cwd").get<std::string>()) / p;
    if (!fs::is_regular_file(full) || sha256_file(full.string()) != in.at("sha256").get<std::string>())
      throw UsageError("input '" + p + "' changed since the manifest was written");
  }
  fs::current_path(j.at("cwd").get<std::string>());
  const auto& seed = j.at("env").at("SMOE_SEED");
  if (seed.is_null()) {
    ::unsetenv("SMOE_SEED");
  } else {
    ::setenv("SMOE_SEED", seed.get<std::string>().c_str(), 1);
  }
  return run(j.at("argv").get<std::vector<std::string>>());
}

int run(const std::vector<std::string>& args) {
  CLI::App app{"Attention-sink head analysis and balancing toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  auto add_data = [](CLI::App* c, DataArgs& d) {
    c->add_option("--checkpoint", d.checkpoint, "Checkpoint file")->required();
    c->add_option("--data", d.data, "Byte corpus (default: the checkpoint's corpus)");
    c->add_option("--split", d.split, "Part of the data to use")
        ->check(CLI::IsMember({"train", "valid", "all"}))
        ->capture_default_str();
    c->add_option("--seq-len", d.seq_len, "Window length (default: from the checkpoint)");
    c->add_option("--out", d.out, "Output directory")->capture_default_str();
  };

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Train a model from a config file");
  c_train->add_option("--config", train.config, "TOML or JSON config")->required();
  c_train->add_option("--set", train.sets, "Override, dotted.key=value (repeatable)");
  c_train->add_option("--out", train.out, "Output directory")->capture_default_str();
  c_train->add_flag("--init-only", train.init_only, "Write the untrained checkpoint and stop");
  c_train->add_flag("--quiet", train.quiet, "No progress lines");

  DataArgs eval;
  auto* c_eval = app.add_subcommand("eval", "Bits per byte of a checkpoint on data");
  add_data(c_eval, eval);

  AnalyzeArgs analyze;
  auto* c_analyze = app.add_subcommand("analyze", "Export head statistics as CSV");
  c_analyze->add_option("kind", analyze.kind, "heads | imbalance | sink-ratio | value-norms | pca")
      ->required()
      ->check(CLI::IsMember({"heads", "imbalance", "sink-ratio", "value-norms", "pca"}));
  add_data(c_analyze, analyze.data);
  c_analyze->add_option("--max-windows", analyze.max_windows, "Windows pooled for statistics")->capture_default_str();
  c_analyze->add_option("--window", analyze.window, "Window index for value-norms / pca")->capture_default_str();

  VerifyArgs verify;
  auto* c_verify = app.add_subcommand("verify", "Run the attention identity suite");
  c_verify->add_option("--seed", verify.seed, "Seed (default: SMOE_SEED or 0)");
  c_verify->add_option("--cases", verify.cases, "Random cases")->capture_default_str();
  c_verify->add_option("--replay", verify.replay, "Re-run one failing case from a replay file");
  c_verify->add_option("--out", verify.out, "Directory for the replay file")->capture_default_str();
  c_verify->add_flag("--corrupt-sink", verify.corrupt_sink, "Perturb the sink term (negative control)")
      ->group("");

  ZeroArgs zero;
  auto* c_zero = app.add_subcommand("zero-first-value", "First-value zeroing intervention on a vanilla model");
  add_data(c_zero, zero.data);
  c_zero->add_option("--tau", zero.tau, "Sink-ratio threshold")->capture_default_str();
  c_zero->add_option("--max-windows", zero.max_windows, "Windows used to measure sink ratios");

  FinetuneArgs ft;
  auto* c_ft = app.add_subcommand("finetune", "Fine-tune with shared heads and the routed balance loss");
  c_ft->add_option("--checkpoint", ft.checkpoint, "Pretrained checkpoint")->required();
  c_ft->add_option("--set", ft.sets, "Override, dotted.key=value (repeatable)");
  c_ft->add_option("--m", ft.m, "Shared heads per layer (default: ceil(H / 4))");
  c_ft->add_option("--lambda", ft.lambda, "Balance loss weight")->capture_default_str();
  c_ft->add_option("--steps", ft.steps, "Fine-tuning steps")->capture_default_str();
  c_ft->add_option("--max-windows", ft.max_windows, "Calibration windows")->capture_default_str();
  c_ft->add_option("--out", ft.out, "Output directory")->capture_default_str();
  c_ft->add_flag("--quiet", ft.quiet, "No progress lines");

  std::string manifest_path;
  auto* c_rerun = app.add_subcommand("rerun", "Repeat a run recorded in a manifest");
  c_rerun->add_option("manifest", manifest_path, "*.manifest.json")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  Manifest man;
  man.argv = args;
  auto finish = [&](const std::string& name, const std::string& out, int code) {
    man.command = name;
    man.write(prepare_out(out));
    return code;
  };
  if (*c_train) return finish("train", train.out, cmd_train(train, man));
  if (*c_eval) return finish("eval", eval.out, cmd_eval(eval, man));
  if (*c_analyze) return finish("analyze_" + analyze.kind, analyze.data.out, cmd_analyze(analyze, man));
  if (*c_verify) return finish("verify", verify.out, cmd_verify(verify, man));
  if (*c_zero) return finish("zero_first_value", zero.data.out, cmd_zero_first_value(zero, man));
  if (*c_ft) return finish("finetune", ft.out, cmd_finetune(ft, man));
  return cmd_rerun(manifest_path);
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(std::vector<std::string>(argv + 1, argv + argc));
  } catch (const NumericError& e) {
    std::cerr << "error: numeric abort: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (...) {
    std::cerr << "error: unknown failure\n";
    return kUsage;
  }
}
