#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "smoe/checkpoint.hpp"
#include "smoe/config.hpp"
#include "smoe/train.hpp"

using namespace smoe;

namespace {

std::string sample_text(std::size_t n, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  const std::string alphabet = "abcdefghij klmnop.";
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += alphabet[rng() % alphabet.size()];
  return s;
}

RunConfig tiny_run(AttentionVariant v = AttentionVariant::Sink) {
  RunConfig c;
  c.model.d_model = 16;
  c.model.n_layers = 1;
  c.model.n_heads = 2;
  c.model.max_seq_len = 16;
  c.model.variant = v;
  c.train.steps = 20;
  c.train.batch_size = 2;
  c.train.seq_len = 16;
  c.train.lr_peak = 0.01;
  c.train.eval_every = 5;
  c.train.wall_clock = false;
  return c;
}

bool same_params(const TrainState& a, const TrainState& b) {
  for (std::size_t i = 0; i < a.model.params.size(); ++i) {
    if (a.model.params[i] != b.model.params[i] || a.adam.m[i] != b.adam.m[i] || a.adam.v[i] != b.adam.v[i])
      return false;
  }
  return a.step == b.step && a.adam.t == b.adam.t && a.rng == b.rng;
}

std::filesystem::path temp_dir() {
  auto p = std::filesystem::temp_directory_path() / ("smoe_test_" + std::to_string(::getpid()));
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("tokenize_bytes") {
  CHECK(tokenize_bytes("") == std::vector<std::int32_t>{256});
  CHECK(tokenize_bytes("Hi") == std::vector<std::int32_t>{256, 72, 105});
  std::mt19937_64 rng(60);
  for (int trial = 0; trial < 50; ++trial) {
    std::string s(testing::uniform_int(rng, 0, 64), '\0');
    for (auto& c : s) c = static_cast<char>(rng() & 0xff);
    const auto ids = tokenize_bytes(s);
    CHECK(decode_tokens(ids) == s);
  }
}

TEST_CASE("windows and batches") {
  const std::string text = "abcdefghij";
  const std::size_t offs[] = {0, 3};
  const auto b = window_batch(text, offs, 4);
  CHECK(b.ids == std::vector<std::int32_t>{256, 'a', 'b', 'c', 256, 'd', 'e', 'f'});
  CHECK(b.targets == std::vector<std::int32_t>{'a', 'b', 'c', 'd', 'd', 'e', 'f', 'g'});
  const std::size_t past[] = {8};
  CHECK_THROWS_AS(window_batch(text, past, 4), ShapeError);

  const auto seq = sequential_batches(text, 4, 8);
  REQUIRE(seq.size() == 2);
  CHECK(seq[0].batch == 2);
  CHECK(seq[1].seq == 2);
  std::size_t covered = 0;
  for (const auto& s : seq) covered += s.batch * s.seq;
  CHECK(covered == text.size());

  CHECK(budget_steps(1000, 4, 10) == 500);
  CHECK(budget_steps(1001, 4, 10) == 501);
}

TEST_CASE("lr_at schedule") {
  CHECK(lr_at(0, 1000, 0.02, 0.2) == 0.02);
  CHECK(lr_at(799, 1000, 0.02, 0.2) == 0.02);
  CHECK(std::abs(lr_at(900, 1000, 0.02, 0.2) - 0.01) < 1e-15);
  CHECK(lr_at(1000, 1000, 0.02, 0.2) == 0.0);
  CHECK_THROWS(lr_at(1001, 1000, 0.02, 0.2));
}

TEST_CASE("adamw_step closed forms") {
  std::vector<Tensor<double>> w{Tensor<double>({3}, {1.0, -2.0, 0.5})};
  auto st = AdamState<double>::like(w);
  adamw_step(w, {Tensor<double>({3})}, st, 0.1, AdamHyper{0.9, 0.999, 1e-8, 0.01});
  CHECK(std::abs(w[0][0] - 1.0 * (1 - 0.1 * 0.01)) < 1e-15);
  CHECK(std::abs(w[0][1] + 2.0 * (1 - 0.1 * 0.01)) < 1e-15);

  std::vector<Tensor<double>> p{Tensor<double>({2}, {0.0, 0.0})};
  auto s2 = AdamState<double>::like(p);
  const Tensor<double> g({2}, {0.3, -2e-3});
  adamw_step(p, {g}, s2, 0.01, AdamHyper{});
  for (std::size_t i = 0; i < 2; ++i) CHECK(std::abs(p[0][i] - (-0.01 * g[i] / (std::abs(g[i]) + 1e-8))) < 1e-15);

  CHECK_THROWS_AS(adamw_step(p, {Tensor<double>({2}, {1.0, INFINITY})}, s2, 0.01, AdamHyper{}), NumericError);

  std::vector<Tensor<double>> grads{Tensor<double>({2}, {3.0, 4.0})};
  CHECK(clip_global_norm(grads, 1.0) == 5.0);
  CHECK(std::abs(grads[0][0] - 0.6) < 1e-15);
  CHECK(clip_global_norm(grads, 0.0) == doctest::Approx(1.0));
}

TEST_CASE("evaluate_bpb") {
  ModelConfig c = tiny_run().model;
  auto m = Model<float>::init(c);
  const std::string text = sample_text(300);
  // Zero head: uniform logits.
  auto uniform = m;
  auto& head = uniform.params[uniform.head];
  std::fill(head.data().begin(), head.data().end(), 0.0f);
  const auto r = evaluate_bpb(uniform, text, 16);
  CHECK(std::abs(r.bpb - std::log2(257.0)) < 1e-6);
  CHECK(std::abs(std::log2(257.0) - 8.0056) < 1e-4);
  CHECK(r.bytes == 300);
  CHECK(r.tokens == 300);
  const auto untrained = evaluate_bpb(m, text, 16);
  CHECK(std::abs(untrained.bpb - std::log2(257.0)) < 0.1);
  CHECK(evaluate_bpb(m, text, 16).bpb == untrained.bpb);
  CHECK_THROWS(evaluate_bpb(m, "", 16));
}

TEST_CASE("training is deterministic and logs the contract") {
  const auto c = tiny_run();
  const std::string text = sample_text(2000);
  auto a = TrainState::fresh(c.model, c.train.seed);
  auto b = TrainState::fresh(c.model, c.train.seed);
  auto ca = c.train;
  ca.steps = 7;
  ca.eval_every = 3;
  const auto la = train_loop(a, ca, text);
  const auto lb = train_loop(b, ca, text);
  CHECK(la.to_jsonl() == lb.to_jsonl());
  CHECK(same_params(a, b));
  REQUIRE(la.records.size() == 3);
  CHECK(la.records[2].step == 6);
  for (const auto& r : la.records) {
    CHECK(r.loss_aux == 0.0);
    CHECK(r.wall_ms == 0.0);
  }
  const auto line = la.to_jsonl().substr(0, la.to_jsonl().find('\n'));
  CHECK(line.rfind("{\"step\":0,\"loss_base\":", 0) == 0);
}

TEST_CASE("lambda 0 scratch reproduces Off bitwise; aux is logged non-negative") {
  const auto c = tiny_run();
  const std::string text = sample_text(2000);
  auto off = TrainState::fresh(c.model, 3);
  auto zero = TrainState::fresh(c.model, 3);
  auto on = TrainState::fresh(c.model, 3);
  auto tz = c.train;
  tz.balance = {0.0, BalanceMode::Scratch, 0};
  auto ton = c.train;
  ton.balance = {0.5, BalanceMode::Scratch, 0};
  const auto l0 = train_loop(off, c.train, text);
  const auto l1 = train_loop(zero, tz, text);
  const auto l2 = train_loop(on, ton, text);
  CHECK(same_params(off, zero));
  CHECK(l0.to_jsonl() == l1.to_jsonl());
  bool positive = false;
  for (const auto& r : l2.records) {
    CHECK(r.loss_aux >= 0.0);
    positive = positive || r.loss_aux > 0.0;
  }
  CHECK(positive);
  CHECK_FALSE(same_params(off, on));
}

TEST_CASE("NaN parameters abort with the step index") {
  const auto c = tiny_run();
  auto s = TrainState::fresh(c.model, 0);
  s.model.params[s.model.head][0] = std::nanf("");
  s.step = 4;
  try {
    train_step(s, c.train, sample_text(500));
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("step 4") != std::string::npos);
  }
}

TEST_CASE("memorizes a single sentence") {
  const std::string sentence = "The quick brown fox jumps over the lazy dog.";
  RunConfig c;
  c.model.d_model = 32;
  c.model.n_layers = 1;
  c.model.n_heads = 2;
  c.model.max_seq_len = sentence.size();
  c.train.steps = 500;
  c.train.batch_size = 1;
  c.train.seq_len = sentence.size();  // a single window: every target is determined
  c.train.lr_peak = 0.01;
  c.train.eval_every = 500;
  auto s = TrainState::fresh(c.model, 0);
  train_loop(s, c.train, sentence);
  const auto r = evaluate_bpb(s.model, sentence, sentence.size());
  CHECK(r.nll_nats / static_cast<double>(r.tokens) < 0.1);
}

TEST_CASE("checkpoint round trip, resume and corruption") {
  const auto c = tiny_run(AttentionVariant::Gated);
  const std::string text = sample_text(2000);
  auto s = TrainState::fresh(c.model, 9);
  s.shared = {{1}};
  train_loop(s, c.train, text, 10);
  const std::string bytes = serialize_checkpoint(s, c);
  const auto ck = parse_checkpoint(bytes);
  CHECK(same_params(s, ck.state));
  CHECK(ck.state.shared == s.shared);
  CHECK(ck.config.model == c.model);
  CHECK(serialize_checkpoint(ck.state, ck.config) == bytes);

  const auto dir = temp_dir();
  const std::string path = (dir / "ck.smoe").string();
  save_checkpoint(s, c, path);
  CHECK_FALSE(std::filesystem::exists(path + ".tmp"));
  auto resumed = load_checkpoint(path).state;

  // Straight through to step 20 vs. resume at 10.
  auto straight = TrainState::fresh(c.model, 9);
  straight.shared = {{1}};
  const auto log_straight = train_loop(straight, c.train, text);
  const auto log_tail = train_loop(resumed, c.train, text);
  CHECK(same_params(straight, resumed));
  REQUIRE(log_tail.records.size() == 2);
  CHECK(log_tail.records[0].step == 10);
  CHECK(log_straight.at_step(15)->loss_base == log_tail.at_step(15)->loss_base);

  CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() - 1)), CheckpointError);
  CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, 30)), CheckpointError);
  std::string magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_WITH_AS(parse_checkpoint(magic), doctest::Contains("XMOE"), CheckpointError);
  std::string version = bytes;
  version[4] = 7;
  CHECK_THROWS_WITH_AS(parse_checkpoint(version), doctest::Contains("version 7 (expected 1)"), CheckpointError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("config parsing and overrides") {
  const auto map = parse_config_text(R"(# comment
[model]
variant = "sink"
d_model = 32
n_heads = 4

[train]
steps = 12
lr_peak = 1e-3

[balance]
mode = "scratch"
lambda = 1e-4
)");
  const std::vector<std::string> over{"train.steps=30", "seed=5", "balance.m=1"};
  const auto rc = resolve_config(map, over);
  CHECK(rc.model.variant == AttentionVariant::Sink);
  CHECK(rc.model.d_model == 32);
  CHECK(rc.train.steps == 30);
  CHECK(rc.train.lr_peak == 1e-3);
  CHECK(rc.model.seed == 5);
  CHECK(rc.train.seed == 5);
  CHECK(rc.train.balance.mode == BalanceMode::Scratch);
  CHECK(rc.train.balance.lambda == 1e-4);

  const auto js = parse_config_text(R"({"model": {"variant": "gated"}, "train": {"steps": 3}})");
  const std::vector<std::string> none;
  CHECK(resolve_config(js, none).model.variant == AttentionVariant::Gated);
  CHECK(run_config_from_json(to_json(rc)).model == rc.model);
  CHECK(to_json(run_config_from_json(to_json(rc))).dump() == to_json(rc).dump());

  const std::vector<std::string> unknown{"model.colour=red"};
  CHECK_THROWS_AS(resolve_config(map, unknown), ConfigError);
  const std::vector<std::string> bad_value{"train.steps=many"};
  CHECK_THROWS_AS(resolve_config(map, bad_value), ConfigError);
  CHECK_THROWS_AS(parse_override("no_equals"), ConfigError);
  const std::vector<std::string> long_seq{"train.seq_len=500"};
  CHECK_THROWS(resolve_config(map, long_seq));
}
