#include <cmath>

#include "doctest.h"
#include "smoe/experiments.hpp"

using namespace smoe;

namespace {

ModelConfig tiny(AttentionVariant v) {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 4;
  c.max_seq_len = 32;
  c.variant = v;
  c.seed = 5;
  return c;
}

std::string text(std::size_t n) {
  std::string s;
  while (s.size() < n) s += "the cat sat on the mat. a dog ran by the log. ";
  return s.substr(0, n);
}

}  // namespace

TEST_CASE("routed_imbalance and shared_top_fraction") {
  HeadImportanceMap imp;
  imp.imp = {{0.9, 0.2, 0.4, 0.6}, {0.5, 0.9, 0.5, 0.5}};
  const HeadSets shared{{0}, {1}};
  // layer 0 routed {0.2, 0.4, 0.6}: std sqrt(0.08/3), mean 0.4; layer 1 uniform.
  CHECK(routed_imbalance(imp, shared) == doctest::Approx(std::sqrt(0.08 / 3) / 0.4 / 2).epsilon(1e-12));
  CHECK(shared_top_fraction(imp, shared) == 1.0);
  CHECK(shared_top_fraction(imp, HeadSets{{3}, {1}}) == 0.5);
  // Tied heads rank by index.
  imp.imp[1] = {0.5, 0.5, 0.5, 0.5};
  CHECK(shared_top_fraction(imp, HeadSets{{0}, {0}}) == 1.0);
  CHECK_THROWS(routed_imbalance(imp, HeadSets{{0}}));
}

TEST_CASE("zero-first-value experiment") {
  const auto model = Model<float>::init(tiny(AttentionVariant::Vanilla));
  const auto t = text(300);
  const auto none = zero_first_value_experiment(model, t, 32, 1.0);
  CHECK(none.heads_flagged == 0);
  CHECK(none.bpb_selective == none.bpb_none);
  CHECK(none.bpb_all != none.bpb_none);

  // tau = 0 flags every head with a positive sink ratio, i.e. all of them.
  const auto all = zero_first_value_experiment(model, t, 32, 0.0);
  CHECK(all.heads_flagged == 8);
  CHECK(all.bpb_selective == all.bpb_all);
  CHECK(all.bpb_none == none.bpb_none);
  for (const auto& row : all.alpha.alpha)
    for (double a : row) CHECK((a > 0.0 && a <= 1.0));

  CHECK_THROWS_AS(zero_first_value_experiment(Model<float>::init(tiny(AttentionVariant::Sink)), t, 32, 0.75),
                  std::invalid_argument);
  CHECK_THROWS_AS(zero_first_value_experiment(model, t, 32, 1.5), std::invalid_argument);
}

TEST_CASE("finetune fixes the shared set and restarts the optimizer") {
  auto state = TrainState::fresh(tiny(AttentionVariant::Sink), 1);
  state.step = 99;
  TrainConfig c;
  c.steps = 6;
  c.batch_size = 2;
  c.seq_len = 32;
  c.eval_every = 2;
  c.lr_peak = 1e-3;
  c.balance = {1e-2, BalanceMode::FineTune, 1};
  const auto t = text(2000);
  const auto r = run_finetune(state, c, t, std::string_view(t).substr(0, 500), 8);
  CHECK(state.step == 6);
  CHECK(state.adam.t == 6);
  CHECK(state.shared == r.shared);
  CHECK(r.shared == select_top_m_heads(r.before, 1));
  CHECK(r.shared_top_before == 1.0);
  CHECK(r.log.records.size() == 3);
  CHECK(r.log.records[0].loss_aux > 0.0);

  c.balance.m = 5;
  CHECK_THROWS_AS(run_finetune(state, c, t, t, 8), std::invalid_argument);
}
