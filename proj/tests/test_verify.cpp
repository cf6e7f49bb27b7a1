#include "doctest.h"
#include "smoe/attention.hpp"
#include "smoe/verify.hpp"

using namespace smoe;

TEST_CASE("relative_error is norm-wise") {
  const std::vector<double> a{1.0, 2.0, 3.5}, b{1.0, 2.0, 4.0};
  CHECK(relative_error(a, b) == doctest::Approx(0.125));
  CHECK(relative_error(b, b) == 0.0);
}

TEST_CASE("identity suite passes on a short run") {
  VerifyOptions o;
  o.seed = 3;
  o.cases = 60;
  o.grad_cases = 3;
  const auto r = run_identity_suite(o);
  CHECK(r.results.size() == 10);
  for (const auto& x : r.results) {
    CAPTURE(x.name);
    CAPTURE(x.precision);
    CAPTURE(x.max_error);
    CHECK(x.pass);
  }
  CHECK(r.fused_buffer_peak <= kFusedKeyBlock);
  CHECK(r.eager_buffer_peak > kFusedKeyBlock);
  CHECK(r.pass());
  CHECK_FALSE(r.replay(o).has_value());
}

TEST_CASE("corrupted sink fails and the replay reproduces it") {
  VerifyOptions o;
  o.seed = 4;
  o.cases = 20;
  o.grad_cases = 0;
  o.corrupt_sink = true;
  const auto r = run_identity_suite(o);
  CHECK_FALSE(r.pass());
  const auto replay = r.replay(o);
  REQUIRE(replay.has_value());
  CHECK((*replay)["identity"] == "vanilla_gate_sigmoid");
  const auto again = run_identity_suite(options_from_replay(nlohmann::json::parse(replay->dump())));
  REQUIRE(again.results.size() == 2);
  CHECK_FALSE(again.pass());
  CHECK(again.results[0].cases == 1);
  CHECK(again.results[0].first_failure == r.results[0].first_failure);
}
