#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace smoe {

/// Identity checks over seeded random attention problems. Case i of a run
/// draws its inputs from (seed, i) alone, so one failing case can be replayed
/// without the rest.
struct VerifyOptions {
  std::uint64_t seed = 0;
  std::size_t cases = 1000;
  std::size_t grad_cases = 12;  // finite-difference cases are far costlier
  bool corrupt_sink = false;    // negative control: perturbs the sink term
  std::optional<std::size_t> only_case;
  std::vector<std::string> only_identities;  // empty: all
};

struct IdentityResult {
  std::string name;
  std::string precision;  // "f64" / "f32"
  std::size_t cases = 0;
  double max_error = 0;
  double tolerance = 0;
  bool pass = true;
  std::optional<std::size_t> first_failure;
};

struct VerifyReport {
  std::vector<IdentityResult> results;
  double seconds = 0;
  /// Largest weight buffer seen on the fused path, and on the eager control.
  std::size_t fused_buffer_peak = 0;
  std::size_t eager_buffer_peak = 0;

  bool pass() const;
  /// Replay descriptor for the first failing identity, if any.
  std::optional<nlohmann::ordered_json> replay(const VerifyOptions& options) const;
};

/// Error between two vectors: max |a - b| over max |b| (tiny floor).
double relative_error(std::span<const double> a, std::span<const double> b);

VerifyReport run_identity_suite(const VerifyOptions& options);

/// Rebuilds options from a replay descriptor.
VerifyOptions options_from_replay(const nlohmann::json& replay);

/// Names of the identities in suite order.
const std::vector<std::string>& identity_names();

}  // namespace smoe
