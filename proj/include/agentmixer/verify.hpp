#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "agentmixer/autodiff.hpp"
#include "agentmixer/rng.hpp"

namespace agentmixer {

struct CheckResult {
  std::string name;
  double measured = 0.0;
  double threshold = 0.0;
  bool pass = false;
  std::size_t configurations = 0;
};

struct SuiteReport {
  std::string suite;
  std::vector<CheckResult> checks;
  bool pass() const;
  std::string to_json() const;
};

// Scalar loss built from parameters bound on the given tape.
using LossBuilder = std::function<Var(Tape&)>;

// |analytic - numeric| / max(|analytic|, |numeric|, 1e-3) over central differences of
// step h, on at most `max_coords` randomly chosen coordinates per tensor (all if 0).
double max_gradient_error(const LossBuilder& loss, const std::vector<Tensor*>& params, Rng& rng,
                          std::size_t max_coords = 0, double h = 1e-6);

// One check per layer family, each over `configs` random shapes and values.
SuiteReport verify_gradients(std::uint64_t seed, std::size_t configs = 100);
// Gumbel-max recovery at tau = 0 on random categorical configurations with K in {2,3,5}.
SuiteReport verify_gumbel(std::uint64_t seed, std::size_t n_samples = 100000, std::size_t configs = 10);
// Ice-lake distillation fixed point, identifiable fully observable case, and the
// geometric decay of successive iterates.
SuiteReport verify_distillation();

// Largest per-iteration log(tv[k+1] / tv[k]) over consecutive positive entries; -inf if
// the sequence reaches zero without a positive pair.
double max_log_slope(const std::vector<double>& tv);

}  // namespace agentmixer
