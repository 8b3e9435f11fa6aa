#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "oshx/tensor.hpp"

namespace oshx {

/// Central finite-difference gradient verification, always in 64-bit mode.
/// The numeric side only re-evaluates the forward map at perturbed inputs,
/// so it stays independent of the analytic backward rules it judges.

struct GradCheckOptions {
  double h = 1e-4;        // central-difference step
  double tolerance = 1e-5;
  int seeds_per_op = 10;
  uint64_t base_seed = 20240901;
};

/// Forward map under test. Must be a pure function of the given inputs.
using ForwardFn = std::function<TensorD(const std::vector<TensorD>&)>;

/// Max relative error between analytic and central-difference gradients over
/// every element of every input, where the scalar objective is
/// sum(f(inputs) * R) for a seed-fixed random R. The error is relative to
/// max(1, |analytic|, |numeric|).
double finite_diff_max_rel_err(const ForwardFn& f, std::vector<TensorD> inputs,
                               uint64_t probe_seed, double h = 1e-4);

struct OpCheck {
  std::string name;
  /// Builds seed-dependent inputs and returns the max relative error.
  std::function<double(uint64_t seed, double h)> run;
};

/// One named check per differentiable op in the library.
std::vector<OpCheck> standard_op_checks();

struct OpCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<OpCheckResult> results;
  bool all_pass = false;
};

/// Runs every check over opts.seeds_per_op derived seeds and keeps the worst
/// error per op.
GradCheckReport run_gradcheck(const std::vector<OpCheck>& checks,
                              const GradCheckOptions& opts = {});

} // namespace oshx
