#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "simprop/autograd.hpp"

namespace simprop {

/// Builds an output on `tape` from the given input variables. The checked
/// function is the sum of the output's elements; the finite-difference side
/// forms that sum in double precision from elementwise differences, so
/// outputs untouched by a perturbation cancel exactly.
using ScalarGraph = std::function<Var(Tape& tape, std::span<const Var> inputs)>;

struct GradCheckOptions {
  float step = 1e-3f;
  /// Combine central differences at step and 2*step, (4 D(h) - D(2h)) / 3,
  /// cancelling the O(h^2) truncation term.
  bool richardson = false;
  float tolerance = 1e-2f;
  /// Elements beyond this count are checked on a random subsample.
  std::size_t max_samples = 10000;
  /// Lower bound of the relative-error denominator.
  float denom_floor = 1e-6f;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t failed = 0;
  /// Elements whose +/- step evaluations took a different non-smooth branch
  /// than the unperturbed point; the difference quotient is not a derivative
  /// estimate there, so they are excluded from the error statistics.
  std::size_t kink_skipped = 0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  float worst_analytic = 0.0f;
  float worst_numeric = 0.0f;

  bool passed() const { return failed == 0; }
};

/// Compares reverse-mode gradients of `f` against central differences,
/// element by element, for every tensor in `inputs`.
GradCheckReport grad_check(const ScalarGraph& f, const std::vector<Tensor>& inputs, const GradCheckOptions& opts = {});

struct GraphEval {
  Tensor output;
  std::uint64_t branches = 0;
};

/// Checks directional derivatives instead of single elements: for random
/// directions d (entries uniform in [-1, 1], scaled by each input's RMS),
/// compares sum(grad * d) with the central difference along d. Aggregating
/// over all elements lifts the signal far above float32 rounding.
GradCheckReport directional_grad_check(const ScalarGraph& f, const std::vector<Tensor>& inputs, int directions,
                                       const GradCheckOptions& opts = {});

/// Forward-only evaluation of `f` at `inputs`.
GraphEval evaluate_graph(const ScalarGraph& f, const std::vector<Tensor>& inputs);
/// Sum of the output elements of `f` at `inputs`, in double.
double evaluate_scalar(const ScalarGraph& f, const std::vector<Tensor>& inputs);

std::string describe(const GradCheckReport& r);

}  // namespace simprop
