#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "simprop/grad_check.hpp"
#include "simprop/model.hpp"

namespace simprop {

struct GradCase {
  std::string name;
  ScalarGraph graph;
  std::vector<Tensor> inputs;
  GradCheckOptions options;
};

struct GradCaseResult {
  std::string name;
  GradCheckReport report;
  double tolerance = 0.0;
  double seconds = 0.0;
};

/// One case per differentiable op on small random instances.
std::vector<GradCase> op_grad_cases(std::uint64_t seed, float tolerance = 1e-2f);

/// Small model used by the end-to-end check.
ModelConfig grad_check_model_config(int input_size = 32);

/// Dual loss of one random episode with respect to all model parameters.
GradCase end_to_end_grad_case(const ModelConfig& cfg, std::uint64_t seed, float tolerance = 3e-2f,
                              std::size_t max_samples = 10000, float step = 1e-3f);

std::vector<GradCaseResult> run_grad_cases(const std::vector<GradCase>& cases, int threads);

/// Wraps leaf variables (in canonical order) into a parameter tree shaped like `like`.
BoundParams bound_from(const ModelParams& like, std::span<const Var> vars);
std::vector<Tensor> flatten_params(const ModelParams& params);

}  // namespace simprop
