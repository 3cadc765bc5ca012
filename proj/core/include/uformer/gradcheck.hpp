#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "uformer/model.hpp"

namespace uformer {

inline constexpr double kPrimitiveTolerance = 1e-4;
inline constexpr double kModelTolerance = 1e-3;

struct GradcheckOptions {
  double step = 1e-5;         // central-difference step
  std::uint64_t seed = 0;
  std::int64_t max_entries = 0;  // per input; 0 checks every entry
  double inject_fault = 0.0;  // analytic gradients are scaled by (1 + inject_fault)
};

struct GradcheckResult {
  std::string name;
  double rel_error = 0.0;
  double tolerance = 0.0;
  std::int64_t entries = 0;

  bool passed() const { return rel_error < tolerance; }
};

/// ||a - n|| / max(||a||, ||n||, 1e-12).
double relative_error(std::span<const double> analytic, std::span<const double> numeric);

using ScalarFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Compares the reverse-mode gradient of f with central differences for every
/// (or a random subset of each) input. Inputs must be leaves.
GradcheckResult check_gradient(const std::string& name, const ScalarFn& f, std::vector<Tensor<double>> inputs,
                               double tolerance, const GradcheckOptions& options);

/// Every differentiable primitive and the LeWin composites on small random
/// shapes.
std::vector<GradcheckResult> primitive_suite(const GradcheckOptions& options);

/// Charbonnier loss of a full model pass, checked against a random subset of
/// every parameter tensor and the input.
GradcheckResult model_check(const UformerConfig& config, std::int64_t extent, const GradcheckOptions& options);

}  // namespace uformer
