#pragma once

#include <string>
#include <vector>

#include "ms2tan/types.hpp"

namespace ms2tan {

struct GradcheckReport {
  std::string op;
  std::string module;
  double max_rel_err = 0;
  std::string worst_coordinate;  // "<tensor>[index]"
  double analytic_at_worst = 0;
  double numeric_at_worst = 0;
  Index coordinates_checked = 0;
  double tolerance = 1e-4;
  bool passed = false;
};

struct GradcheckOptions {
  double epsilon = 1e-5;
  std::uint64_t seed = 0;
  Index max_coords_per_tensor = 0;  // 0 checks every coordinate; otherwise an evenly strided subset
};

/// Registered op ids in suite order.
const std::vector<std::string>& gradcheck_ops();

/// Module owning an op: embedding, attention, network, losses.
std::string gradcheck_module(const std::string& op);

/// Compares analytic gradients (inputs and parameters) of sum(R * op(...)) for a fixed random
/// R against central differences, at 64-bit. Relative error per coordinate is
/// |a - n| / max(|a|, |n|), taken as 0 when both vanish.
GradcheckReport gradcheck(const std::string& op, const GradcheckOptions& options = {});

/// `suite` is "all" or a module name.
std::vector<GradcheckReport> gradcheck_suite(const std::string& suite, const GradcheckOptions& options = {});

}  // namespace ms2tan
