#pragma once

// Central-difference gradient checks over every differentiable operation.

#include <cstdint>
#include <string>
#include <vector>

namespace mscada {

struct GradCheckResult {
  std::string name;
  std::uint64_t seed = 0;
  double max_rel_error = 0.0;
};

inline constexpr double kGradCheckTolerance = 1e-4;

std::vector<std::string> gradcheck_names();
// One check on freshly drawn inputs.
GradCheckResult run_gradcheck(const std::string& name, std::uint64_t seed);
// Every check for seeds [0, seeds).
std::vector<GradCheckResult> run_gradcheck_suite(std::size_t seeds);

}  // namespace mscada
