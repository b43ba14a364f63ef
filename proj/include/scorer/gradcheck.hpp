#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "scorer/autodiff.hpp"
#include "scorer/config.hpp"

namespace scorer::gradcheck {

/// A scalar function of several tensors, built on a fresh tape per call.
struct Case {
  std::string name;
  std::vector<Tensor> inputs;
  std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)> fn;
};

struct Result {
  std::string name;
  double max_rel_error = 0.0;
  size_t checked = 0;  // scalar entries compared
};

/// Analytic gradient vs central differences. Per input tensor the error is
/// max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-6); the
/// result is the worst tensor.
Result check(const Case& c, double step = 1e-4);

/// Names accepted by make_case, ops first and the three losses last.
std::vector<std::string> case_names();

/// Tiny model used by the loss cases: 2x2 grid (N=4), D=8, U=10, B=3.
TrainConfig tiny_config();

/// Randomised instance of a named case; throws std::invalid_argument for an
/// unknown name.
Case make_case(const std::string& name, uint64_t seed = 1);

}  // namespace scorer::gradcheck
