#pragma once

#include <cstdint>

#include "scorer/params.hpp"

namespace scorer {

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam moments for every parameter of a store.
class AdamState {
 public:
  AdamState(const ParamStore& params, AdamHyper hyper);

  /// One update. Every parameter must have a gradient of matching dims.
  void step(ParamStore& params, const ParamStore& grads);

  uint64_t steps() const { return step_; }
  const AdamHyper& hyper() const { return hyper_; }
  const ParamStore& first_moment() const { return m_; }
  const ParamStore& second_moment() const { return v_; }

 private:
  AdamHyper hyper_;
  ParamStore m_;
  ParamStore v_;
  uint64_t step_ = 0;
};

}  // namespace scorer
