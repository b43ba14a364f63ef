#include "scorer/adam.hpp"

#include <cmath>

namespace scorer {

AdamState::AdamState(const ParamStore& params, AdamHyper hyper) : hyper_(hyper) {
  for (const auto& name : params.names()) {
    m_.add(name, Tensor::zeros_like(params.get(name)));
    v_.add(name, Tensor::zeros_like(params.get(name)));
  }
}

void AdamState::step(ParamStore& params, const ParamStore& grads) {
  for (const auto& name : params.names()) {
    if (!grads.contains(name)) {
      throw std::invalid_argument("adam: missing gradient for '" + name + "'");
    }
    if (!grads.get(name).same_shape(params.get(name)) ||
        !m_.get(name).same_shape(params.get(name))) {
      throw ShapeError("adam: dims mismatch for '" + name + "'");
    }
  }
  ++step_;
  const double t = static_cast<double>(step_);
  const double c1 = 1.0 - std::pow(hyper_.beta1, t);
  const double c2 = 1.0 - std::pow(hyper_.beta2, t);
  for (const auto& name : params.names()) {
    auto p = params.get(name).values();
    auto g = grads.get(name).values();
    auto m = m_.get(name).values();
    auto v = v_.get(name).values();
    for (size_t i = 0; i < p.size(); ++i) {
      m[i] = hyper_.beta1 * m[i] + (1.0 - hyper_.beta1) * g[i];
      v[i] = hyper_.beta2 * v[i] + (1.0 - hyper_.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] -= hyper_.lr * mhat / (std::sqrt(vhat) + hyper_.eps);
    }
  }
}

}  // namespace scorer
