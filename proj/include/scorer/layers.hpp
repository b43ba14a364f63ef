#pragma once

#include <string>

#include "scorer/autodiff.hpp"
#include "scorer/params.hpp"

namespace scorer::nn {

/// Q/K/V/output projections of one attention block, each D x D plus bias.
struct AttentionParams {
  ad::Var wq, bq, wk, bk, wv, bv, wo, bo;

  static AttentionParams bind(const BoundParams& p, const std::string& prefix);
};

struct NormParams {
  ad::Var gamma, beta;

  static NormParams bind(const BoundParams& p, const std::string& prefix);
};

/// Projects q/k/v, runs segmented multi-head attention, applies the output
/// projection.
ad::Var multi_head_attention(ad::Var q, ad::Var k, ad::Var v,
                             const AttentionParams& p,
                             const ad::AttentionShape& shape,
                             ad::AttentionTrace* trace = nullptr);

inline ad::Var norm(ad::Var x, const NormParams& p) {
  return ad::layer_norm(x, p.gamma, p.beta);
}

}  // namespace scorer::nn
