#include "scorer/layers.hpp"

namespace scorer::nn {

AttentionParams AttentionParams::bind(const BoundParams& p,
                                      const std::string& prefix) {
  return {p[prefix + ".wq"], p[prefix + ".bq"], p[prefix + ".wk"],
          p[prefix + ".bk"], p[prefix + ".wv"], p[prefix + ".bv"],
          p[prefix + ".wo"], p[prefix + ".bo"]};
}

NormParams NormParams::bind(const BoundParams& p, const std::string& prefix) {
  return {p[prefix + ".gamma"], p[prefix + ".beta"]};
}

ad::Var multi_head_attention(ad::Var q, ad::Var k, ad::Var v,
                             const AttentionParams& p,
                             const ad::AttentionShape& shape,
                             ad::AttentionTrace* trace) {
  ad::Var pq = ad::linear(q, p.wq, p.bq);
  ad::Var pk = ad::linear(k, p.wk, p.bk);
  ad::Var pv = ad::linear(v, p.wv, p.bv);
  return ad::linear(ad::attention_core(pq, pk, pv, shape, trace), p.wo, p.bo);
}

}  // namespace scorer::nn
