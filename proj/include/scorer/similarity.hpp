#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

#include "scorer/autodiff.hpp"
#include "scorer/tensor.hpp"

namespace scorer::similarity {

enum class SimMode { kMtm, kTm, kMeanPool, kMaxPool };
enum class LossMode { kInfoNce, kL2 };

SimMode parse_sim_mode(std::string_view s);
LossMode parse_loss_mode(std::string_view s);
std::string to_string(SimMode m);
std::string to_string(LossMode m);

struct AlignmentConfig {
  double temperature = 0.1;
  SimMode sim_mode = SimMode::kMtm;
  LossMode loss_mode = LossMode::kInfoNce;
};

/// Multi-head matching weights: head i uses columns [i*D/h, (i+1)*D/h) of
/// both D x D projections.
struct MtmWeights {
  ad::Var query;
  ad::Var key;
  size_t heads = 1;
};

/// Number of similarity/contrastive evaluations since process start. Lets
/// callers verify that a code path never touched the matching machinery.
uint64_t evaluation_count();

// ---------------------------------------------------------------------------
// Value-level API. Token matrices are [N x d]; tm_similarity expects the
// caller to have normalised the tokens.

/// Average token-wise maximum similarity, symmetrised over both directions.
double tm_similarity(const Tensor& q, const Tensor& k);

double mtm_similarity(const Tensor& q, const Tensor& k, const Tensor& w_query,
                      const Tensor& w_key, size_t heads);

/// Pools each side to one vector, normalises, and returns the dot product.
/// A zero pooled vector scores 0.
double pooled_similarity(const Tensor& q, const Tensor& k, ad::PoolMode mode);

/// B x B matrix, entry (k, r) = similarity(befores[k], afters[r]).
Tensor batch_similarity(std::span<const Tensor> befores,
                        std::span<const Tensor> afters,
                        const AlignmentConfig& cfg, const Tensor& w_query,
                        const Tensor& w_key, size_t heads);

double info_nce_bidirectional(const Tensor& s, double temperature);

double l2_alignment(std::span<const Tensor> befores,
                    std::span<const Tensor> afters);

// ---------------------------------------------------------------------------
// Differentiable API over stacked batches: rows [segments * N x D].

/// B x B matrix of TM scores averaged over `heads` column groups. Inputs are
/// used as given (normalise beforehand).
ad::Var tm_matrix(ad::Var befores, ad::Var afters, size_t segments,
                  size_t heads);

/// out(i, j) = dot(a_i, b_j), evaluated with the same kernel as TM.
ad::Var pairwise_dot(ad::Var a, ad::Var b);

ad::Var batch_similarity(ad::Var befores, ad::Var afters, size_t segments,
                         const AlignmentConfig& cfg, const MtmWeights& w);

/// Mean of the row-wise and column-wise InfoNCE terms of a square matrix.
ad::Var info_nce(ad::Var s, double temperature);

ad::Var l2_alignment(ad::Var befores, ad::Var afters, size_t segments);

/// L_cv / L_cm: batch similarity followed by the configured alignment loss.
ad::Var alignment_loss(ad::Var befores, ad::Var afters, size_t segments,
                       const AlignmentConfig& cfg, const MtmWeights& w);

}  // namespace scorer::similarity
