#pragma once

#include "scorer/autodiff.hpp"
#include "scorer/config.hpp"
#include "scorer/decoder.hpp"
#include "scorer/params.hpp"
#include "scorer/similarity.hpp"

namespace scorer::cbr {

/// Per caption, the mean of its decoder states over non-PAD steps:
/// [B*steps x D] -> [B x D].
ad::Var sentence_feature(ad::Var states, const decoder::CaptionBatch& batch);

/// Single caption form: [m x D] -> [D].
ad::Var sentence_feature(ad::Var states);

/// Concatenates every "before" token with its caption's sentence feature and
/// maps 2D -> D. before: [B*N x D], sentence: [B x D].
ad::Var build_hallucination(ad::Var before, ad::Var sentence, ad::Var w_fuse,
                            ad::Var b_fuse);

/// Self-attention over the hallucinated grid followed by the output
/// projection.
ad::Var refine_hallucination(ad::Var hallucination, const BoundParams& p,
                             size_t heads, size_t segments);

/// L_cm: batch similarity of hallucinations vs afters, then the alignment loss.
ad::Var cbr_loss(ad::Var hallucinations, ad::Var afters, size_t segments,
                 const similarity::AlignmentConfig& cfg,
                 const similarity::MtmWeights& w);

/// Full path from decoder states to L_cm.
ad::Var backward_reasoning_loss(ad::Var before, ad::Var after, ad::Var states,
                                const decoder::CaptionBatch& batch,
                                const BoundParams& p, const ModelConfig& cfg,
                                const similarity::AlignmentConfig& align);

}  // namespace scorer::cbr
