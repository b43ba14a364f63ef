#pragma once

#include <span>
#include <vector>

#include "scorer/autodiff.hpp"
#include "scorer/config.hpp"
#include "scorer/params.hpp"
#include "scorer/vocab.hpp"

namespace scorer::decoder {

/// Teacher-forcing layout of B captions over `steps` positions: input ids are
/// the caption without its final token, targets are the caption shifted left,
/// both PAD-filled to `steps`.
struct CaptionBatch {
  size_t batch = 0;
  size_t steps = 0;
  std::vector<TokenId> inputs;   // [batch * steps]
  std::vector<TokenId> targets;  // [batch * steps]
  std::vector<size_t> lengths;   // non-PAD target count per caption

  static CaptionBatch from(std::span<const CaptionSeq> captions, size_t steps,
                           size_t vocab_size);
};

struct DecoderOutput {
  ad::Var logits;  // [B*steps x U]
  ad::Var states;  // [B*steps x D], final pre-head states
  /// Cross-attention into the difference grid, one trace per layer (filled
  /// only when requested).
  std::vector<ad::AttentionTrace> cross_attention;
};

/// Post-LN transformer decoder: causal self-attention, cross-attention into
/// `difference` ([B*N x D]), feed-forward; then logits = states W_c + b_c.
DecoderOutput decode_teacher_forced(ad::Var difference, const CaptionBatch& batch,
                                    const BoundParams& p, const ModelConfig& cfg,
                                    bool record_attention = false);

/// Mean over non-PAD steps of -log p(target).
ad::Var caption_nll(ad::Var logits, const CaptionBatch& batch);

struct GreedyResult {
  std::vector<CaptionSeq> captions;
  /// Per caption, per generated word (EOS included), the last decoder layer's
  /// cross-attention over the N grid cells averaged over heads.
  std::vector<std::vector<std::vector<double>>> word_attention;
};

/// Argmax decoding (ties -> lowest id) from BOS until EOS or max_len ids.
/// `difference` holds B stacked grids.
GreedyResult greedy_decode(const Tensor& difference, size_t batch,
                           const ParamStore& params, const ModelConfig& cfg,
                           size_t max_len);

/// Lowest index of the maximum.
size_t argmax(std::span<const double> row);

}  // namespace scorer::decoder
