#include "scorer/cbr.hpp"

#include "scorer/layers.hpp"

namespace scorer::cbr {

ad::Var sentence_feature(ad::Var states, const decoder::CaptionBatch& batch) {
  const size_t bsz = batch.batch;
  const size_t steps = batch.steps;
  if (states.value().rows() != bsz * steps) {
    throw ShapeError("sentence_feature: state rows do not match caption batch");
  }
  Tensor pool({bsz, bsz * steps});
  for (size_t b = 0; b < bsz; ++b) {
    if (batch.lengths[b] == 0) throw ShapeError("sentence_feature: empty caption");
    const double w = 1.0 / static_cast<double>(batch.lengths[b]);
    for (size_t t = 0; t < batch.lengths[b]; ++t) pool.at(b, b * steps + t) = w;
  }
  return ad::matmul(states.tape->constant(std::move(pool)), states);
}

ad::Var sentence_feature(ad::Var states) { return ad::mean_pool_rows(states); }

ad::Var build_hallucination(ad::Var before, ad::Var sentence, ad::Var w_fuse,
                            ad::Var b_fuse) {
  const size_t bsz = sentence.value().rows();
  const size_t rows = before.value().rows();
  if (bsz == 0 || rows % bsz != 0) {
    throw ShapeError("build_hallucination: grid rows not divisible by batch");
  }
  if (sentence.value().cols() != before.value().cols()) {
    throw ShapeError("build_hallucination: sentence width differs from grid width");
  }
  const size_t n = rows / bsz;
  ad::Var spread;
  if (bsz == 1) {
    spread = ad::broadcast_rows(sentence, n);
  } else {
    Tensor r({rows, bsz});
    for (size_t b = 0; b < bsz; ++b) {
      for (size_t i = 0; i < n; ++i) r.at(b * n + i, b) = 1.0;
    }
    spread = ad::matmul(before.tape->constant(std::move(r)), sentence);
  }
  return ad::linear(ad::concat_cols(before, spread), w_fuse, b_fuse);
}

ad::Var refine_hallucination(ad::Var hallucination, const BoundParams& p,
                             size_t heads, size_t segments) {
  ad::Var att = nn::multi_head_attention(
      hallucination, hallucination, hallucination,
      nn::AttentionParams::bind(p, "cbr.attn"), {heads, segments, false});
  return ad::linear(att, p["cbr.out.w"], p["cbr.out.b"]);
}

ad::Var cbr_loss(ad::Var hallucinations, ad::Var afters, size_t segments,
                 const similarity::AlignmentConfig& cfg,
                 const similarity::MtmWeights& w) {
  if (!hallucinations.value().same_shape(afters.value())) {
    throw ShapeError("cbr_loss: hallucination and after batches differ");
  }
  return similarity::alignment_loss(hallucinations, afters, segments, cfg, w);
}

ad::Var backward_reasoning_loss(ad::Var before, ad::Var after, ad::Var states,
                                const decoder::CaptionBatch& batch,
                                const BoundParams& p, const ModelConfig& cfg,
                                const similarity::AlignmentConfig& align) {
  ad::Var sentence = sentence_feature(states, batch);
  ad::Var hal = build_hallucination(before, sentence, p["cbr.fuse.w"],
                                    p["cbr.fuse.b"]);
  hal = refine_hallucination(hal, p, cfg.cbr_heads, batch.batch);
  similarity::MtmWeights w{p["cbr.mtm.wq"], p["cbr.mtm.wk"], cfg.cbr_mtm_heads};
  return cbr_loss(hal, after, batch.batch, align, w);
}

}  // namespace scorer::cbr
