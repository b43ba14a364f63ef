#pragma once

#include <span>
#include <vector>

#include "scorer/changeworld.hpp"
#include "scorer/config.hpp"
#include "scorer/decoder.hpp"
#include "scorer/encoder.hpp"
#include "scorer/params.hpp"
#include "scorer/vocab.hpp"

namespace scorer::model {

/// Scene pairs with their rendered views and encoded captions, ready for
/// batching.
struct RenderedDataset {
  std::vector<changeworld::ScenePair> pairs;
  Vocabulary vocab;
  std::vector<Tensor> before;  // [N x Din] per pair
  std::vector<Tensor> after;
  std::vector<CaptionSeq> captions;
  changeworld::RenderSpec spec;

  size_t size() const { return pairs.size(); }

  /// Renders every pair with a RenderSpec built from cfg.render_seed /
  /// cfg.render_noise. Throws if a grid or caption does not fit cfg.model.
  static RenderedDataset build(std::vector<changeworld::ScenePair> pairs,
                               Vocabulary vocab, const TrainConfig& cfg);
};

/// B stacked pairs: raw views [B*N x Din] and their captions.
struct Batch {
  size_t size = 0;
  Tensor raw_before;
  Tensor raw_after;
  std::vector<CaptionSeq> captions;
};

Batch make_batch(const RenderedDataset& data, std::span<const size_t> indices);

/// Like make_batch, but every pair is re-rendered from a fresh viewpoint: a
/// draw_view_offset offset and new noise for both views, all drawn from
/// `seed`. Captions are unchanged.
Batch make_reframed_batch(const RenderedDataset& data, std::span<const size_t> indices,
                          uint64_t seed, size_t max_shift);

struct ForwardResult {
  ad::Var total;
  ad::Var cap;
  ad::Var cv;  // unset when lambda_v is 0
  ad::Var cm;  // unset when lambda_m is 0
  encoder::PairEncoding encoding;
  decoder::DecoderOutput decoding;
  decoder::CaptionBatch captions;
};

/// Full forward of one batch with the joint loss. `cfg` is gated through
/// TrainConfig::effective(); inactive losses are never computed.
ForwardResult forward(const Batch& batch, const BoundParams& p,
                      const TrainConfig& cfg, bool record_attention = false);

/// L_cap + lambda_v * L_cv + lambda_m * L_cm; a zero lambda drops its term.
double total_loss(double cap, double cv, double cm, double lambda_v,
                  double lambda_m);
ad::Var total_loss(ad::Var cap, ad::Var cv, ad::Var cm, double lambda_v,
                   double lambda_m);

/// Difference representation of a batch under fixed parameters.
Tensor difference_grid(const Batch& batch, const ParamStore& params,
                       const TrainConfig& cfg);

}  // namespace scorer::model
