#pragma once

#include <vector>

#include "scorer/autodiff.hpp"
#include "scorer/config.hpp"
#include "scorer/layers.hpp"
#include "scorer/params.hpp"

namespace scorer::encoder {

/// Position-indexed tokens of one view, row-major over an H x W grid.
struct FeatureGrid {
  Tensor tokens;
  size_t height = 0;
  size_t width = 0;

  FeatureGrid(Tensor t, size_t h, size_t w);
  size_t size() const { return height * width; }
  size_t row_of(size_t i) const { return i / width; }
  size_t col_of(size_t i) const { return i % width; }
};

/// Output of the cross-view encoder over a stacked batch [B*N x D].
struct PairEncoding {
  ad::Var before;      // projected "before" grids (input to view alignment)
  ad::Var after;       // projected "after" grids
  ad::Var difference;  // per-token difference representation
  /// Reconstruction attention of the last layer, before->after and
  /// after->before (empty for the subtraction variant or when not requested).
  ad::AttentionTrace before_attention;
  ad::AttentionTrace after_attention;
};

/// raw [B*N x Din] -> raw * W + b + position table (tiled over the batch).
ad::Var project_grid(ad::Var raw, const BoundParams& p, size_t segments);

/// Each token of `a` rebuilt as an attention mixture of `b`'s tokens.
ad::Var reconstruct_unchanged(ad::Var a, ad::Var b,
                              const nn::AttentionParams& attn, size_t heads,
                              size_t segments, ad::AttentionTrace* trace = nullptr);

/// LayerNorm(x + xu).
ad::Var fuse_unchanged(ad::Var x, ad::Var xu, const nn::NormParams& ln);

/// ReLU([before ; after] W_h + b_h).
ad::Var difference_representation(ad::Var before, ad::Var after, ad::Var w_h,
                                  ad::Var b_h);

/// One reconstruction block applied to both views.
std::pair<ad::Var, ad::Var> reconstruction_layer(
    ad::Var before, ad::Var after, const BoundParams& p, size_t layer,
    const ModelConfig& cfg, size_t segments,
    ad::AttentionTrace* before_trace = nullptr,
    ad::AttentionTrace* after_trace = nullptr);

PairEncoding encode_pair(ad::Var raw_before, ad::Var raw_after,
                         const BoundParams& p, const ModelConfig& cfg,
                         Variant variant, size_t segments,
                         bool record_attention = false);

}  // namespace scorer::encoder
