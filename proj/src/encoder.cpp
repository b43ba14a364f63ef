#include "scorer/encoder.hpp"

namespace scorer::encoder {

FeatureGrid::FeatureGrid(Tensor t, size_t h, size_t w)
    : tokens(std::move(t)), height(h), width(w) {
  if (tokens.rank() != 2 || tokens.rows() != h * w) {
    throw ShapeError("FeatureGrid: expected " + std::to_string(h * w) +
                     " tokens, got " + shape_string(tokens.dims()));
  }
}

ad::Var project_grid(ad::Var raw, const BoundParams& p, size_t segments) {
  ad::Var pos = p["enc.pos"];
  if (raw.value().rows() != segments * pos.value().rows()) {
    throw ShapeError("project_grid: " + std::to_string(raw.value().rows()) +
                     " rows do not match " + std::to_string(segments) +
                     " grids of " + std::to_string(pos.value().rows()) + " cells");
  }
  ad::Var proj = ad::linear(raw, p["enc.proj.w"], p["enc.proj.b"]);
  return ad::add(proj, ad::tile_rows(pos, segments));
}

ad::Var reconstruct_unchanged(ad::Var a, ad::Var b,
                              const nn::AttentionParams& attn, size_t heads,
                              size_t segments, ad::AttentionTrace* trace) {
  if (!a.value().same_shape(b.value())) {
    throw ShapeError("reconstruct_unchanged: grids differ in shape");
  }
  return nn::multi_head_attention(a, b, b, attn, {heads, segments, false}, trace);
}

ad::Var fuse_unchanged(ad::Var x, ad::Var xu, const nn::NormParams& ln) {
  return nn::norm(ad::add(x, xu), ln);
}

ad::Var difference_representation(ad::Var before, ad::Var after, ad::Var w_h,
                                  ad::Var b_h) {
  if (!before.value().same_shape(after.value())) {
    throw ShapeError("difference_representation: grids differ in shape");
  }
  return ad::relu(ad::linear(ad::concat_cols(before, after), w_h, b_h));
}

std::pair<ad::Var, ad::Var> reconstruction_layer(
    ad::Var before, ad::Var after, const BoundParams& p, size_t layer,
    const ModelConfig& cfg, size_t segments, ad::AttentionTrace* before_trace,
    ad::AttentionTrace* after_trace) {
  const std::string prefix = "enc.rr" + std::to_string(layer);
  const auto attn = nn::AttentionParams::bind(p, prefix + ".attn");
  const auto ln = nn::NormParams::bind(p, prefix + ".ln");
  ad::Var bu = reconstruct_unchanged(before, after, attn, cfg.encoder_heads,
                                     segments, before_trace);
  ad::Var au = reconstruct_unchanged(after, before, attn, cfg.encoder_heads,
                                     segments, after_trace);
  return {fuse_unchanged(before, bu, ln), fuse_unchanged(after, au, ln)};
}

PairEncoding encode_pair(ad::Var raw_before, ad::Var raw_after,
                         const BoundParams& p, const ModelConfig& cfg,
                         Variant variant, size_t segments,
                         bool record_attention) {
  PairEncoding out;
  out.before = project_grid(raw_before, p, segments);
  out.after = project_grid(raw_after, p, segments);
  ad::Var w_h = p["enc.fuse.w"];
  ad::Var b_h = p["enc.fuse.b"];
  if (variant == Variant::kSubtraction) {
    ad::Var diff = ad::sub(out.after, out.before);
    out.difference = difference_representation(diff, diff, w_h, b_h);
    return out;
  }
  ad::Var bc = out.before;
  ad::Var ac = out.after;
  for (size_t l = 0; l < cfg.encoder_layers; ++l) {
    const bool last = record_attention && l + 1 == cfg.encoder_layers;
    std::tie(bc, ac) = reconstruction_layer(
        bc, ac, p, l, cfg, segments, last ? &out.before_attention : nullptr,
        last ? &out.after_attention : nullptr);
  }
  out.difference = difference_representation(bc, ac, w_h, b_h);
  return out;
}

}  // namespace scorer::encoder
