#include "scorer/decoder.hpp"

#include <numeric>

#include "scorer/layers.hpp"

namespace scorer::decoder {

CaptionBatch CaptionBatch::from(std::span<const CaptionSeq> captions,
                                size_t steps, size_t vocab_size) {
  CaptionBatch b;
  b.batch = captions.size();
  b.steps = steps;
  b.inputs.assign(b.batch * steps, kPad);
  b.targets.assign(b.batch * steps, kPad);
  for (size_t i = 0; i < b.batch; ++i) {
    const CaptionSeq& c = captions[i];
    validate_caption(c, steps + 1, vocab_size);
    const size_t n = c.size() - 1;
    for (size_t t = 0; t < n; ++t) {
      b.inputs[i * steps + t] = c[t];
      b.targets[i * steps + t] = c[t + 1];
    }
    b.lengths.push_back(n);
  }
  return b;
}

DecoderOutput decode_teacher_forced(ad::Var difference, const CaptionBatch& batch,
                                    const BoundParams& p, const ModelConfig& cfg,
                                    bool record_attention) {
  const size_t bsz = batch.batch;
  const size_t steps = batch.steps;
  if (steps == 0 || steps > cfg.decoder_steps()) {
    throw ShapeError("decoder: " + std::to_string(steps) +
                     " steps exceed the configured maximum " +
                     std::to_string(cfg.decoder_steps()));
  }
  if (difference.value().rows() != bsz * cfg.tokens() ||
      difference.value().cols() != cfg.model_dim) {
    throw ShapeError("decoder: difference grid " +
                     shape_string(difference.value().dims()) +
                     " does not match batch of " + std::to_string(bsz));
  }
  std::vector<TokenId> positions(steps);
  std::iota(positions.begin(), positions.end(), TokenId{0});
  ad::Var pos = ad::embedding_gather(p["dec.pos"], positions);
  ad::Var x = ad::matmul(ad::embedding_gather(p["dec.embed"], batch.inputs),
                         p["dec.embed_proj"]);
  x = ad::add(x, ad::tile_rows(pos, bsz));

  DecoderOutput out;
  for (size_t l = 0; l < cfg.decoder_layers; ++l) {
    const std::string pre = "dec.l" + std::to_string(l);
    ad::Var sa = nn::multi_head_attention(
        x, x, x, nn::AttentionParams::bind(p, pre + ".self"),
        {cfg.decoder_heads, bsz, true});
    x = nn::norm(ad::add(x, sa), nn::NormParams::bind(p, pre + ".ln1"));
    ad::AttentionTrace trace;
    ad::Var ca = nn::multi_head_attention(
        x, difference, difference, nn::AttentionParams::bind(p, pre + ".cross"),
        {cfg.decoder_heads, bsz, false}, record_attention ? &trace : nullptr);
    if (record_attention) out.cross_attention.push_back(std::move(trace));
    x = nn::norm(ad::add(x, ca), nn::NormParams::bind(p, pre + ".ln2"));
    ad::Var ff = ad::linear(
        ad::relu(ad::linear(x, p[pre + ".ffn.w1"], p[pre + ".ffn.b1"])),
        p[pre + ".ffn.w2"], p[pre + ".ffn.b2"]);
    x = nn::norm(ad::add(x, ff), nn::NormParams::bind(p, pre + ".ln3"));
  }
  out.states = x;
  out.logits = ad::linear(x, p["dec.out.w"], p["dec.out.b"]);
  return out;
}

ad::Var caption_nll(ad::Var logits, const CaptionBatch& batch) {
  if (logits.value().rows() != batch.targets.size()) {
    throw ShapeError("caption_nll: " + std::to_string(logits.value().rows()) +
                     " logit rows for " + std::to_string(batch.targets.size()) +
                     " targets");
  }
  return ad::cross_entropy_with_logits(logits, batch.targets, kPad);
}

size_t argmax(std::span<const double> row) {
  size_t best = 0;
  for (size_t i = 1; i < row.size(); ++i) {
    if (row[i] > row[best]) best = i;
  }
  return best;
}

GreedyResult greedy_decode(const Tensor& difference, size_t batch,
                           const ParamStore& params, const ModelConfig& cfg,
                           size_t max_len) {
  max_len = std::min(max_len, cfg.max_caption_len);
  if (max_len < 2) throw std::invalid_argument("greedy_decode: max_len < 2");
  GreedyResult res;
  res.captions.assign(batch, CaptionSeq{kBos});
  res.word_attention.assign(batch, {});
  std::vector<bool> done(batch, false);
  const size_t n = cfg.tokens();
  for (size_t step = 0; step + 1 < max_len; ++step) {
    const size_t steps = step + 1;
    CaptionBatch cb;
    cb.batch = batch;
    cb.steps = steps;
    cb.inputs.assign(batch * steps, kPad);
    cb.targets.assign(batch * steps, kPad);
    for (size_t b = 0; b < batch; ++b) {
      for (size_t i = 0; i < steps && i < res.captions[b].size(); ++i) {
        cb.inputs[b * steps + i] = res.captions[b][i];
      }
    }
    ad::Tape tape;
    BoundParams bound(tape, params, false);
    ad::Var diff = tape.constant(difference);
    DecoderOutput out = decode_teacher_forced(diff, cb, bound, cfg, true);
    const Tensor& logits = out.logits.value();
    const ad::AttentionTrace& tr = out.cross_attention.back();
    bool all_done = true;
    for (size_t b = 0; b < batch; ++b) {
      if (done[b]) continue;
      const auto next = static_cast<TokenId>(argmax(logits.row(b * steps + step)));
      res.captions[b].push_back(next);
      std::vector<double> att(n, 0.0);
      for (size_t h = 0; h < tr.heads; ++h) {
        for (size_t j = 0; j < n; ++j) {
          att[j] += tr.at(b, h, step, j) / static_cast<double>(tr.heads);
        }
      }
      res.word_attention[b].push_back(std::move(att));
      if (next == kEos) done[b] = true;
      all_done = all_done && done[b];
    }
    if (all_done) break;
  }
  return res;
}

}  // namespace scorer::decoder
